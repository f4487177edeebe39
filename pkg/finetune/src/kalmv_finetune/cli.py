"""Command line: train, eval, serve."""

from __future__ import annotations

import argparse
import json
import sys

from .serve import serve
from .train import TrainSpec, evaluate_checkpoint, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kalmv-finetune")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune a verifier on labeled records")
    p.add_argument("--train", required=True, help="training records JSONL")
    p.add_argument("--dev", required=True, help="held-out records JSONL")
    p.add_argument("--base-model", required=True,
                   help="checkpoint name, or 'tiny-byt5' for the built-in tiny model")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-input-len", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dev", required=True)

    p = sub.add_parser("serve", help="serve a checkpoint over HTTP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train":
        result = train(
            TrainSpec(
                train_path=args.train,
                dev_path=args.dev,
                base_model_name=args.base_model,
                output_dir=args.out,
                epochs=args.epochs,
                learning_rate=args.lr,
                batch_size=args.batch_size,
                max_input_len=args.max_input_len,
                seed=args.seed,
            )
        )
        final = result.epochs[-1]
        print(
            f"trained {args.epochs} epochs: final train_loss {final.train_loss:.4f}, "
            f"dev_accuracy {final.dev_accuracy:.4f} -> {result.checkpoint_dir}"
        )
        return 0
    if args.command == "eval":
        result = evaluate_checkpoint(args.checkpoint, args.dev)
        print(json.dumps({"accuracy": result.accuracy, "n": result.n,
                          "confusion": result.confusion}, indent=2, sort_keys=True))
        return 0
    serve(args.checkpoint, args.host, args.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
