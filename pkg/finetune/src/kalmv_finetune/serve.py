"""Serve a trained checkpoint behind the completion wire contract.

Route: POST anywhere on the server, JSON body
  {"prompt": str, "max_tokens": int?, "temperature": float?, "top_k": int?,
   "seed": int?, "logprobs": int?, "score": str?}
response
  {"text": str, "first_token_logprobs": {token: logprob}?,
   "sequence_logprob": float?, "num_tokens": int?}

``logprobs`` returns the top-N log-probabilities of the first generated token
keyed by the token's decoded text. ``score`` switches to scoring mode: the
response carries the summed log-probability and token count of that exact
continuation instead of a free generation. This matches the client contract
of the main pipeline, so a served checkpoint can act as its verifier endpoint.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import torch

from .modeling import load_checkpoint

logger = logging.getLogger(__name__)


class CheckpointService:
    """Inference wrapper shared by the HTTP handler and in-process tests."""

    def __init__(self, checkpoint_dir):
        self.tokenizer, self.model, self.meta = load_checkpoint(checkpoint_dir)
        self.max_input_len = int(self.meta.get("max_input_len", 512))
        self._lock = threading.Lock()

    def _encode(self, prompt: str):
        return self.tokenizer(
            prompt,
            return_tensors="pt",
            truncation=True,
            max_length=self.max_input_len,
        )

    @torch.no_grad()
    def first_token_logprobs(self, prompt: str, top_n: int) -> dict[str, float]:
        enc = self._encode(prompt)
        start = torch.full((1, 1), self.model.config.decoder_start_token_id, dtype=torch.long)
        logits = self.model(
            input_ids=enc.input_ids,
            attention_mask=enc.attention_mask,
            decoder_input_ids=start,
        ).logits[0, 0, :]
        logprobs = torch.log_softmax(logits, dim=-1)
        top = torch.topk(logprobs, k=min(top_n, logprobs.shape[-1]))
        out: dict[str, float] = {}
        for token_id, logprob in zip(top.indices.tolist(), top.values.tolist()):
            text = self.tokenizer.decode([token_id])
            if text in out:  # distinct ids can decode to the same text; keep the best
                continue
            out[text] = logprob
        return out

    @torch.no_grad()
    def generate(self, prompt: str, max_tokens: int, temperature: float,
                 top_k: int | None, seed: int | None) -> str:
        enc = self._encode(prompt)
        kwargs = {"max_new_tokens": max_tokens}
        if top_k is not None:
            if seed is not None:
                torch.manual_seed(seed)
            kwargs.update(do_sample=True, top_k=top_k, temperature=temperature)
        else:
            kwargs.update(do_sample=False)
        ids = self.model.generate(
            enc.input_ids, attention_mask=enc.attention_mask, **kwargs
        )
        return self.tokenizer.decode(ids[0], skip_special_tokens=True)

    @torch.no_grad()
    def score(self, prompt: str, continuation: str) -> tuple[float, int]:
        enc = self._encode(prompt)
        target = self.tokenizer(continuation, add_special_tokens=False).input_ids
        if not target:
            return 0.0, 0
        labels = torch.tensor([target], dtype=torch.long)
        logits = self.model(
            input_ids=enc.input_ids, attention_mask=enc.attention_mask, labels=labels
        ).logits
        logprobs = torch.log_softmax(logits, dim=-1)[0]
        total = sum(logprobs[i, tok].item() for i, tok in enumerate(target))
        return total, len(target)

    def handle(self, payload: dict) -> dict:
        prompt = payload["prompt"]
        with self._lock:
            if payload.get("score") is not None:
                continuation = payload["score"]
                total, n = self.score(prompt, continuation)
                return {"text": continuation, "sequence_logprob": total, "num_tokens": n}
            response: dict = {}
            top_n = payload.get("logprobs")
            if top_n:
                response["first_token_logprobs"] = self.first_token_logprobs(prompt, int(top_n))
            response["text"] = self.generate(
                prompt,
                max_tokens=int(payload.get("max_tokens", 16)),
                temperature=float(payload.get("temperature", 1.0)),
                top_k=payload.get("top_k"),
                seed=payload.get("seed"),
            )
            return response


def make_server(checkpoint_dir, host: str = "127.0.0.1", port: int = 0):
    service = CheckpointService(checkpoint_dir)

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            try:
                payload = json.loads(self.rfile.read(length))
                response = service.handle(payload)
                status = 200
            except Exception as exc:  # surface details to the client, keep serving
                logger.exception("request failed")
                response, status = {"error": str(exc)}, 400
            body = json.dumps(response).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

    server = ThreadingHTTPServer((host, port), Handler)
    server.service = service
    return server


def serve(checkpoint_dir, host: str = "127.0.0.1", port: int = 8080):
    server = make_server(checkpoint_dir, host, port)
    actual_host, actual_port = server.server_address
    print(f"serving checkpoint on http://{actual_host}:{actual_port}/v1/completions")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
