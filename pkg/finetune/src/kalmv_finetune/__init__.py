"""Fine-tuning harness for the three-way verifier.

Consumes the labeling pipeline's JSONL records
({"example_id", "template_id", "prompt", "target"}) and trains a small
text-to-text model to emit the option letter. The trained checkpoint can be
served behind the same completion wire contract the main pipeline's LM client
speaks, so it drops in as a verifier endpoint.
"""

__version__ = "0.1.0"
