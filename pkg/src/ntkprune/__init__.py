"""Structured pruning workbench for small SwiGLU/GQA transformers.

Gradient-times-weight saliency scored on a KL-selected calibration batch,
grouped into MLP units and attention KV groups, allocated across modules
by a ratio gamma, globally ranked with per-layer floors, aligned to
multiples of 8 and structurally removed, with a SignGD kernel stability
check on every run. Everything runs on numpy with a built-in reverse-mode
tape; no deep learning framework involved.
"""

__version__ = "0.1.0"

from .model import ModelConfig, Weights, init_weights, toy_config  # noqa: F401
