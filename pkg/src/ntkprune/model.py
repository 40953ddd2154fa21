"""Decoder-only transformer with SwiGLU MLP blocks and grouped-query attention.

Pre-norm residual wiring, learned absolute position embeddings, no biases.
Layers may have heterogeneous MLP widths and head counts after pruning, so
the config carries per-layer values. The per-head size d_h never changes:
pruning removes whole KV groups (one K/V head plus its query/output heads).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BOS_ID = 256
EOS_ID = 257
DEFAULT_VOCAB = 258

# tensor families eligible for pruning; embeddings, norms and the output
# head are never scored or removed
ATTN_FAMILIES = ("wq", "wk", "wv", "wo")
MLP_FAMILIES = ("w_gate", "w_up", "w_down")
PRUNABLE_FAMILIES = MLP_FAMILIES + ATTN_FAMILIES


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    """Architecture hyperparameters, with per-layer values post-prune."""

    d: int
    m: int
    h: int
    h_kv: int
    n_layers: int
    L: int = 128
    vocab: int = DEFAULT_VOCAB
    m_per_layer: list = field(default_factory=list)
    h_per_layer: list = field(default_factory=list)
    hkv_per_layer: list = field(default_factory=list)

    def __post_init__(self):
        if self.h <= 0 or self.d % self.h != 0:
            raise ModelError(f"d={self.d} not divisible by h={self.h}")
        if self.h % self.h_kv != 0:
            raise ModelError(f"h={self.h} not divisible by h_kv={self.h_kv}")
        if self.m < 8:
            raise ModelError(f"m={self.m} below the minimum of 8")
        if not self.m_per_layer:
            self.m_per_layer = [self.m] * self.n_layers
        if not self.h_per_layer:
            self.h_per_layer = [self.h] * self.n_layers
        if not self.hkv_per_layer:
            self.hkv_per_layer = [self.h_kv] * self.n_layers
        for ml, hl, kl in zip(self.m_per_layer, self.h_per_layer,
                              self.hkv_per_layer):
            if ml < 8:
                raise ModelError(f"per-layer m={ml} below the minimum of 8")
            if kl < 1 or hl % kl != 0 or hl // kl != self.h // self.h_kv:
                raise ModelError("per-layer head counts break the group size")

    @property
    def d_h(self) -> int:
        return self.d // self.h

    @property
    def group_size(self) -> int:
        return self.h // self.h_kv

    def to_dict(self) -> dict:
        return {
            "d": self.d, "m": self.m, "h": self.h, "h_kv": self.h_kv,
            "n_layers": self.n_layers, "L": self.L, "vocab": self.vocab,
            "m_per_layer": list(self.m_per_layer),
            "h_per_layer": list(self.h_per_layer),
            "hkv_per_layer": list(self.hkv_per_layer),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def toy_config(n_layers: int = 4) -> ModelConfig:
    """Default desk-scale model: big enough that GQA and the MLP/attention
    balance are non-degenerate, small enough for brute-force oracles."""
    return ModelConfig(d=64, m=256, h=8, h_kv=4, n_layers=n_layers, L=128)


def kv_group_map(h: int, h_kv: int) -> np.ndarray:
    """Query head -> KV group, contiguous blocks: a maps to floor(a*h_kv/h)."""
    return np.array([a * h_kv // h for a in range(h)], dtype=np.int64)


class Weights:
    """Named parameter tensors for one model.

    Read-only during scoring and evaluation; pruning and optimizer steps
    build or mutate their own copies.
    """

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = tensors
        self._check_shapes()

    def _check_shapes(self):
        c = self.config
        expect = expected_shapes(c)
        for name, shape in expect.items():
            if name not in self.tensors:
                raise ModelError(f"missing tensor '{name}'")
            got = self.tensors[name].data.shape
            if tuple(got) != shape:
                raise ModelError(f"tensor '{name}' has shape {got}, want {shape}")
        extra = set(self.tensors) - set(expect)
        if extra:
            raise ModelError(f"unexpected tensors: {sorted(extra)}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors.keys())

    def prunable_names(self) -> list:
        out = []
        for i in range(self.config.n_layers):
            for fam in PRUNABLE_FAMILIES:
                out.append(f"layers.{i}.{fam}")
        return out

    def clone(self) -> "Weights":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                   for k, v in self.tensors.items()}
        return Weights(self.config, tensors)

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


def expected_shapes(c: ModelConfig) -> dict:
    d, dh = c.d, c.d_h
    shapes = {
        "tok_embed": (c.vocab, d),
        "pos_embed": (c.L, d),
        "final_norm": (d,),
        "out_head": (d, c.vocab),
    }
    for i in range(c.n_layers):
        m, h, hkv = c.m_per_layer[i], c.h_per_layer[i], c.hkv_per_layer[i]
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, h * dh)
        shapes[p + "wk"] = (d, hkv * dh)
        shapes[p + "wv"] = (d, hkv * dh)
        shapes[p + "wo"] = (h * dh, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_gate"] = (d, m)
        shapes[p + "w_up"] = (d, m)
        shapes[p + "w_down"] = (m, d)
    return shapes


def init_weights(config: ModelConfig, seed: int = 0) -> Weights:
    """Scaled-normal init, std = 1/sqrt(d); norm gains start at one."""
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(config.d)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("_norm"):
            data = np.ones(shape, dtype=np.float32)
            tensors[name] = Tensor(data, requires_grad=True)
        else:
            data = rng.normal(0.0, std, size=shape).astype(np.float32)
            tensors[name] = Tensor(data, requires_grad=True)
    return Weights(config, tensors)


def causal_mask(t: int) -> np.ndarray:
    """Additive mask, 0 at or below the diagonal, MASK_VALUE above."""
    mask = np.zeros((t, t), dtype=np.float32)
    mask[np.triu_indices(t, k=1)] = ad.MASK_VALUE
    return mask


def forward_logits(weights: Weights, tokens: np.ndarray,
                   trace: Optional[dict] = None) -> Tensor:
    """Causal forward pass; tokens is an int array [batch, seq].

    When ``trace`` is a dict it receives per-layer activation snapshots
    ("attn_rows", "v_act", "mlp_act" lists) for measurement passes.
    """
    c = weights.config
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    bsz, t = tokens.shape
    if t > c.L:
        raise ModelError(f"sequence length {t} exceeds maximum {c.L}")
    if tokens.min() < 0 or tokens.max() >= c.vocab:
        raise ModelError("token id out of range")

    dh = c.d_h
    pos = ad.narrow(weights["pos_embed"], axis=0, start=0, length=t)
    x = ad.add(ad.embed_lookup(weights["tok_embed"], tokens), pos)
    mask = causal_mask(t)

    for i in range(c.n_layers):
        p = f"layers.{i}."
        h, hkv = c.h_per_layer[i], c.hkv_per_layer[i]

        a = ad.rmsnorm(x, weights[p + "attn_norm"])
        q = ad.transpose(ad.reshape(ad.matmul(a, weights[p + "wq"]),
                                    (bsz, t, h, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(ad.matmul(a, weights[p + "wk"]),
                                    (bsz, t, hkv, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(ad.matmul(a, weights[p + "wv"]),
                                    (bsz, t, hkv, dh)), (0, 2, 1, 3))
        # contiguous-block query->group map: expansion is a plain repeat
        k_e = ad.repeat_interleave(k, h // hkv, axis=1)
        v_e = ad.repeat_interleave(v, h // hkv, axis=1)
        # scaling q (small) beats scaling the [b, h, t, t] score tensor
        q = ad.scale(q, 1.0 / math.sqrt(dh))
        attn = ad.softmax_rows(ad.matmul(q, k_e, transpose_b=True),
                               additive_mask=mask)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v_e), (0, 2, 1, 3)),
                         (bsz, t, h * dh))
        x = ad.add(x, ad.matmul(ctx, weights[p + "wo"]))

        b = ad.rmsnorm(x, weights[p + "mlp_norm"])
        gated = ad.mul(ad.swish(ad.matmul(b, weights[p + "w_gate"])),
                       ad.matmul(b, weights[p + "w_up"]))
        x = ad.add(x, ad.matmul(gated, weights[p + "w_down"]))

        if trace is not None:
            trace.setdefault("attn_rows", []).append(attn.data)
            trace.setdefault("v_act", []).append(v.data)
            trace.setdefault("mlp_act", []).append(gated.data)

    x = ad.rmsnorm(x, weights["final_norm"])
    return ad.matmul(x, weights["out_head"])


def scalar_output_f(weights: Weights, batch) -> Tensor:
    """Mean next-token log-likelihood over the batch, as a [1] tensor.

    This is the scalar whose gradient drives saliency and the NTK checks.
    """
    tokens = np.asarray(batch.samples if hasattr(batch, "samples") else batch)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.size == 0 or tokens.shape[1] < 2:
        raise ModelError("batch must contain sequences of at least 2 tokens")
    logits = forward_logits(weights, tokens)
    t = tokens.shape[1]
    pred = ad.narrow(logits, axis=1, start=0, length=t - 1)
    nll = ad.cross_entropy_mean(pred, tokens[:, 1:])
    return ad.scale(nll, -1.0)


def param_counts(weights: Weights) -> dict:
    """Prunable parameter totals plus the grand total.

    MLP counts the gate/up/down projections; attention counts Q, K, V, O.
    Embeddings, norms and the output head only appear in ``total``.
    """
    c = weights.config
    dh = c.d_h
    n_mlp = sum(3 * c.d * m for m in c.m_per_layer)
    n_attn = sum(c.d * dh * (h + 2 * kv + h)
                 for h, kv in zip(c.h_per_layer, c.hkv_per_layer))
    total = sum(t.data.size for t in weights.tensors.values())
    return {"mlp": n_mlp, "attn": n_attn, "total": total}


def flops_estimate(config: ModelConfig, seq_len: int) -> int:
    """Deterministic flop count for one forward pass of one sequence.

    Formula: seq_len*d for the embedding add, 2*seq_len*(weight params) for
    every matmul (QKVO, gate/up/down, output head), plus the attention
    score and context term 2*seq_len^2*(heads*d_h) per layer (equals
    2*seq_len^2*d before any heads are pruned).
    """
    c = config
    dh = c.d_h
    flops = seq_len * c.d + 2 * seq_len * c.d * c.vocab
    for m, h, kv in zip(c.m_per_layer, c.h_per_layer, c.hkv_per_layer):
        matmul_params = 3 * c.d * m + c.d * dh * (h + 2 * kv + h)
        flops += 2 * seq_len * matmul_params + 2 * seq_len * seq_len * h * dh
    return flops
