"""First-order saliency, unit grouping, and the SignGD kernel stability check.

Per-weight saliency is |df/dW_ij * W_ij| with f the mean next-token
log-likelihood on a calibration batch: the first-order estimate of how much
the output moves if that weight is zeroed. The gradient is taken once for
the whole batch (a single backward), then multiplied by the weights.

Unit grouping sums member-weight saliencies: an MLP hidden unit u owns
column u of the gate and up projections and row u of the down projection;
an attention KV group owns its K and V head slices plus every query head
and output slice mapped to it. Embeddings, norms and the output head are
never scored.

The SignGD kernel diagonal is <grad f, sign(grad f)> = ||grad f||_1 over
the scored families. Pruning low-saliency units keeps this kernel within
sqrt(2*dm) * (eps/c + G) of the original, where eps is the pruned saliency
mass, c the smallest pruned |W|, G the gradient norm and dm the scored
parameter count; ``ntk_stability_check`` measures every quantity and tests
the inequality rather than assuming it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import Batch
from .model import (ATTN_FAMILIES, MLP_FAMILIES, ModelConfig, Weights,
                    kv_group_map, scalar_output_f)

MLP_UNIT = "mlp-unit"
ATTN_KV_GROUP = "attn-kv-group"


class SaliencyError(Exception):
    pass


@dataclass
class SaliencyField:
    """Per-weight |grad * weight| buffers mirroring the prunable tensors."""

    scores: dict                 # tensor name -> float32 array, all >= 0
    f_value: float
    batch_seed: int
    batch_n: int
    batch_seq_len: int


@dataclass
class UnitScore:
    kind: str        # MLP_UNIT or ATTN_KV_GROUP
    layer: int
    unit: int        # hidden-unit index or KV-group index
    score: float
    params_per_unit: int


@dataclass
class NtkReport:
    theta_before: float
    theta_after: float
    epsilon: float
    c: Optional[float]           # None when every pruned weight is exactly 0
    grad_norm: float             # l2 norm of the original gradient (G)
    dm: int                      # scored parameter count
    bound: float
    holds: bool
    slack_ratio: float           # |delta theta| / bound (diagnostic)
    n_pruned: int
    n_zero_pruned: int           # pruned coords skipped from the c minimum

    def to_text(self) -> str:
        lines = [
            "# signgd kernel stability report",
            f"theta_before = {self.theta_before!r}",
            f"theta_after = {self.theta_after!r}",
            f"theta_delta = {abs(self.theta_after - self.theta_before)!r}",
            f"epsilon = {self.epsilon!r}",
            f"c = {self.c!r}",
            f"grad_norm = {self.grad_norm!r}",
            f"dm = {self.dm}",
            f"bound = {self.bound!r}",
            f"holds = {self.holds}",
            f"slack_ratio = {self.slack_ratio!r}",
            f"n_pruned = {self.n_pruned}",
            f"n_zero_pruned = {self.n_zero_pruned}",
        ]
        return "\n".join(lines) + "\n"


def _gradients(weights: Weights, batch: Batch) -> tuple:
    """One forward + one backward of f; returns (f value, grads by name)."""
    weights.zero_grads()
    f = scalar_output_f(weights, batch)
    ad.backward(f)
    grads = {}
    for name in weights.prunable_names():
        g = weights[name].grad
        if g is None:
            g = np.zeros_like(weights[name].data)
        if not np.all(np.isfinite(g)):
            raise SaliencyError(f"non-finite gradient for '{name}'")
        grads[name] = g
    return float(f.item()), grads


def compute_saliency(weights: Weights, batch: Batch) -> SaliencyField:
    """|batch-averaged gradient * weight| for every prunable tensor."""
    f_value, grads = _gradients(weights, batch)
    scores = {name: np.abs(grads[name] * weights[name].data)
              for name in grads}
    return SaliencyField(scores=scores, f_value=f_value,
                         batch_seed=batch.seed, batch_n=batch.n,
                         batch_seq_len=batch.seq_len)


def magnitude_field(weights: Weights) -> dict:
    """|W| per prunable tensor; the data-free ablation baseline."""
    return {name: np.abs(weights[name].data)
            for name in weights.prunable_names()}


def mlp_unit_params(config: ModelConfig) -> int:
    return 3 * config.d


def kv_group_params(config: ModelConfig) -> int:
    # Q and O slices for every query head in the group, plus one K and one
    # V head slice
    return config.d * config.d_h * (2 * config.group_size + 2)


def group_field(fields: dict, config: ModelConfig) -> list:
    """Aggregate a per-weight score field into UnitScores.

    Every entry of the seven prunable families lands in exactly one unit;
    sums accumulate in float64.
    """
    out = []
    d, dh = config.d, config.d_h
    for i in range(config.n_layers):
        p = f"layers.{i}."
        m = config.m_per_layer[i]
        h, hkv = config.h_per_layer[i], config.hkv_per_layer[i]

        gate = fields[p + "w_gate"].astype(np.float64)
        up = fields[p + "w_up"].astype(np.float64)
        down = fields[p + "w_down"].astype(np.float64)
        unit_scores = gate.sum(axis=0) + up.sum(axis=0) + down.sum(axis=1)
        mlp_pp = mlp_unit_params(config)
        for u in range(m):
            out.append(UnitScore(MLP_UNIT, i, u, float(unit_scores[u]), mlp_pp))

        per_q = fields[p + "wq"].astype(np.float64).reshape(d, h, dh).sum(axis=(0, 2))
        per_o = fields[p + "wo"].astype(np.float64).reshape(h, dh, d).sum(axis=(1, 2))
        per_k = fields[p + "wk"].astype(np.float64).reshape(d, hkv, dh).sum(axis=(0, 2))
        per_v = fields[p + "wv"].astype(np.float64).reshape(d, hkv, dh).sum(axis=(0, 2))
        gmap = kv_group_map(h, hkv)
        kv_pp = kv_group_params(config)
        for g in range(hkv):
            heads = np.nonzero(gmap == g)[0]
            score = (per_q[heads].sum() + per_o[heads].sum()
                     + per_k[g] + per_v[g])
            out.append(UnitScore(ATTN_KV_GROUP, i, g, float(score), kv_pp))
    return out


def group_scores(saliency: SaliencyField, config: ModelConfig) -> list:
    """UnitScores from a saliency field (shape-checked against the config)."""
    for i in range(config.n_layers):
        p = f"layers.{i}."
        want = (config.d, config.m_per_layer[i])
        got = saliency.scores[p + "w_gate"].shape
        if tuple(got) != want:
            raise SaliencyError(f"saliency shape {got} does not match config {want}")
    return group_field(saliency.scores, config)


def magnitude_scores(weights: Weights) -> list:
    """UnitScores where the per-weight score is plain |W| (no gradients)."""
    return group_field(magnitude_field(weights), weights.config)


def ntk_diag(weights: Weights, batch: Batch) -> float:
    """SignGD kernel diagonal: the l1 norm of grad f over scored families."""
    _, grads = _gradients(weights, batch)
    return float(sum(np.abs(g.astype(np.float64)).sum() for g in grads.values()))


def ntk_stability_check(weights: Weights, pruned_weights: Weights,
                        prune_set: dict, batch: Batch) -> NtkReport:
    """Measure both sides of the kernel stability bound on one batch.

    ``prune_set`` maps prunable tensor names to boolean masks (True =
    pruned); ``pruned_weights`` must be the original weights with exactly
    those coordinates zeroed. The report records the measured kernel gap
    and the sqrt(2*dm) * (eps/c + G) bound, plus the slack between them.
    """
    f_before, grads = _gradients(weights, batch)
    theta_before = float(sum(np.abs(g.astype(np.float64)).sum()
                             for g in grads.values()))
    theta_after = ntk_diag(pruned_weights, batch)

    epsilon = 0.0
    c: Optional[float] = None
    n_pruned = 0
    n_zero = 0
    g_sq = 0.0
    dm = 0
    for name in weights.prunable_names():
        g = grads[name].astype(np.float64)
        w = weights[name].data.astype(np.float64)
        g_sq += float((g * g).sum())
        dm += w.size
        mask = prune_set.get(name)
        if mask is None:
            continue
        if mask.shape != w.shape:
            raise SaliencyError(f"prune mask shape mismatch for '{name}'")
        if not np.array_equal(pruned_weights[name].data[mask],
                              np.zeros(int(mask.sum()), dtype=np.float32)):
            raise SaliencyError(f"pruned weights not zero on prune set '{name}'")
        if mask.any():
            wp = w[mask]
            gp = g[mask]
            epsilon += float(np.abs(gp * wp).sum())
            n_pruned += int(mask.sum())
            nz = np.abs(wp[wp != 0.0])
            n_zero += int((wp == 0.0).sum())
            if nz.size:
                c_here = float(nz.min())
                c = c_here if c is None else min(c, c_here)

    grad_norm = math.sqrt(g_sq)
    eps_term = (epsilon / c) if (c is not None and c > 0.0) else 0.0
    bound = math.sqrt(2.0 * dm) * (eps_term + grad_norm)
    delta = abs(theta_after - theta_before)
    return NtkReport(
        theta_before=theta_before, theta_after=theta_after,
        epsilon=epsilon, c=c, grad_norm=grad_norm, dm=dm, bound=bound,
        holds=bool(delta <= bound),
        slack_ratio=float(delta / bound) if bound > 0 else 0.0,
        n_pruned=n_pruned, n_zero_pruned=n_zero)
