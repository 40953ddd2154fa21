"""Sparsity allocation, global unit ranking, and dimension alignment.

A global sparsity target v splits into module rates through the ratio
gamma = v_mlp / v_attn:

    v_attn = v * (n_mlp + n_attn) / (n_attn + gamma * n_mlp)
    v_mlp  = gamma * v_attn

which conserves total pruned parameters exactly. Budgets are
parameter-weighted: "sparsity" always means fraction of prunable
parameters removed. Ranking prunes the globally lowest-scored units until
each module budget is met, with per-layer keep floors (8 MLP units, one KV
group) and ties broken by (layer, unit) ascending. Alignment rounds every
kept MLP count to the nearest multiple of 8, ties up, restoring the
highest-scored pruned units or dropping the lowest-scored kept ones.

``derive_gamma`` measures the analytic default from one forward pass:
the per-unit influence ratio h_kv * s * d_h * sigma_V^2 / sigma_phi^2
(s = mean row-wise sum of squared attention weights), normalized per
parameter by the module size ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Batch
from .model import ModelConfig, Weights, forward_logits
from .saliency import (ATTN_KV_GROUP, MLP_UNIT, UnitScore, kv_group_params,
                       mlp_unit_params)

MLP_KEEP_FLOOR = 8     # alignment floor subsumes "at least one unit"
KV_KEEP_FLOOR = 1
ALIGN_MULTIPLE = 8


class AllocationError(Exception):
    pass


class InfeasiblePlanError(AllocationError):
    pass


@dataclass
class AllocationPlan:
    v: float
    gamma: float
    v_mlp: float
    v_attn: float
    counts: dict            # {"mlp": int, "attn": int}
    kappa: float            # keep fraction, 1 - v


def allocate(v: float, gamma: float, counts: dict) -> AllocationPlan:
    """Split target sparsity v into v_mlp / v_attn via gamma.

    Rejects plans where a module rate leaves (0, 1]: clamping would
    silently change the effective target.
    """
    if not (0.0 <= v < 1.0):
        raise AllocationError(f"target sparsity v={v} outside [0, 1)")
    if gamma <= 0.0:
        raise AllocationError(f"gamma={gamma} must be positive")
    n_mlp, n_attn = counts["mlp"], counts["attn"]
    if n_mlp <= 0 or n_attn <= 0:
        raise AllocationError("parameter counts must be positive")
    v_attn = v * (n_mlp + n_attn) / (n_attn + gamma * n_mlp)
    v_mlp = gamma * v_attn
    if v_mlp > 1.0 or v_attn > 1.0:
        raise InfeasiblePlanError(
            f"gamma={gamma} with v={v} needs v_mlp={v_mlp:.4f}, "
            f"v_attn={v_attn:.4f}; a module rate exceeds 1")
    return AllocationPlan(v=v, gamma=gamma, v_mlp=v_mlp, v_attn=v_attn,
                          counts=dict(counts), kappa=1.0 - v)


@dataclass
class PruneSpec:
    """Resolved keep decision per layer, plus the ranking that produced it.

    ``mlp_scores`` / ``kv_scores`` keep the per-unit scores so alignment
    can restore or drop units in score order; they are not serialized.
    """

    kept_mlp: list                    # per layer: sorted kept unit indices
    kept_kv: list                     # per layer: sorted kept group indices
    target_mlp_counts: list           # kept counts before alignment
    aligned_mlp_counts: Optional[list] = None
    mlp_scores: Optional[list] = None  # per layer: float array [m_layer]
    kv_scores: Optional[list] = None

    @property
    def n_layers(self) -> int:
        return len(self.kept_mlp)

    @property
    def aligned(self) -> bool:
        return self.aligned_mlp_counts is not None

    def to_text(self) -> str:
        lines = ["# prune spec v1 (kept indices per layer)"]
        for i, (mlp, kv) in enumerate(zip(self.kept_mlp, self.kept_kv)):
            lines.append(f"layer {i} mlp_keep " + ",".join(map(str, mlp)))
            lines.append(f"layer {i} kv_keep " + ",".join(map(str, kv)))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "PruneSpec":
        mlp: dict = {}
        kv: dict = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4 or parts[0] != "layer":
                raise AllocationError(f"bad prune-spec line: {line!r}")
            idx = int(parts[1])
            values = [int(x) for x in parts[3].split(",") if x != ""]
            if parts[2] == "mlp_keep":
                mlp[idx] = values
            elif parts[2] == "kv_keep":
                kv[idx] = values
            else:
                raise AllocationError(f"bad prune-spec line: {line!r}")
        if sorted(mlp) != list(range(len(mlp))) or sorted(kv) != sorted(mlp):
            raise AllocationError("prune-spec layers missing or duplicated")
        kept_mlp = [mlp[i] for i in range(len(mlp))]
        kept_kv = [kv[i] for i in range(len(kv))]
        return PruneSpec(kept_mlp=kept_mlp, kept_kv=kept_kv,
                         target_mlp_counts=[len(u) for u in kept_mlp],
                         aligned_mlp_counts=[len(u) for u in kept_mlp])


def _rank_prune(units: list, budget_params: float, floors: list,
                unit_counts: list) -> list:
    """Prune lowest-score units until the parameter budget is met.

    Returns per-layer kept index lists. Units whose layer is already at
    its floor are skipped and the pruning falls to the next-lowest
    eligible unit. Raises when the budget cannot be met under the floors.
    """
    kept = [set(range(n)) for n in unit_counts]
    order = sorted(units, key=lambda u: (u.score, u.layer, u.unit))
    pruned_params = 0.0
    for u in order:
        if pruned_params >= budget_params:
            break
        if len(kept[u.layer]) <= floors[u.layer]:
            continue
        kept[u.layer].discard(u.unit)
        pruned_params += u.params_per_unit
    if pruned_params < budget_params and budget_params > 0:
        max_prunable = sum(max(n - f, 0) for n, f in zip(unit_counts, floors))
        raise InfeasiblePlanError(
            f"budget of {budget_params:.0f} params infeasible under keep "
            f"floors (only {max_prunable} units prunable)")
    return [sorted(s) for s in kept]


def global_rank_select(scores: list, plan: AllocationPlan,
                       config: ModelConfig, local: bool = False) -> PruneSpec:
    """Joint ranking across layers (or per-layer when ``local``).

    MLP units and KV groups are ranked independently against their own
    budgets. Multiplying all scores by a positive constant cannot change
    the outcome, and equal scores resolve by (layer, unit).
    """
    mlp_units = [u for u in scores if u.kind == MLP_UNIT]
    kv_units = [u for u in scores if u.kind == ATTN_KV_GROUP]
    n_layers = config.n_layers
    if len(mlp_units) != sum(config.m_per_layer):
        raise AllocationError("scores do not cover every MLP unit")
    if len(kv_units) != sum(config.hkv_per_layer):
        raise AllocationError("scores do not cover every KV group")

    mlp_counts = list(config.m_per_layer)
    kv_counts = list(config.hkv_per_layer)
    mlp_floors = [min(MLP_KEEP_FLOOR, n) for n in mlp_counts]
    kv_floors = [KV_KEEP_FLOOR] * n_layers

    if local:
        # uniform per-layer ratio: the layer prunes the nearest whole-unit
        # count to its share, so small shares stay small instead of being
        # forced up to one unit
        kept_mlp = []
        kept_kv = []
        for i in range(n_layers):
            layer_mlp = sorted((u for u in mlp_units if u.layer == i),
                               key=lambda u: (u.score, u.unit))
            layer_kv = sorted((u for u in kv_units if u.layer == i),
                              key=lambda u: (u.score, u.unit))
            k_m = min(round(plan.v_mlp * mlp_counts[i]),
                      mlp_counts[i] - mlp_floors[i])
            k_a = min(round(plan.v_attn * kv_counts[i]),
                      kv_counts[i] - kv_floors[i])
            drop_m = {u.unit for u in layer_mlp[:k_m]}
            drop_a = {u.unit for u in layer_kv[:k_a]}
            kept_mlp.append(sorted(set(range(mlp_counts[i])) - drop_m))
            kept_kv.append(sorted(set(range(kv_counts[i])) - drop_a))
    else:
        kept_mlp = _rank_prune(mlp_units, plan.v_mlp * plan.counts["mlp"],
                               mlp_floors, mlp_counts)
        kept_kv = _rank_prune(kv_units, plan.v_attn * plan.counts["attn"],
                              kv_floors, kv_counts)

    mlp_scores = []
    kv_scores = []
    for i in range(n_layers):
        ms = np.zeros(mlp_counts[i])
        for u in mlp_units:
            if u.layer == i:
                ms[u.unit] = u.score
        ks = np.zeros(kv_counts[i])
        for u in kv_units:
            if u.layer == i:
                ks[u.unit] = u.score
        mlp_scores.append(ms)
        kv_scores.append(ks)

    return PruneSpec(kept_mlp=kept_mlp, kept_kv=kept_kv,
                     target_mlp_counts=[len(k) for k in kept_mlp],
                     mlp_scores=mlp_scores, kv_scores=kv_scores)


def _round_to_multiple(n: int, multiple: int) -> int:
    """Nearest multiple, ties rounding up (keep more units)."""
    down = (n // multiple) * multiple
    up = down + multiple
    if n - down < up - n:
        return down
    return up


def align_dims(spec: PruneSpec) -> PruneSpec:
    """Round kept-MLP counts to multiples of 8 per layer.

    Restored units are the highest-scored previously pruned ones; dropped
    units are the lowest-scored kept ones. KV groups are untouched: head
    removal preserves d_h, which the config policy keeps a multiple of 8.
    """
    if spec.mlp_scores is None:
        raise AllocationError("align_dims needs the ranking scores on the spec")
    new_kept = []
    aligned_counts = []
    for i, kept in enumerate(spec.kept_mlp):
        m_layer = len(spec.mlp_scores[i])
        target = _round_to_multiple(len(kept), ALIGN_MULTIPLE)
        target = max(ALIGN_MULTIPLE, min(target, (m_layer // ALIGN_MULTIPLE)
                                         * ALIGN_MULTIPLE))
        scores = spec.mlp_scores[i]
        kept_set = set(kept)
        if target > len(kept):
            pruned = [u for u in range(m_layer) if u not in kept_set]
            # highest score first; ties resolve to the lower index
            pruned.sort(key=lambda u: (-scores[u], u))
            for u in pruned[:target - len(kept)]:
                kept_set.add(u)
        elif target < len(kept):
            by_score = sorted(kept, key=lambda u: (scores[u], u))
            for u in by_score[:len(kept) - target]:
                kept_set.discard(u)
        new_kept.append(sorted(kept_set))
        aligned_counts.append(len(kept_set))
    return PruneSpec(kept_mlp=new_kept, kept_kv=[list(k) for k in spec.kept_kv],
                     target_mlp_counts=list(spec.target_mlp_counts),
                     aligned_mlp_counts=aligned_counts,
                     mlp_scores=spec.mlp_scores, kv_scores=spec.kv_scores)


@dataclass
class GammaEstimate:
    sigma_v_sq: float
    sigma_phi_sq: float
    s: float                  # mean over rows/heads of sum_s alpha_ts^2
    h_kv: int
    d_h: int
    influence_ratio: float    # h_kv * s * d_h * sigma_V^2 / sigma_phi^2
    gamma: float              # influence ratio normalized per parameter

    def to_text(self) -> str:
        lines = [
            "# analytic gamma estimate",
            f"sigma_v_sq = {self.sigma_v_sq!r}",
            f"sigma_phi_sq = {self.sigma_phi_sq!r}",
            f"s = {self.s!r}",
            f"h_kv = {self.h_kv}",
            f"d_h = {self.d_h}",
            f"influence_ratio = {self.influence_ratio!r}",
            f"gamma = {self.gamma!r}",
        ]
        return "\n".join(lines) + "\n"


def attention_row_concentration(attn_rows: list) -> float:
    """Mean over layers/heads/rows of sum_s alpha_ts^2.

    1/L for rows uniform over L keys, 1.0 for one-hot rows.
    """
    row_sq = [(a.astype(np.float64) ** 2).sum(axis=-1).mean()
              for a in attn_rows]
    return float(np.mean(row_sq))


def gamma_from_stats(sigma_v_sq: float, sigma_phi_sq: float, s: float,
                     h_kv: int, d_h: int, counts: dict) -> GammaEstimate:
    """Per-parameter pruning ratio from measured activation statistics.

    The per-unit influence ratio h_kv * s * d_h * sigma_V^2 / sigma_phi^2
    is normalized by parameters per module: gamma =
    (I_attn / n_attn) / (I_mlp / n_mlp).
    """
    if sigma_phi_sq < 1e-12:
        raise AllocationError("degenerate MLP activation variance")
    influence = h_kv * s * d_h * sigma_v_sq / sigma_phi_sq
    gamma = influence * counts["mlp"] / counts["attn"]
    return GammaEstimate(sigma_v_sq=sigma_v_sq, sigma_phi_sq=sigma_phi_sq,
                         s=s, h_kv=h_kv, d_h=d_h,
                         influence_ratio=influence, gamma=gamma)


def derive_gamma(weights: Weights, config: ModelConfig,
                 batch: Batch) -> GammaEstimate:
    """Measure the analytic gamma from one instrumented forward pass.

    Collects the variance of per-head V activations, the variance of the
    gated MLP activations and the attention row concentration s, then
    normalizes per parameter via the module totals.
    """
    trace: dict = {}
    forward_logits(weights, batch.samples, trace=trace)
    v_entries = np.concatenate([v.astype(np.float64).ravel()
                                for v in trace["v_act"]])
    phi_entries = np.concatenate([p.astype(np.float64).ravel()
                                  for p in trace["mlp_act"]])
    from .model import param_counts
    return gamma_from_stats(
        sigma_v_sq=float(v_entries.var()),
        sigma_phi_sq=float(phi_entries.var()),
        s=attention_row_concentration(trace["attn_rows"]),
        h_kv=config.h_kv, d_h=config.d_h, counts=param_counts(weights))
