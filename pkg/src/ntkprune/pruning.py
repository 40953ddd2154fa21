"""Executing a PruneSpec and orchestrating the end-to-end pruning pipeline.

A spec can be realized two ways with identical forward behavior:

  * apply_masks: zero the pruned columns/rows/slices in place-shaped
    copies. Cheap and reversible; used for calibration trials and the
    kernel stability check.
  * shrink_model: copy only the kept units into genuinely smaller tensors
    (kept order preserved so checkpoints diff cleanly across sweeps).

Both keep dependencies consistent: an MLP unit always disappears from the
gate, up and down projections together, and a KV group takes its query
heads and output slices with it.

``prune_pipeline`` runs the whole chain: calibration selection (unless
disabled by the mode), scoring, grouping, allocation, ranking, alignment,
structural shrink, and report generation. Ablation modes each swap exactly
one component: magnitude scoring, per-layer (local) ranking, gamma forced
to 1, or an unselected calibration batch.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .allocator import (AllocationPlan, GammaEstimate, PruneSpec, align_dims,
                        allocate, derive_gamma, global_rank_select)
from .autodiff import Tensor
from .calibration import SelectionReport, select_calibration
from .data import Batch, Corpus, sample_batch
from .model import (ModelConfig, Weights, flops_estimate, kv_group_map,
                    param_counts)
from .saliency import (NtkReport, compute_saliency, group_scores,
                       magnitude_scores, ntk_stability_check)

MODES = ("nirvana", "magnitude", "local", "gamma-off", "random-calib")


class PruneError(Exception):
    pass


class PipelineError(PruneError):
    pass


def _pruned_units(spec: PruneSpec, config: ModelConfig, layer: int):
    m = config.m_per_layer[layer]
    hkv = config.hkv_per_layer[layer]
    mlp_pruned = sorted(set(range(m)) - set(spec.kept_mlp[layer]))
    kv_pruned = sorted(set(range(hkv)) - set(spec.kept_kv[layer]))
    return mlp_pruned, kv_pruned


def _check_spec(spec: PruneSpec, config: ModelConfig) -> None:
    if spec.n_layers != config.n_layers:
        raise PruneError(f"spec has {spec.n_layers} layers, model has "
                         f"{config.n_layers}")
    for i in range(config.n_layers):
        m, hkv = config.m_per_layer[i], config.hkv_per_layer[i]
        if spec.kept_mlp[i] and (min(spec.kept_mlp[i]) < 0
                                 or max(spec.kept_mlp[i]) >= m):
            raise PruneError(f"layer {i} keeps an MLP unit outside [0, {m})")
        if spec.kept_kv[i] and (min(spec.kept_kv[i]) < 0
                                or max(spec.kept_kv[i]) >= hkv):
            raise PruneError(f"layer {i} keeps a KV group outside [0, {hkv})")


def build_masks(spec: PruneSpec, config: ModelConfig) -> dict:
    """Binary {0,1} float masks per prunable tensor, dependency-consistent."""
    _check_spec(spec, config)
    dh = config.d_h
    masks = {}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        m = config.m_per_layer[i]
        h, hkv = config.h_per_layer[i], config.hkv_per_layer[i]
        mlp_pruned, kv_pruned = _pruned_units(spec, config, i)

        gate = np.ones((config.d, m), dtype=np.float32)
        gate[:, mlp_pruned] = 0.0
        down = np.ones((m, config.d), dtype=np.float32)
        down[mlp_pruned, :] = 0.0
        masks[p + "w_gate"] = gate
        masks[p + "w_up"] = gate.copy()
        masks[p + "w_down"] = down

        gmap = kv_group_map(h, hkv)
        pruned_heads = [a for a in range(h) if gmap[a] in kv_pruned]
        wq = np.ones((config.d, h * dh), dtype=np.float32)
        wo = np.ones((h * dh, config.d), dtype=np.float32)
        for a in pruned_heads:
            wq[:, a * dh:(a + 1) * dh] = 0.0
            wo[a * dh:(a + 1) * dh, :] = 0.0
        wk = np.ones((config.d, hkv * dh), dtype=np.float32)
        for g in kv_pruned:
            wk[:, g * dh:(g + 1) * dh] = 0.0
        masks[p + "wq"] = wq
        masks[p + "wo"] = wo
        masks[p + "wk"] = wk
        masks[p + "wv"] = wk.copy()
    return masks


def prune_sets(spec: PruneSpec, config: ModelConfig) -> dict:
    """Boolean pruned-coordinate masks (True = pruned) per prunable tensor."""
    return {name: mask == 0.0 for name, mask in build_masks(spec, config).items()}


def apply_masks(weights: Weights, spec: PruneSpec) -> Weights:
    """Masked copy with unchanged shapes; forward-equivalent to the shrink."""
    masks = build_masks(spec, weights.config)
    tensors = {}
    for name, t in weights.tensors.items():
        if name in masks:
            tensors[name] = Tensor(t.data * masks[name],
                                   requires_grad=t.requires_grad)
        else:
            tensors[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
    return Weights(weights.config, tensors)


def shrink_model(weights: Weights, spec: PruneSpec):
    """Structurally smaller (Weights, ModelConfig) keeping only spec'd units.

    Kept columns/rows are copied contiguously in their original relative
    order. Requires an aligned spec; refuses to empty a layer below the
    keep floors.
    """
    config = weights.config
    _check_spec(spec, config)
    if not spec.aligned:
        raise PruneError("shrink_model requires an aligned spec "
                         "(run align_dims first)")
    dh = config.d_h
    gsize = config.group_size
    new_m, new_h, new_hkv = [], [], []
    tensors = {}
    for name in ("tok_embed", "pos_embed", "final_norm", "out_head"):
        t = weights[name]
        tensors[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad)

    for i in range(config.n_layers):
        p = f"layers.{i}."
        kept_units = list(spec.kept_mlp[i])
        kept_groups = list(spec.kept_kv[i])
        if len(kept_units) < 8 or len(kept_units) % 8 != 0:
            raise PruneError(f"layer {i} would keep {len(kept_units)} MLP "
                             "units; need a positive multiple of 8")
        if len(kept_groups) < 1:
            raise PruneError(f"layer {i} would keep no KV groups")
        h, hkv = config.h_per_layer[i], config.hkv_per_layer[i]
        gmap = kv_group_map(h, hkv)
        kept_heads = [a for a in range(h) if gmap[a] in set(kept_groups)]

        for fam in ("attn_norm", "mlp_norm"):
            t = weights[p + fam]
            tensors[p + fam] = Tensor(t.data.copy(), requires_grad=True)

        w = weights[p + "w_gate"].data
        tensors[p + "w_gate"] = Tensor(w[:, kept_units].copy(), requires_grad=True)
        w = weights[p + "w_up"].data
        tensors[p + "w_up"] = Tensor(w[:, kept_units].copy(), requires_grad=True)
        w = weights[p + "w_down"].data
        tensors[p + "w_down"] = Tensor(w[kept_units, :].copy(), requires_grad=True)

        w = weights[p + "wq"].data.reshape(config.d, h, dh)
        tensors[p + "wq"] = Tensor(
            w[:, kept_heads, :].reshape(config.d, len(kept_heads) * dh).copy(),
            requires_grad=True)
        w = weights[p + "wo"].data.reshape(h, dh, config.d)
        tensors[p + "wo"] = Tensor(
            w[kept_heads].reshape(len(kept_heads) * dh, config.d).copy(),
            requires_grad=True)
        w = weights[p + "wk"].data.reshape(config.d, hkv, dh)
        tensors[p + "wk"] = Tensor(
            w[:, kept_groups, :].reshape(config.d, len(kept_groups) * dh).copy(),
            requires_grad=True)
        w = weights[p + "wv"].data.reshape(config.d, hkv, dh)
        tensors[p + "wv"] = Tensor(
            w[:, kept_groups, :].reshape(config.d, len(kept_groups) * dh).copy(),
            requires_grad=True)

        new_m.append(len(kept_units))
        new_hkv.append(len(kept_groups))
        new_h.append(len(kept_groups) * gsize)

    new_config = ModelConfig(
        d=config.d, m=config.m, h=config.h, h_kv=config.h_kv,
        n_layers=config.n_layers, L=config.L, vocab=config.vocab,
        m_per_layer=new_m, h_per_layer=new_h, hkv_per_layer=new_hkv)
    return Weights(new_config, tensors), new_config


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    v: float
    gamma: Union[float, str] = "analytic"   # explicit ratio or "analytic"
    mode: str = "nirvana"
    calib_trials: int = 50
    calib_n: int = 32
    calib_seq_len: int = 128
    seed: int = 0
    eval_n: int = 8
    eval_seq_len: int = 128
    calib_seed: Optional[int] = None  # externally selected seed skips selection

    def __post_init__(self):
        if self.mode not in MODES:
            raise PipelineError(f"unknown mode '{self.mode}' (one of {MODES})")
        if isinstance(self.gamma, str) and self.gamma != "analytic":
            raise PipelineError("gamma must be a number or 'analytic'")

    def to_dict(self) -> dict:
        return {"v": self.v, "gamma": self.gamma, "mode": self.mode,
                "calib_trials": self.calib_trials, "calib_n": self.calib_n,
                "calib_seq_len": self.calib_seq_len, "seed": self.seed,
                "eval_n": self.eval_n, "eval_seq_len": self.eval_seq_len,
                "calib_seed": self.calib_seed}


@dataclass
class SparsityReport:
    target_v: float
    achieved_total: float
    achieved_mlp: float
    achieved_attn: float
    counts_before: dict
    counts_after: dict
    flops_before: int
    flops_after: int
    mlp_dims: list
    kv_groups: list

    def to_text(self) -> str:
        lines = [
            "# sparsity report",
            f"target_v = {self.target_v!r}",
            f"achieved_total = {self.achieved_total!r}",
            f"achieved_mlp = {self.achieved_mlp!r}",
            f"achieved_attn = {self.achieved_attn!r}",
            f"prunable_before = {self.counts_before['mlp'] + self.counts_before['attn']}",
            f"prunable_after = {self.counts_after['mlp'] + self.counts_after['attn']}",
            f"total_before = {self.counts_before['total']}",
            f"total_after = {self.counts_after['total']}",
            f"flops_before = {self.flops_before}",
            f"flops_after = {self.flops_after}",
            f"mlp_dims = {','.join(map(str, self.mlp_dims))}",
            f"kv_groups = {','.join(map(str, self.kv_groups))}",
        ]
        return "\n".join(lines) + "\n"


@dataclass
class PipelineResult:
    weights: Weights
    config: ModelConfig
    spec: PruneSpec
    plan: AllocationPlan
    sparsity: SparsityReport
    ntk_report: NtkReport
    selection_report: Optional[SelectionReport]
    gamma_estimate: Optional[GammaEstimate]
    chosen_seed: int


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(f"stage '{name}' failed: {exc}") from exc


def prune_pipeline(pcfg: PipelineConfig, corpus: Corpus,
                   weights: Weights) -> PipelineResult:
    """Select calibration data, score, allocate, rank, align and shrink."""
    config = weights.config
    counts = param_counts(weights)
    use_selection = (pcfg.mode not in ("random-calib", "magnitude")
                     and pcfg.calib_seed is None)
    use_magnitude = pcfg.mode == "magnitude"
    local = pcfg.mode == "local"

    with _stage("calibration sampling"):
        base_batch = sample_batch(corpus, "calib", pcfg.seed,
                                  pcfg.calib_n, pcfg.calib_seq_len)
        eval_batch = sample_batch(corpus, "eval", pcfg.seed,
                                  pcfg.eval_n, pcfg.eval_seq_len)

    gamma_estimate: Optional[GammaEstimate] = None
    with _stage("gamma resolution"):
        if pcfg.mode == "gamma-off":
            gamma = 1.0
        elif pcfg.gamma == "analytic":
            gamma_estimate = derive_gamma(weights, config, base_batch)
            gamma = gamma_estimate.gamma
        else:
            gamma = float(pcfg.gamma)

    with _stage("allocation"):
        plan = allocate(pcfg.v, gamma, counts)

    def score_batch(batch: Batch) -> list:
        if use_magnitude:
            return magnitude_scores(weights)
        sal = compute_saliency(weights, batch)
        return group_scores(sal, config)

    def trial_prune(batch: Batch) -> Weights:
        spec = global_rank_select(score_batch(batch), plan, config, local=local)
        return apply_masks(weights, spec)

    selection_report: Optional[SelectionReport] = None
    chosen_seed = pcfg.calib_seed if pcfg.calib_seed is not None else pcfg.seed
    if use_selection:
        with _stage("calibration selection"):
            # candidate pool starts at seed+1 so the unselected baseline
            # batch (seed) is never one of the candidates
            selection_report = select_calibration(
                weights, corpus, pcfg.calib_trials, pcfg.calib_n,
                pcfg.calib_seq_len, plan, eval_batch,
                base_seed=pcfg.seed + 1, prune_fn=trial_prune)
            chosen_seed = selection_report.chosen_seed

    with _stage("scoring"):
        calib_batch = sample_batch(corpus, "calib", chosen_seed,
                                   pcfg.calib_n, pcfg.calib_seq_len)
        scores = score_batch(calib_batch)

    with _stage("ranking"):
        spec = global_rank_select(scores, plan, config, local=local)

    with _stage("alignment"):
        spec = align_dims(spec)

    with _stage("stability check"):
        masked = apply_masks(weights, spec)
        ntk_report = ntk_stability_check(
            weights, masked, prune_sets(spec, config), calib_batch)

    with _stage("shrink"):
        shrunk, new_config = shrink_model(weights, spec)

    with _stage("reporting"):
        after = param_counts(shrunk)
        prunable_before = counts["mlp"] + counts["attn"]
        prunable_after = after["mlp"] + after["attn"]
        sparsity = SparsityReport(
            target_v=pcfg.v,
            achieved_total=1.0 - prunable_after / prunable_before,
            achieved_mlp=1.0 - after["mlp"] / counts["mlp"],
            achieved_attn=1.0 - after["attn"] / counts["attn"],
            counts_before=counts, counts_after=after,
            flops_before=flops_estimate(config, config.L),
            flops_after=flops_estimate(new_config, new_config.L),
            mlp_dims=list(new_config.m_per_layer),
            kv_groups=list(new_config.hkv_per_layer))

    return PipelineResult(weights=shrunk, config=new_config, spec=spec,
                          plan=plan, sparsity=sparsity, ntk_report=ntk_report,
                          selection_report=selection_report,
                          gamma_estimate=gamma_estimate,
                          chosen_seed=chosen_seed)
