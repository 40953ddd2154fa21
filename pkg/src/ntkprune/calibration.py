"""KL-driven calibration batch selection.

Each candidate batch prunes the model (reversible masks only), then the
forward KL divergence between the original and pruned next-token
distributions is measured on one fixed held-out batch. The candidate with
the smallest KL wins; ties break toward the lowest seed. Per trial this
costs a single backward pass for scoring plus one forward evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import Batch, Corpus, sample_batch
from .model import Weights, forward_logits


class CalibrationError(Exception):
    pass


@dataclass
class CandidateResult:
    seed: int
    kl: float


@dataclass
class SelectionReport:
    candidates: list             # CandidateResult, in seed order
    chosen_seed: int
    trials: int
    n: int
    seq_len: int
    eval_seed: int
    eval_n: int
    eval_seq_len: int

    @property
    def chosen_kl(self) -> float:
        return next(c.kl for c in self.candidates if c.seed == self.chosen_seed)

    def to_text(self) -> str:
        lines = [
            "# calibration selection report",
            f"trials = {self.trials}",
            f"n = {self.n}",
            f"seq_len = {self.seq_len}",
            f"eval_seed = {self.eval_seed}",
            f"eval_n = {self.eval_n}",
            f"eval_seq_len = {self.eval_seq_len}",
            f"chosen_seed = {self.chosen_seed}",
            f"chosen_kl = {self.chosen_kl!r}",
        ]
        for c in self.candidates:
            lines.append(f"candidate seed={c.seed} kl={c.kl!r}")
        return "\n".join(lines) + "\n"


def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    return x - lse


def kl_divergence(original: Weights, pruned: Weights, eval_set: Batch) -> float:
    """Mean token-level KL(original || pruned) over the evaluation batch.

    Computed in log space; both models must share the vocabulary.
    """
    if original.config.vocab != pruned.config.vocab:
        raise CalibrationError("models disagree on vocabulary size")
    lp = _log_softmax64(forward_logits(original, eval_set.samples).data)
    lq = _log_softmax64(forward_logits(pruned, eval_set.samples).data)
    p = np.exp(lp)
    kl = float((p * (lp - lq)).sum(axis=-1).mean())
    if not np.isfinite(kl):
        raise CalibrationError("non-finite KL divergence")
    return kl


def select_calibration(weights: Weights, corpus: Corpus, trials: int,
                       n: int, seq_len: int, allocation,
                       eval_set: Batch, base_seed: int = 0,
                       prune_fn: Optional[Callable] = None,
                       pool_split: str = "calib") -> SelectionReport:
    """Try ``trials`` seeded candidate batches and keep the KL minimizer.

    ``prune_fn(batch) -> Weights`` produces the masked model for one
    candidate; by default it scores with the batch's saliency, ranks
    globally under ``allocation`` and applies masks (no shrink, no
    alignment: alignment is a deployment concern, not a selection signal).
    Candidate batches are sampled independently per seed, so overlap across
    trials is possible; within a trial windows are distinct.
    """
    if trials < 1:
        raise CalibrationError("need at least one trial")
    if prune_fn is None:
        from .allocator import global_rank_select
        from .pruning import apply_masks
        from .saliency import compute_saliency, group_scores

        def prune_fn(batch: Batch) -> Weights:
            sal = compute_saliency(weights, batch)
            scores = group_scores(sal, weights.config)
            spec = global_rank_select(scores, allocation, weights.config)
            return apply_masks(weights, spec)

    candidates = []
    for t in range(trials):
        seed = base_seed + t
        try:
            batch = sample_batch(corpus, pool_split, seed, n, seq_len)
            pruned = prune_fn(batch)
            kl = kl_divergence(weights, pruned, eval_set)
        except Exception as exc:
            raise CalibrationError(f"trial with seed {seed} failed: {exc}") from exc
        if kl < -1e-7:
            raise CalibrationError(f"negative KL {kl} at seed {seed}")
        candidates.append(CandidateResult(seed=seed, kl=kl))

    chosen = min(candidates, key=lambda c: (c.kl, c.seed))
    return SelectionReport(candidates=candidates, chosen_seed=chosen.seed,
                           trials=trials, n=n, seq_len=seq_len,
                           eval_seed=eval_set.seed, eval_n=eval_set.n,
                           eval_seq_len=eval_set.seq_len)
