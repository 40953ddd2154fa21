"""Adam training, recovery fine-tuning, perplexity evaluation, benchmarks.

The optimizer is Adam with decoupled weight decay on matrix parameters
(norm gains are not decayed) and a cosine learning-rate decay to zero over
the step budget. Training maximizes mean next-token log-likelihood, i.e.
minimizes the model's scalar output f negated.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Corpus, eval_windows, sample_batch
from .model import (ModelConfig, Weights, flops_estimate, forward_logits,
                    param_counts, scalar_output_f)

log = logging.getLogger(__name__)

SNAPSHOT_EVERY = 100  # steps between divergence-recovery snapshots


class TrainError(Exception):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay}


class Adam:
    """Adam with decoupled weight decay and cosine decay to zero."""

    def __init__(self, weights: Weights, opt: OptimizerConfig,
                 total_steps: int):
        self.weights = weights
        self.opt = opt
        self.total_steps = max(total_steps, 1)
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in weights.tensors.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in weights.tensors.items()}

    def lr_at(self, step: int) -> float:
        return self.opt.lr * 0.5 * (1.0 + math.cos(math.pi * step
                                                   / self.total_steps))

    def step(self) -> None:
        o = self.opt
        lr = self.lr_at(self.t)
        self.t += 1
        b1c = 1.0 - o.beta1 ** self.t
        b2c = 1.0 - o.beta2 ** self.t
        for name, tensor in self.weights.tensors.items():
            g = tensor.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - o.beta1) * (g - m)
            v += (1.0 - o.beta2) * (g * g - v)
            update = (m / b1c) / (np.sqrt(v / b2c) + o.eps)
            if tensor.data.ndim >= 2 and o.weight_decay > 0.0:
                update = update + o.weight_decay * tensor.data
            tensor.data -= (lr * update).astype(np.float32)


@dataclass
class TrainStats:
    steps_run: int
    losses: list = field(default_factory=list)  # (step, loss) pairs
    diverged: bool = False

    @property
    def final_loss(self) -> float:
        return self.losses[-1][1] if self.losses else float("nan")


def train(weights: Weights, corpus: Corpus, steps: int,
          opt: OptimizerConfig | None = None, batch_n: int = 8,
          seq_len: int | None = None, seed: int = 0, split: str = "train",
          log_every: int = 100):
    """Run Adam for ``steps`` on seeded batches; returns (weights, stats).

    On divergence (non-finite loss) training aborts and the last snapshot
    (taken every 100 steps) is returned with ``stats.diverged`` set.
    """
    if corpus.split_len(split) <= 0:
        raise TrainError(f"corpus split '{split}' is empty")
    if seq_len is None:
        seq_len = min(128, weights.config.L)
    opt = opt or OptimizerConfig()
    optimizer = Adam(weights, opt, steps)
    stats = TrainStats(steps_run=0)
    snapshot = weights.clone()
    for step in range(steps):
        batch = sample_batch(corpus, split, seed + step, batch_n, seq_len)
        weights.zero_grads()
        try:
            f = scalar_output_f(weights, batch)
            loss = -float(f.item())
            neg_f = ad.scale(f, -1.0)
            ad.backward(neg_f)
        except ad.NonFiniteError:
            loss = float("nan")
        if not math.isfinite(loss):
            log.error("divergence at step %d; restoring last snapshot", step)
            stats.diverged = True
            return snapshot, stats
        optimizer.step()
        stats.steps_run = step + 1
        if step % log_every == 0 or step == steps - 1:
            stats.losses.append((step, loss))
            log.info("step %d loss %.4f lr %.2e", step, loss,
                     optimizer.lr_at(step))
        if (step + 1) % SNAPSHOT_EVERY == 0:
            snapshot = weights.clone()
    return weights, stats


@dataclass
class FinetuneStats:
    train: TrainStats
    ppl_before: float
    ppl_after: float


def finetune(weights: Weights, corpus: Corpus, steps: int,
             opt: OptimizerConfig | None = None, batch_n: int = 8,
             seq_len: int | None = None, seed: int = 0,
             eval_split: str = "eval"):
    """Full-parameter recovery tuning; returns (weights, FinetuneStats)."""
    if seq_len is None:
        seq_len = min(128, weights.config.L)
    ppl_before = eval_ppl(weights, corpus, eval_split, seq_len=seq_len)
    weights, tstats = train(weights, corpus, steps, opt=opt, batch_n=batch_n,
                            seq_len=seq_len, seed=seed)
    ppl_after = eval_ppl(weights, corpus, eval_split, seq_len=seq_len)
    return weights, FinetuneStats(train=tstats, ppl_before=ppl_before,
                                  ppl_after=ppl_after)


def mean_nll(weights: Weights, tokens: np.ndarray, chunk_rows: int = 16) -> float:
    """Mean next-token negative log-likelihood over [rows, seq] windows."""
    tokens = np.asarray(tokens)
    total = 0.0
    count = 0
    for i in range(0, tokens.shape[0], chunk_rows):
        chunk = tokens[i:i + chunk_rows]
        logits = forward_logits(weights, chunk).data.astype(np.float64)
        pred = logits[:, :-1, :]
        targets = chunk[:, 1:]
        m = pred.max(axis=-1, keepdims=True)
        lse = m[..., 0] + np.log(np.exp(pred - m).sum(axis=-1))
        picked = np.take_along_axis(pred, targets[..., None].astype(np.int64),
                                    axis=-1)[..., 0]
        total += float((lse - picked).sum())
        count += targets.size
    return total / count


def eval_ppl(weights: Weights, corpus: Corpus, split: str = "eval",
             seq_len: int = 128, limit: int | None = None) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of a split."""
    windows = eval_windows(corpus, split, seq_len, limit=limit)
    return math.exp(mean_nll(weights, windows))


@dataclass
class BenchReport:
    latency_s: float          # median wall-clock seconds per batch
    throughput_tok_s: float
    batch_size: int
    seq_len: int
    rounds: int
    params_total: int
    flops_per_seq: int

    def to_text(self) -> str:
        lines = [
            "# inference micro-benchmark",
            f"latency_s = {self.latency_s!r}",
            f"throughput_tok_s = {self.throughput_tok_s!r}",
            f"batch_size = {self.batch_size}",
            f"seq_len = {self.seq_len}",
            f"rounds = {self.rounds}",
            f"params_total = {self.params_total}",
            f"flops_per_seq = {self.flops_per_seq}",
        ]
        return "\n".join(lines) + "\n"


def bench(weights: Weights, batch_size: int = 8, rounds: int = 5,
          seq_len: int = 128, seed: int = 0) -> BenchReport:
    """Median forward wall-clock over ``rounds``; the first round warms up."""
    if rounds < 3:
        raise TrainError("bench needs at least 3 rounds")
    c = weights.config
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, c.vocab, size=(batch_size, seq_len),
                          dtype=np.int64)
    times = []
    for _ in range(rounds):
        t0 = time.perf_counter()
        forward_logits(weights, tokens)
        times.append(time.perf_counter() - t0)
    kept = times[1:]
    latency = float(np.median(kept))
    counts = param_counts(weights)
    return BenchReport(latency_s=latency,
                       throughput_tok_s=batch_size * seq_len / latency,
                       batch_size=batch_size, seq_len=seq_len, rounds=rounds,
                       params_total=counts["total"],
                       flops_per_seq=flops_estimate(c, seq_len))
