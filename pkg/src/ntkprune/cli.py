"""Command-line surface tying the pipeline together.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every command that
takes --out writes its resolved run configuration to run_config.json in
the output directory, and numeric results are mirrored into key/value
report files there. The prune command nests its outputs one level deeper,
in a directory named by the hash of the resolved configuration, so sweeps
never overwrite each other.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .allocator import derive_gamma
from .calibration import kl_divergence, select_calibration
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_corpus, sample_batch
from .model import ModelConfig, init_weights, param_counts
from .pruning import (MODES, PipelineConfig, apply_masks, prune_pipeline,
                      prune_sets)
from .saliency import ntk_stability_check
from .train import OptimizerConfig, bench, eval_ppl, finetune, train


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage problems."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parser() -> CliParser:
    p = CliParser(prog="ntkprune",
                  description="structured pruning workbench for small "
                              "SwiGLU/GQA transformers")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=CliParser)

    def add_model_flags(sp):
        sp.add_argument("--d", type=int, default=64)
        sp.add_argument("--m", type=int, default=256)
        sp.add_argument("--heads", type=int, default=8)
        sp.add_argument("--kv-heads", type=int, default=4)
        sp.add_argument("--layers", type=int, default=4)
        sp.add_argument("--max-seq", type=int, default=128)

    def add_opt_flags(sp, steps_default):
        sp.add_argument("--steps", type=int, default=steps_default)
        sp.add_argument("--lr", type=float, default=3e-4)
        sp.add_argument("--beta1", type=float, default=0.9)
        sp.add_argument("--beta2", type=float, default=0.999)
        sp.add_argument("--eps", type=float, default=1e-8)
        sp.add_argument("--weight-decay", type=float, default=0.01)
        sp.add_argument("--batch-n", type=int, default=8)
        sp.add_argument("--seq-len", type=int, default=128)

    sp = sub.add_parser("train", help="pretrain a toy model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    add_model_flags(sp)
    add_opt_flags(sp, 2000)

    sp = sub.add_parser("prune", help="run the full pruning pipeline")
    sp.add_argument("--in", dest="ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sparsity", type=float, required=True)
    sp.add_argument("--gamma", default="analytic",
                    help="a positive ratio or 'analytic'")
    sp.add_argument("--mode", choices=MODES, default="nirvana")
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--calib-n", type=int, default=32)
    sp.add_argument("--calib-seq-len", type=int, default=128)
    sp.add_argument("--eval-n", type=int, default=8)
    sp.add_argument("--eval-seq-len", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--calib-seed", type=int, default=None,
                    help="externally selected calibration seed; skips the "
                         "selection stage")

    sp = sub.add_parser("select-calib", help="KL-select a calibration batch")
    sp.add_argument("--in", dest="ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sparsity", type=float, required=True)
    sp.add_argument("--gamma", default="analytic")
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--calib-n", type=int, default=32)
    sp.add_argument("--calib-seq-len", type=int, default=128)
    sp.add_argument("--eval-n", type=int, default=8)
    sp.add_argument("--eval-seq-len", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("eval-ppl", help="perplexity on a corpus split")
    sp.add_argument("--in", dest="ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="eval",
                    choices=("train", "calib", "eval"))
    sp.add_argument("--seq-len", type=int, default=128)
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("eval-kl", help="KL divergence between two checkpoints")
    sp.add_argument("--in", dest="ckpt", required=True)
    sp.add_argument("--other", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--eval-n", type=int, default=8)
    sp.add_argument("--eval-seq-len", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("ntk-check", help="kernel stability bound at one sparsity")
    sp.add_argument("--in", dest="ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--sparsity", type=float, required=True)
    sp.add_argument("--gamma", default="analytic")
    sp.add_argument("--calib-n", type=int, default=32)
    sp.add_argument("--calib-seq-len", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("gamma", help="measure the analytic allocation ratio")
    sp.add_argument("--in", dest="ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--calib-seed", type=int, default=0)
    sp.add_argument("--calib-n", type=int, default=32)
    sp.add_argument("--calib-seq-len", type=int, default=128)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("finetune", help="recovery tuning of a pruned model")
    sp.add_argument("--in", dest="ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    add_opt_flags(sp, 500)

    sp = sub.add_parser("bench", help="CPU forward micro-benchmark")
    sp.add_argument("--in", dest="ckpt", required=True)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--rounds", type=int, default=5)
    sp.add_argument("--seq-len", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    return p


def _resolved(args: argparse.Namespace) -> dict:
    out = {k: v for k, v in vars(args).items() if k != "verbose"}
    out["package_version"] = __version__
    return out


def _write_run_config(out_dir: Path, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(_resolved(args), indent=2, sort_keys=True) + "\n")


def _config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _validate_sparsity(v: float) -> None:
    if not (0.0 <= v < 1.0):
        raise UsageError(f"--sparsity must lie in [0, 1), got {v}")


def _parse_gamma(raw) -> object:
    if raw == "analytic":
        return "analytic"
    try:
        g = float(raw)
    except (TypeError, ValueError):
        raise UsageError(f"--gamma must be a number or 'analytic', got {raw!r}")
    if g <= 0:
        raise UsageError(f"--gamma must be positive, got {g}")
    return g


def _report(path: Path | None, name: str, text: str) -> None:
    if path is not None:
        path.mkdir(parents=True, exist_ok=True)
        (path / name).write_text(text)


def cmd_train(args) -> int:
    out = Path(args.out)
    _write_run_config(out, args)
    config = ModelConfig(d=args.d, m=args.m, h=args.heads, h_kv=args.kv_heads,
                         n_layers=args.layers, L=args.max_seq)
    weights = init_weights(config, seed=args.seed)
    corpus = load_corpus(args.corpus)
    opt = OptimizerConfig(lr=args.lr, beta1=args.beta1, beta2=args.beta2,
                          eps=args.eps, weight_decay=args.weight_decay)
    weights, stats = train(weights, corpus, args.steps, opt=opt,
                           batch_n=args.batch_n, seq_len=args.seq_len,
                           seed=args.seed)
    ckpt = save_checkpoint(out / "model.nrvk", weights, provenance={
        "command": "train", "steps": stats.steps_run,
        "diverged": stats.diverged, "optimizer": opt.to_dict(),
        "seed": args.seed, "corpus": str(args.corpus)})
    lines = ["# training report", f"steps_run = {stats.steps_run}",
             f"diverged = {stats.diverged}",
             f"final_loss = {stats.final_loss!r}"]
    lines += [f"loss_at_{s} = {l!r}" for s, l in stats.losses]
    _report(out, "train_report.txt", "\n".join(lines) + "\n")
    print(f"checkpoint written to {ckpt} (final loss {stats.final_loss:.4f})")
    return 0 if not stats.diverged else 2


def cmd_prune(args) -> int:
    _validate_sparsity(args.sparsity)
    gamma = _parse_gamma(args.gamma)
    pcfg = PipelineConfig(v=args.sparsity, gamma=gamma, mode=args.mode,
                          calib_trials=args.trials, calib_n=args.calib_n,
                          calib_seq_len=args.calib_seq_len, seed=args.seed,
                          eval_n=args.eval_n, eval_seq_len=args.eval_seq_len,
                          calib_seed=args.calib_seed)
    run_dir = Path(args.out) / _config_hash(_resolved(args))
    _write_run_config(run_dir, args)
    weights, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    result = prune_pipeline(pcfg, corpus, weights)
    save_checkpoint(run_dir / "pruned.nrvk", result.weights, provenance={
        "command": "prune", "pipeline": pcfg.to_dict(),
        "source": str(args.ckpt), "chosen_seed": result.chosen_seed})
    (run_dir / "prune_spec.txt").write_text(result.spec.to_text())
    (run_dir / "ntk_report.txt").write_text(result.ntk_report.to_text())
    (run_dir / "sparsity_report.txt").write_text(result.sparsity.to_text())
    if result.selection_report is not None:
        (run_dir / "selection_report.txt").write_text(
            result.selection_report.to_text())
    if result.gamma_estimate is not None:
        (run_dir / "gamma_report.txt").write_text(
            result.gamma_estimate.to_text())
    print(f"pruned checkpoint and reports in {run_dir}")
    print(f"achieved sparsity {result.sparsity.achieved_total:.4f} "
          f"(target {args.sparsity})")
    return 0


def cmd_select_calib(args) -> int:
    _validate_sparsity(args.sparsity)
    gamma = _parse_gamma(args.gamma)
    out = Path(args.out)
    _write_run_config(out, args)
    weights, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    from .allocator import allocate
    base = sample_batch(corpus, "calib", args.seed, args.calib_n,
                        args.calib_seq_len)
    if gamma == "analytic":
        gamma = derive_gamma(weights, weights.config, base).gamma
    plan = allocate(args.sparsity, gamma, param_counts(weights))
    eval_batch = sample_batch(corpus, "eval", args.seed, args.eval_n,
                              args.eval_seq_len)
    report = select_calibration(weights, corpus, args.trials, args.calib_n,
                                args.calib_seq_len, plan, eval_batch,
                                base_seed=args.seed)
    (out / "selection_report.txt").write_text(report.to_text())
    print(f"chosen seed {report.chosen_seed} with KL {report.chosen_kl:.6f}")
    return 0


def cmd_eval_ppl(args) -> int:
    weights, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    ppl = eval_ppl(weights, corpus, args.split, seq_len=args.seq_len,
                   limit=args.limit)
    print(f"perplexity[{args.split}] = {ppl:.4f}")
    if args.out:
        out = Path(args.out)
        _write_run_config(out, args)
        _report(out, "ppl_report.txt",
                f"# perplexity report\nsplit = {args.split}\n"
                f"seq_len = {args.seq_len}\nppl = {ppl!r}\n")
    return 0


def cmd_eval_kl(args) -> int:
    weights, _ = load_checkpoint(args.ckpt)
    other, _ = load_checkpoint(args.other)
    corpus = load_corpus(args.corpus)
    eval_batch = sample_batch(corpus, "eval", args.seed, args.eval_n,
                              args.eval_seq_len)
    kl = kl_divergence(weights, other, eval_batch)
    print(f"kl = {kl:.6f}")
    if args.out:
        out = Path(args.out)
        _write_run_config(out, args)
        _report(out, "kl_report.txt",
                f"# kl report\nkl = {kl!r}\nseed = {args.seed}\n"
                f"eval_n = {args.eval_n}\neval_seq_len = {args.eval_seq_len}\n")
    return 0


def cmd_ntk_check(args) -> int:
    _validate_sparsity(args.sparsity)
    gamma = _parse_gamma(args.gamma)
    weights, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    from .allocator import align_dims, allocate, global_rank_select
    from .saliency import compute_saliency, group_scores
    batch = sample_batch(corpus, "calib", args.seed, args.calib_n,
                         args.calib_seq_len)
    if gamma == "analytic":
        gamma = derive_gamma(weights, weights.config, batch).gamma
    plan = allocate(args.sparsity, gamma, param_counts(weights))
    scores = group_scores(compute_saliency(weights, batch), weights.config)
    spec = align_dims(global_rank_select(scores, plan, weights.config))
    masked = apply_masks(weights, spec)
    report = ntk_stability_check(weights, masked,
                                 prune_sets(spec, weights.config), batch)
    print(report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        _write_run_config(out, args)
        _report(out, "ntk_report.txt", report.to_text())
    return 0


def cmd_gamma(args) -> int:
    weights, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    batch = sample_batch(corpus, "calib", args.calib_seed, args.calib_n,
                         args.calib_seq_len)
    est = derive_gamma(weights, weights.config, batch)
    print(est.to_text(), end="")
    if args.out:
        out = Path(args.out)
        _write_run_config(out, args)
        _report(out, "gamma_report.txt", est.to_text())
    return 0


def cmd_finetune(args) -> int:
    out = Path(args.out)
    _write_run_config(out, args)
    weights, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    opt = OptimizerConfig(lr=args.lr, beta1=args.beta1, beta2=args.beta2,
                          eps=args.eps, weight_decay=args.weight_decay)
    weights, stats = finetune(weights, corpus, args.steps, opt=opt,
                              batch_n=args.batch_n, seq_len=args.seq_len,
                              seed=args.seed)
    save_checkpoint(out / "finetuned.nrvk", weights, provenance={
        "command": "finetune", "steps": stats.train.steps_run,
        "optimizer": opt.to_dict(), "seed": args.seed,
        "source": str(args.ckpt)})
    _report(out, "finetune_report.txt",
            "# finetune report\n"
            f"steps_run = {stats.train.steps_run}\n"
            f"diverged = {stats.train.diverged}\n"
            f"ppl_before = {stats.ppl_before!r}\n"
            f"ppl_after = {stats.ppl_after!r}\n")
    print(f"perplexity {stats.ppl_before:.4f} -> {stats.ppl_after:.4f}")
    return 0 if not stats.train.diverged else 2


def cmd_bench(args) -> int:
    weights, _ = load_checkpoint(args.ckpt)
    report = bench(weights, batch_size=args.batch_size, rounds=args.rounds,
                   seq_len=args.seq_len, seed=args.seed)
    print(report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        _write_run_config(out, args)
        _report(out, "bench_report.txt", report.to_text())
    return 0


_COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "select-calib": cmd_select_calib,
    "eval-ppl": cmd_eval_ppl,
    "eval-kl": cmd_eval_kl,
    "ntk-check": cmd_ntk_check,
    "gamma": cmd_gamma,
    "finetune": cmd_finetune,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            sys.stderr.write("error: a subcommand is required\n")
            return 1
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(asctime)s %(levelname)s %(message)s")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # runtime failures exit 2
        sys.stderr.write(f"runtime error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
