"""Saliency oracles: brute-force leave-one-weight-out checks, grouping
partitions, and the SignGD kernel identities and stability bound."""

import numpy as np
import pytest
from scipy import stats

from ntkprune import autodiff as ad
from ntkprune.model import (ModelConfig, init_weights, param_counts,
                            scalar_output_f)
from ntkprune.saliency import (ATTN_KV_GROUP, MLP_UNIT, compute_saliency,
                               group_field, group_scores, kv_group_params,
                               magnitude_scores, mlp_unit_params, ntk_diag,
                               ntk_stability_check)
from ntkprune.pruning import apply_masks, prune_sets
from ntkprune.allocator import PruneSpec
from conftest import make_batch, tiny_config

RNG = np.random.default_rng


@pytest.fixture
def batch(cfg):
    return make_batch(RNG(21).integers(0, cfg.vocab, size=(4, 12)), seed=21)


def spec_keeping_all_but(cfg, pruned_mlp=None, pruned_kv=None) -> PruneSpec:
    pruned_mlp = pruned_mlp or {}
    pruned_kv = pruned_kv or {}
    kept_mlp, kept_kv, scores_m, scores_k = [], [], [], []
    for i in range(cfg.n_layers):
        m, hkv = cfg.m_per_layer[i], cfg.hkv_per_layer[i]
        kept_mlp.append(sorted(set(range(m)) - set(pruned_mlp.get(i, []))))
        kept_kv.append(sorted(set(range(hkv)) - set(pruned_kv.get(i, []))))
        scores_m.append(np.zeros(m))
        scores_k.append(np.zeros(hkv))
    return PruneSpec(kept_mlp=kept_mlp, kept_kv=kept_kv,
                     target_mlp_counts=[len(k) for k in kept_mlp],
                     aligned_mlp_counts=[len(k) for k in kept_mlp],
                     mlp_scores=scores_m, kv_scores=scores_k)


class TestSaliencyField:
    def test_zero_weight_zero_saliency(self, cfg, batch):
        w = init_weights(cfg, seed=1)
        w["layers.0.w_gate"].data[3, 5] = 0.0
        sal = compute_saliency(w, batch)
        assert sal.scores["layers.0.w_gate"][3, 5] == 0.0

    def test_dead_unit_zero_gradient_zero_saliency(self, cfg, batch):
        # silence unit 5: zero gate and up columns, so the down row sees a
        # exactly-zero activation and its gradient vanishes despite nonzero
        # weights
        w = init_weights(cfg, seed=2)
        w["layers.1.w_gate"].data[:, 5] = 0.0
        w["layers.1.w_up"].data[:, 5] = 0.0
        sal = compute_saliency(w, batch)
        np.testing.assert_array_equal(sal.scores["layers.1.w_down"][5, :],
                                      np.zeros(cfg.d, dtype=np.float32))

    def test_all_nonnegative_and_shapes_mirror(self, cfg, weights, batch):
        sal = compute_saliency(weights, batch)
        for name, arr in sal.scores.items():
            assert arr.shape == weights[name].data.shape
            assert (arr >= 0).all()

    def test_first_order_tracks_exact_delta(self):
        """Leave-one-weight-out oracle on a 2-layer model.

        Spearman rank correlation between |grad*w| and the exact |delta f|
        from zeroing each of 200 sampled weights must reach 0.9.
        """
        cfg = ModelConfig(d=64, m=256, h=8, h_kv=4, n_layers=2, L=64)
        w = init_weights(cfg, seed=3)
        batch = make_batch(RNG(30).integers(0, cfg.vocab, size=(4, 64)), seed=30)
        sal = compute_saliency(w, batch)
        f_base = sal.f_value

        rng = RNG(31)
        names = list(sal.scores)
        predicted, exact = [], []
        for _ in range(200):
            name = names[rng.integers(len(names))]
            idx = tuple(rng.integers(0, s) for s in w[name].data.shape)
            orig = w[name].data[idx]
            w[name].data[idx] = 0.0
            f_zeroed = scalar_output_f(w, batch).item()
            w[name].data[idx] = orig
            predicted.append(sal.scores[name][idx])
            exact.append(abs(f_zeroed - f_base))
        rho = stats.spearmanr(predicted, exact).statistic
        assert rho >= 0.9, f"spearman {rho:.3f}"

    def test_small_weight_regime_relative_error(self):
        """|delta f| vs |grad*w| within 10% when |w| <= 0.1 * init scale."""
        cfg = ModelConfig(d=64, m=256, h=8, h_kv=4, n_layers=2, L=64)
        w = init_weights(cfg, seed=4)
        batch = make_batch(RNG(40).integers(0, cfg.vocab, size=(4, 64)), seed=40)
        sal = compute_saliency(w, batch)
        f_base = sal.f_value
        scale = 0.1 / np.sqrt(cfg.d)

        rng = RNG(41)
        rel_errors = []
        names = list(sal.scores)
        while len(rel_errors) < 50:
            name = names[rng.integers(len(names))]
            idx = tuple(rng.integers(0, s) for s in w[name].data.shape)
            orig = w[name].data[idx]
            pred = sal.scores[name][idx]
            # skip weights outside the small-perturbation regime and those
            # whose predicted effect drowns in float32 forward noise
            if abs(orig) > scale or pred < 1e-5:
                continue
            w[name].data[idx] = 0.0
            delta = abs(scalar_output_f(w, batch).item() - f_base)
            w[name].data[idx] = orig
            rel_errors.append(abs(delta - pred) / pred)
        assert np.median(rel_errors) <= 0.10


class TestGrouping:
    def test_partition_sums_exactly(self, cfg, weights, batch):
        sal = compute_saliency(weights, batch)
        scores = group_scores(sal, cfg)
        total_units = sum(u.score for u in scores)
        total_field = sum(a.astype(np.float64).sum()
                          for a in sal.scores.values())
        assert abs(total_units - total_field) <= 1e-4 * abs(total_field)

    def test_unit_counts(self, cfg, weights, batch):
        scores = group_scores(compute_saliency(weights, batch), cfg)
        mlp = [u for u in scores if u.kind == MLP_UNIT]
        kv = [u for u in scores if u.kind == ATTN_KV_GROUP]
        assert len(mlp) == sum(cfg.m_per_layer)
        assert len(kv) == sum(cfg.hkv_per_layer)

    def test_uniform_field_mlp_score(self, cfg):
        s = 0.25
        fields = {}
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            for fam, shape in [("w_gate", (cfg.d, 32)), ("w_up", (cfg.d, 32)),
                               ("w_down", (32, cfg.d)),
                               ("wq", (cfg.d, cfg.d)),
                               ("wk", (cfg.d, cfg.d // 2)),
                               ("wv", (cfg.d, cfg.d // 2)),
                               ("wo", (cfg.d, cfg.d))]:
                fields[p + fam] = np.full(shape, s, dtype=np.float32)
        units = group_field(fields, cfg)
        for u in units:
            if u.kind == MLP_UNIT:
                assert np.isclose(u.score, 3 * cfg.d * s)
            else:
                assert np.isclose(u.score, kv_group_params(cfg) * s)

    def test_kv_group_membership_naive_oracle(self, cfg, weights, batch):
        """Group scores equal a per-member double loop over Q/K/V/O slices."""
        sal = compute_saliency(weights, batch)
        scores = {(u.kind, u.layer, u.unit): u.score
                  for u in group_scores(sal, cfg)}
        dh = cfg.d_h
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            h, hkv = cfg.h_per_layer[i], cfg.hkv_per_layer[i]
            for g in range(hkv):
                want = 0.0
                for a in range(h):
                    if a * hkv // h != g:
                        continue
                    want += sal.scores[p + "wq"][:, a * dh:(a + 1) * dh].sum(
                        dtype=np.float64)
                    want += sal.scores[p + "wo"][a * dh:(a + 1) * dh, :].sum(
                        dtype=np.float64)
                want += sal.scores[p + "wk"][:, g * dh:(g + 1) * dh].sum(
                    dtype=np.float64)
                want += sal.scores[p + "wv"][:, g * dh:(g + 1) * dh].sum(
                    dtype=np.float64)
                got = scores[(ATTN_KV_GROUP, i, g)]
                assert np.isclose(got, want, rtol=1e-9)

    def test_params_per_unit(self, cfg):
        assert mlp_unit_params(cfg) == 3 * cfg.d
        gsize = cfg.h // cfg.h_kv
        assert kv_group_params(cfg) == cfg.d * cfg.d_h * (2 * gsize + 2)


class TestMagnitude:
    def test_all_ones_weights(self, cfg):
        w = init_weights(cfg, seed=5)
        for name in w.prunable_names():
            w[name].data[:] = 1.0
        for u in magnitude_scores(w):
            if u.kind == MLP_UNIT:
                assert np.isclose(u.score, 3 * cfg.d)

    def test_no_data_dependence(self, cfg, weights):
        s1 = magnitude_scores(weights)
        s2 = magnitude_scores(weights)
        assert [(u.score) for u in s1] == [(u.score) for u in s2]


class TestNtk:
    def test_diag_equals_l1_norm(self, cfg, weights, batch):
        theta = ntk_diag(weights, batch)
        # independent recomputation straight from the tape
        weights.zero_grads()
        f = scalar_output_f(weights, batch)
        ad.backward(f)
        want = sum(np.abs(weights[n].grad.astype(np.float64)).sum()
                   for n in weights.prunable_names())
        assert np.isclose(theta, want, rtol=1e-12)

    def test_zero_gradient_zero_theta(self, cfg, batch):
        w = init_weights(cfg, seed=6)
        # kill the output head: f is constant, every gradient vanishes
        w["out_head"].data[:] = 0.0
        assert ntk_diag(w, batch) == 0.0

    def test_invariant_to_qk_negation(self, cfg, batch):
        # (-Q)(-K)^T == QK^T, so |gradients| and theta match exactly
        w = init_weights(cfg, seed=7)
        theta = ntk_diag(w, batch)
        w["layers.0.wq"].data *= -1.0
        w["layers.0.wk"].data *= -1.0
        assert ntk_diag(w, batch) == theta

    def test_empty_prune_set_trivial_bound(self, cfg, weights, batch):
        spec = spec_keeping_all_but(cfg)
        report = ntk_stability_check(weights, apply_masks(weights, spec),
                                     prune_sets(spec, cfg), batch)
        assert report.theta_before == report.theta_after
        assert report.epsilon == 0.0 and report.holds

    def test_lowest_unit_pruning_holds(self, cfg, weights, batch):
        scores = group_scores(compute_saliency(weights, batch), cfg)
        mlp = sorted((u for u in scores if u.kind == MLP_UNIT),
                     key=lambda u: u.score)
        lowest = mlp[0]
        spec = spec_keeping_all_but(cfg, pruned_mlp={lowest.layer: [lowest.unit]})
        report = ntk_stability_check(weights, apply_masks(weights, spec),
                                     prune_sets(spec, cfg), batch)
        assert report.holds
        assert report.n_pruned == 3 * cfg.d
        assert report.epsilon > 0 and report.c > 0

    def test_half_units_pruned_holds_with_slack(self, cfg, weights, batch):
        scores = group_scores(compute_saliency(weights, batch), cfg)
        pruned = {}
        for layer in range(cfg.n_layers):
            units = sorted((u for u in scores
                            if u.kind == MLP_UNIT and u.layer == layer),
                           key=lambda u: u.score)
            pruned[layer] = [u.unit for u in units[:len(units) // 2]]
        spec = spec_keeping_all_but(cfg, pruned_mlp=pruned)
        report = ntk_stability_check(weights, apply_masks(weights, spec),
                                     prune_sets(spec, cfg), batch)
        assert report.holds
        assert 0.0 <= report.slack_ratio < 1.0

    def test_zero_pruned_weight_degenerate_c(self, cfg, weights, batch):
        w = weights.clone()
        w["layers.0.w_gate"].data[:, 4] = 0.0
        w["layers.0.w_up"].data[:, 4] = 0.0
        w["layers.0.w_down"].data[4, :] = 0.0
        spec = spec_keeping_all_but(cfg, pruned_mlp={0: [4]})
        report = ntk_stability_check(w, apply_masks(w, spec),
                                     prune_sets(spec, cfg), batch)
        # every pruned coordinate is exactly zero: epsilon/c term skipped
        assert report.c is None
        assert report.epsilon == 0.0
        assert report.n_zero_pruned == 3 * cfg.d
        assert report.holds

    def test_dm_counts_scored_families(self, cfg, weights, batch):
        spec = spec_keeping_all_but(cfg, pruned_mlp={0: [0]})
        report = ntk_stability_check(weights, apply_masks(weights, spec),
                                     prune_sets(spec, cfg), batch)
        counts = param_counts(weights)
        assert report.dm == counts["mlp"] + counts["attn"]

    def test_report_text_round_trips_keys(self, cfg, weights, batch):
        spec = spec_keeping_all_but(cfg, pruned_mlp={0: [1, 2]})
        report = ntk_stability_check(weights, apply_masks(weights, spec),
                                     prune_sets(spec, cfg), batch)
        text = report.to_text()
        for key in ("theta_before", "theta_after", "epsilon", "bound",
                    "holds", "slack_ratio"):
            assert key in text
