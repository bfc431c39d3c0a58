"""Pair counting, transfer reports, stationarity z-scores, Fréchet distance."""

from __future__ import annotations

import numpy as np
import pytest

from colflow.analysis import (
    DistStats,
    attention_pair_count,
    center_edge_ratio,
    column_stationarity,
    flop_report,
    frechet_distance,
    per_position_eval_loss,
    transfer_matrix,
    zero_shot_eval,
)
from colflow.generator import FlowHeadConfig, Generator, GeneratorConfig
from colflow.numerics import ContractViolation


class TestPairCounts:
    def test_full_causal_closed_form(self):
        assert attention_pair_count(16, None, "full") == 136

    def test_windowed_w3_n16(self):
        # 1 + 2 + 3 + 4 + 12 * 4 = 58
        assert attention_pair_count(16, 3, "windowed") == 58

    def test_paper_ratio(self):
        ratio = attention_pair_count(16, 3, "windowed") / attention_pair_count(16, None, "full")
        assert abs(ratio - 58 / 136) < 1e-12
        assert abs(ratio - 0.429) < 0.02      # the stated approximate saving
        assert abs(ratio - 1.8 / 4.2) < 0.02  # the reported cost-table ratio

    @pytest.mark.parametrize("n", [1, 2, 5, 16, 40])
    def test_window_covering_all_predecessors_equals_full(self, n):
        assert attention_pair_count(n, n - 1, "windowed") == attention_pair_count(n, None, "full")

    def test_real_equivariant_per_token_normalized(self):
        # (w+1)(w+2)/2 pairs per crop of w+1 tokens -> n (w+2)/2.
        assert attention_pair_count(16, 3, "real_equivariant") == 16 * 5 / 2

    def test_flop_totals_scale_linearly_in_layers_and_width(self):
        base = flop_report(16, 3, n_layers=2, hidden_dim=32)
        double_layers = flop_report(16, 3, n_layers=4, hidden_dim=32)
        double_width = flop_report(16, 3, n_layers=2, hidden_dim=64)
        for variant in base.flops:
            assert double_layers.flops[variant] == 2 * base.flops[variant]
            assert double_width.flops[variant] == 2 * base.flops[variant]

    def test_report_serialization(self, tmp_path):
        rep = flop_report(16, 3, 4, 64)
        rep.to_json(tmp_path / "f.json")
        rep.to_csv(tmp_path / "f.csv")
        text = (tmp_path / "f.csv").read_text()
        assert "windowed" in text and "58" in text


def tiny_model(**kw):
    base = dict(n_layers=1, hidden_dim=8, n_heads=2, window_w=2, cond_seq_len=2,
                token_channels=4, n_classes=2, max_seq_len=10, shift_max=8,
                flow_head=FlowHeadConfig(mlp_layers=1, mlp_hidden=8, t_embed_dim=4),
                seed=0)
    base.update(kw)
    return Generator(GeneratorConfig(**base))


class TestZeroShotEval:
    def test_all_positions_trained_ratio_is_one(self):
        model = tiny_model()
        rng = np.random.default_rng(1)
        tokens = rng.standard_normal((8, 6, 4)).astype(np.float32)
        labels = rng.integers(0, 2, size=8)
        rep = zero_shot_eval(model, tokens, labels, list(range(6)), seed=3)
        assert rep.transfer_ratio == 1.0
        assert rep.heldout_positions == []

    def test_deterministic_given_seed(self):
        model = tiny_model()
        rng = np.random.default_rng(2)
        tokens = rng.standard_normal((8, 6, 4)).astype(np.float32)
        labels = rng.integers(0, 2, size=8)
        a = per_position_eval_loss(model, tokens, labels, seed=5)
        b = per_position_eval_loss(model, tokens, labels, seed=5)
        assert a.tobytes() == b.tobytes()

    def test_report_covers_all_positions(self, tmp_path):
        model = tiny_model()
        rng = np.random.default_rng(3)
        tokens = rng.standard_normal((8, 6, 4)).astype(np.float32)
        labels = rng.integers(0, 2, size=8)
        rep = zero_shot_eval(model, tokens, labels, [0, 1, 2], seed=1)
        assert sorted(rep.trained_positions + rep.heldout_positions) == list(range(6))
        assert len(rep.per_position_loss) == 6
        assert rep.transfer_ratio > 0
        rep.to_json(tmp_path / "r.json")
        rep.to_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().startswith("position,")


class TestTransferMatrix:
    def test_identical_logs_zero_grid(self):
        base = np.array([1.0, 2.0, 3.0])
        grid, rows = transfer_matrix({0: base.copy(), 1: base.copy(), 2: base.copy()}, base)
        np.testing.assert_array_equal(grid, np.zeros((3, 3)))
        assert rows == [0, 1, 2]

    def test_grid_dimensions_w_by_w(self):
        w = 5
        base = np.ones(w)
        runs = {p: np.ones(w) * 0.5 for p in range(w)}
        grid, _ = transfer_matrix(runs, base)
        assert grid.shape == (w, w)
        np.testing.assert_allclose(grid, 50.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            transfer_matrix({0: np.ones(3)}, np.ones(4))


class TestStationarity:
    def test_iid_tokens_calibrated_against_gaussian_tails(self):
        # For position-independent tokens the beyond-band max |z| concentrates
        # near the Gaussian-tail prediction for ~2*(T-train_len) draws
        # (around 2.7-3.2); it clears 3 only by ordinary tail luck and never
        # by a wide margin. Checked over 20 seeds rather than one draw.
        maxima = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            samples = rng.standard_normal((64, 32, 8))
            out = column_stationarity(samples, train_len=16, w=3)
            maxima.append(out["max_abs_beyond_train"])
        maxima = np.array(maxima)
        assert 2.0 < np.median(maxima) < 4.0
        assert (maxima <= 3.0).mean() >= 0.3
        assert maxima.max() < 6.0

    def test_injected_step_fault_flagged(self):
        rng = np.random.default_rng(5)
        samples = rng.standard_normal((64, 32, 8))
        samples[:, 16:, :] += 1.5
        out = column_stationarity(samples, train_len=16, w=3)
        assert out["max_abs_beyond_train"] > 3.0
        assert np.abs(out["z_mean"][16:]).min() > 3.0

    def test_in_band_leave_one_out_self_consistent(self):
        rng = np.random.default_rng(6)
        samples = rng.standard_normal((64, 20, 8))
        band = list(range(4, 16))
        for pos in (6, 10, 14):
            out = column_stationarity(samples, train_len=16, w=3,
                                      reference=[p for p in band if p != pos])
            assert abs(out["z_mean"][pos]) < 3.0

    def test_small_batch_rejected(self):
        with pytest.raises(ContractViolation):
            column_stationarity(np.zeros((8, 20, 4)), 16, 3)


class TestFrechet:
    def test_identity(self):
        rng = np.random.default_rng(7)
        feats = rng.standard_normal((500, 16))
        a = DistStats.from_features(feats)
        assert frechet_distance(a, a) < 1e-10

    def test_isotropic_gaussian_closed_form(self):
        mu = np.array([1.0, -2.0, 0.5])
        eye = np.eye(3)
        a = DistStats(mean=np.zeros(3), cov=eye)
        b = DistStats(mean=mu, cov=eye)
        assert abs(frechet_distance(a, b) - float(mu @ mu)) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(8)
        a = DistStats.from_features(rng.standard_normal((300, 8)))
        b = DistStats.from_features(rng.standard_normal((300, 8)) * 1.5 + 0.3)
        d1, d2 = frechet_distance(a, b), frechet_distance(b, a)
        assert d1 > 0
        assert abs(d1 - d2) <= 1e-8

    def test_non_psd_rejected(self):
        bad = np.eye(3)
        bad[0, 0] = -1.0
        with pytest.raises(ContractViolation):
            frechet_distance(DistStats(np.zeros(3), bad), DistStats(np.zeros(3), np.eye(3)))

    def test_projection_fixed_seed_reproducible(self):
        rng = np.random.default_rng(9)
        samples = rng.standard_normal((10, 4, 4, 3))
        f1 = DistStats.project(samples)
        f2 = DistStats.project(samples)
        assert f1.shape == (10, 64)
        assert f1.tobytes() == f2.tobytes()


class TestCenterEdgeRatio:
    def test_flat_profile_is_one(self):
        assert center_edge_ratio(np.ones(12)) == pytest.approx(1.0)

    def test_center_heavy_profile(self):
        losses = np.ones(12)
        losses[4:8] = 3.0
        assert center_edge_ratio(losses) == pytest.approx(3.0)
