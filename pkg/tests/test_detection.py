"""Unit tests for poisoning scores and flagging."""

import math

import numpy as np
import pytest

from horus.detection import (
    HopsScore,
    LayerFeatures,
    MatrixSource,
    Percentile,
    SpectralFeatures,
    TopM,
    client_features,
    detect_round,
    flag_clients,
    hops_scores,
)
from horus.lora import ClientUpdate, LayerId, LoraPair
from horus.spectral import percentile

FF, CL = LayerId.FEATURE_FIRST, LayerId.CLASSIFIER


def make_update(rng, client_id=0, rank=8, ff=(16, 12), cl=(12, 4), a_maps=None):
    layers = {}
    for lid, (d_in, d_out) in ((FF, ff), (CL, cl)):
        a = a_maps[lid] if a_maps else rng.normal(size=(rank, d_in))
        layers[lid] = LoraPair(a=a, b=rng.normal(size=(d_out, rank)), rank=rank)
    return ClientUpdate(client_id=client_id, arch_id=0, layers=layers)


def features_from(ratios, entropies, k=5):
    """Hand-built per-client features with equal values on both layers."""
    out = {}
    for cid, (r, h) in enumerate(zip(ratios, entropies)):
        lf = LayerFeatures(entropy_h=h, ratio_rk=r, k_used=k)
        out[cid] = SpectralFeatures(layers={FF: lf, CL: lf})
    return out


class TestClientFeatures:
    def test_rank_one_a(self):
        rng = np.random.default_rng(0)
        a_maps = {
            FF: np.outer(np.arange(1, 9, dtype=float), rng.normal(size=16)),
            CL: np.outer(np.arange(1, 9, dtype=float), rng.normal(size=12)),
        }
        feats = client_features(make_update(rng, a_maps=a_maps), k=5)
        for lid in LayerId:
            assert feats.layers[lid].ratio_rk == pytest.approx(1.0, abs=1e-10)
            assert feats.layers[lid].entropy_h == pytest.approx(0.0, abs=1e-8)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        u = make_update(rng)
        scaled_layers = {
            lid: LoraPair(10.0 * pair.a, pair.b, pair.rank)
            for lid, pair in u.layers.items()
        }
        scaled = ClientUpdate(0, 0, scaled_layers)
        f1, f2 = client_features(u, 5), client_features(scaled, 5)
        for lid in LayerId:
            assert f1.layers[lid].entropy_h == pytest.approx(
                f2.layers[lid].entropy_h, abs=1e-10
            )
            assert f1.layers[lid].ratio_rk == pytest.approx(
                f2.layers[lid].ratio_rk, abs=1e-10
            )

    def test_matches_two_step_oracle(self):
        # oracle: full numpy SVD then the ratio/entropy arithmetic inline
        rng = np.random.default_rng(2)
        u = make_update(rng, rank=8)
        feats = client_features(u, k=5)
        for lid in LayerId:
            s = np.linalg.svd(u.layers[lid].a, compute_uv=False)
            p = s / s.sum()
            h = float(-(p[p > 0] * np.log(p[p > 0])).sum())
            r5 = float(s[:5].sum() / s.sum())
            assert feats.layers[lid].entropy_h == pytest.approx(h, abs=1e-10)
            assert feats.layers[lid].ratio_rk == pytest.approx(r5, abs=1e-10)
            assert feats.layers[lid].k_used == 5

    def test_never_reads_b(self):
        rng = np.random.default_rng(3)
        u = make_update(rng)
        before = client_features(u, 5)
        u.layers[FF].b[:] = np.nan  # in-place corruption of B only
        u.layers[CL].b[:] = np.nan
        after = client_features(u, 5)
        assert before == after

    def test_source_b_reads_b(self):
        rng = np.random.default_rng(4)
        u = make_update(rng)
        fa = client_features(u, 5, MatrixSource.A)
        fb = client_features(u, 5, MatrixSource.B)
        assert fa != fb


class TestHopsScores:
    def test_identical_features_score_zero(self):
        feats = features_from([0.8, 0.8, 0.8], [1.2, 1.2, 1.2])
        scores = hops_scores(feats, lam=0.5)
        assert all(s.score == 0.0 for s in scores.values())

    def test_lambda_endpoints(self):
        feats = features_from([0.9, 0.6, 0.8], [1.0, 1.5, 1.1])
        only_energy = hops_scores(feats, lam=1.0)
        only_entropy = hops_scores(feats, lam=0.0)
        dev = np.array([0.1, 0.4, 0.2])
        ent = np.array([1.0, 1.5, 1.1])
        z = np.abs((ent - ent.mean()) / ent.std())
        for cid in feats:
            assert only_energy[cid].score == pytest.approx(
                abs(dev[cid] - dev.mean()), abs=1e-12
            )
            assert only_entropy[cid].score == pytest.approx(z[cid], abs=1e-12)

    def test_hand_worked_three_clients(self):
        # (1 - R_k) = {0.1, 0.1, 0.4}, equal entropies, lambda = 0.7
        feats = features_from([0.9, 0.9, 0.6], [1.0, 1.0, 1.0])
        scores = hops_scores(feats, lam=0.7)
        dev = np.array([1.0 - 0.9, 1.0 - 0.9, 1.0 - 0.6])
        expected = 0.7 * np.abs(dev - dev.mean())
        for cid in feats:
            assert scores[cid].score == expected[cid]
        assert scores[0].score == pytest.approx(0.07, abs=1e-12)
        assert scores[1].score == pytest.approx(0.07, abs=1e-12)
        assert scores[2].score == pytest.approx(0.14, abs=1e-12)

    def test_sigma_guard_zeroes_entropy_term(self):
        feats = features_from([0.9, 0.8], [1.0, 1.0 + 1e-14])
        scores = hops_scores(feats, lam=0.0)
        assert all(s.score == 0.0 for s in scores.values())

    def test_score_is_mean_of_layer_subscores(self):
        rng = np.random.default_rng(5)
        feats = {}
        for cid in range(4):
            feats[cid] = SpectralFeatures(layers={
                FF: LayerFeatures(float(rng.random()), float(rng.random()), 5),
                CL: LayerFeatures(float(rng.random()), float(rng.random()), 5),
            })
        for s in hops_scores(feats, 0.4).values():
            assert s.score == pytest.approx(
                (s.per_layer[FF] + s.per_layer[CL]) / 2.0, abs=1e-15
            )

    def test_requires_two_clients(self):
        with pytest.raises(ValueError):
            hops_scores(features_from([0.9], [1.0]), 0.5)

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError):
            hops_scores(features_from([0.9, 0.8], [1.0, 1.1]), 1.5)


def scores_of(values):
    return {
        cid: HopsScore(cid, v, {FF: v, CL: v}) for cid, v in enumerate(values)
    }


class TestFlagClients:
    def test_equal_scores_percentile_flags_none(self):
        det = flag_clients(scores_of([0.3] * 10), Percentile(95))
        assert det.flagged == frozenset()

    def test_topm_separation(self):
        det = flag_clients(scores_of([0.01] * 8 + [0.9, 0.95]), TopM(2))
        assert det.flagged == frozenset({8, 9})
        assert det.threshold_theta == 0.01

    def test_percentile_worked_example(self):
        values = [0.01 * (i + 1) for i in range(8)] + [0.9, 0.95]
        det = flag_clients(scores_of(values), Percentile(95))
        theta = percentile(values, 95)  # independent threshold computation
        expected = frozenset(i for i, v in enumerate(values) if v > theta)
        assert det.flagged == expected == frozenset({9})
        assert det.threshold_theta == pytest.approx(theta)

    def test_topm_tie_break_low_ids_first(self):
        det = flag_clients(scores_of([0.5, 0.5, 0.5, 0.1]), TopM(2))
        assert det.flagged == frozenset({0, 1})

    def test_topm_exceeding_population_flags_all(self):
        det = flag_clients(scores_of([0.1, 0.2]), TopM(5))
        assert det.flagged == frozenset({0, 1})
        assert det.threshold_theta == float("-inf")

    def test_empty_scores_rejected(self):
        with pytest.raises(ValueError):
            flag_clients({}, TopM(1))


class TestDetectRound:
    def test_single_client_skipped(self):
        det = detect_round(features_from([0.9], [1.0]), 0.5, TopM(2))
        assert det.skipped and det.flagged == frozenset()

    def test_composition_matches_stages(self):
        feats = features_from([0.9, 0.7, 0.8, 0.5], [1.0, 1.4, 1.1, 1.9])
        det = detect_round(feats, 0.3, TopM(1))
        staged = flag_clients(hops_scores(feats, 0.3), TopM(1))
        assert det.flagged == staged.flagged
        assert det.threshold_theta == staged.threshold_theta


class TestDetectionInvariances:
    def _updates(self, rng, n=6):
        return {
            cid: make_update(rng, client_id=cid, ff=(16, 12), cl=(12, 4))
            for cid in range(n)
        }

    def test_per_client_rescaling_keeps_flags(self):
        rng = np.random.default_rng(6)
        updates = self._updates(rng)
        feats = {c: client_features(u, 5) for c, u in updates.items()}
        base = detect_round(feats, 0.5, TopM(2))
        scales = {c: float(rng.uniform(0.1, 10.0)) for c in updates}
        scaled_feats = {}
        for c, u in updates.items():
            layers = {
                lid: LoraPair(scales[c] * p.a, p.b, p.rank)
                for lid, p in u.layers.items()
            }
            scaled_feats[c] = client_features(ClientUpdate(c, 0, layers), 5)
        scaled = detect_round(scaled_feats, 0.5, TopM(2))
        assert scaled.flagged == base.flagged
        for c in updates:
            assert scaled.scores[c].score == pytest.approx(
                base.scores[c].score, abs=1e-9
            )

    def test_zero_padding_keeps_scores(self):
        rng = np.random.default_rng(7)
        updates = self._updates(rng)
        feats = {c: client_features(u, 5) for c, u in updates.items()}
        base = detect_round(feats, 0.5, TopM(2))
        padded_feats = {}
        for c, u in updates.items():
            layers = {}
            for lid, p in u.layers.items():
                a_pad = np.zeros((p.rank, p.d_in + 7))
                a_pad[:, : p.d_in] = p.a
                layers[lid] = LoraPair(a_pad, p.b, p.rank)
            padded_feats[c] = client_features(ClientUpdate(c, 0, layers), 5)
        padded = detect_round(padded_feats, 0.5, TopM(2))
        assert padded.flagged == base.flagged
        for c in updates:
            assert abs(padded.scores[c].score - base.scores[c].score) <= 1e-10

    def test_client_order_permutation_is_symmetric(self):
        rng = np.random.default_rng(8)
        updates = self._updates(rng)
        feats = {c: client_features(u, 5) for c, u in updates.items()}
        base = detect_round(feats, 0.5, Percentile(80))
        reordered = dict(reversed(list(feats.items())))
        permuted = detect_round(reordered, 0.5, Percentile(80))
        assert permuted.flagged == base.flagged
        assert permuted.threshold_theta == base.threshold_theta
        for c in feats:
            assert permuted.scores[c].score == base.scores[c].score
