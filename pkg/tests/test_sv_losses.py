import math

import numpy as np
import pytest

from tools import sv_grad as G
from tools.sv_losses import (
    LossConfig,
    Metric,
    ce_loss,
    combined_cp,
    combined_cpc,
    contrastive_loss,
    normalize,
    pn_loss,
    prototypes,
    query_posterior,
)


def _sq(a, b):
    return float(np.sum((np.asarray(a) - np.asarray(b)) ** 2))


def _pn_oracle(support, s_sizes, queries, q_sizes):
    cents, start = [], 0
    for k in s_sizes:
        cents.append(support[start:start + k].mean(axis=0))
        start += k
    per_speaker, start = [], 0
    for n, k in enumerate(q_sizes):
        losses = []
        for q in queries[start:start + k]:
            logits = [-_sq(q, c) for c in cents]
            m = max(logits)
            lse = m + math.log(sum(math.exp(v - m) for v in logits))
            losses.append(lse - logits[n])
        per_speaker.append(sum(losses) / len(losses))
        start += k
    return sum(per_speaker) / len(per_speaker)


def _contra_oracle(orig, aug, sizes):
    per_row = []
    for i in range(len(orig)):
        logits = [-_sq(orig[i], a) for a in aug]
        m = max(logits)
        lse = m + math.log(sum(math.exp(v - m) for v in logits))
        per_row.append(lse - logits[i])
    per_speaker, start = [], 0
    for k in sizes:
        per_speaker.append(sum(per_row[start:start + k]) / k)
        start += k
    return sum(per_speaker) / len(per_speaker)


class TestPrototypes:
    def test_single_member_is_itself(self, rng):
        z = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(prototypes(z, [1, 1, 1]).value, z)

    def test_two_point_mean(self):
        np.testing.assert_allclose(prototypes(np.eye(2), [2]).value, [[0.5, 0.5]])

    def test_matches_grouped_mean(self, rng):
        z = rng.standard_normal((20, 6))
        expected = z.reshape(5, 4, 6).mean(axis=1)
        np.testing.assert_allclose(prototypes(z, [4] * 5).value, expected, atol=1e-12)

    def test_empty_group_rejected(self, rng):
        with pytest.raises(ValueError):
            prototypes(rng.standard_normal((2, 3)), [2, 0])


class TestQueryPosterior:
    def test_single_centroid(self):
        np.testing.assert_allclose(query_posterior(np.array([0.3, -1.0]), np.array([[5.0, 5.0]])).value, [1.0])

    def test_equidistant(self):
        p = query_posterior(np.zeros(2), np.array([[1.0, 0.0], [0.0, 1.0]])).value
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-12)

    def test_worked_example(self):
        p = query_posterior(np.zeros(2), np.array([[1.0, 0.0], [3.0, 0.0]])).value
        np.testing.assert_allclose(p, [0.999665, 0.000335], atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        p = query_posterior(rng.normal(scale=10.0, size=(6, 3)), rng.standard_normal((4, 3))).value
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_cosine_is_scale_invariant(self, rng):
        q, c = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
        base = query_posterior(q, c, Metric.COSINE).value
        np.testing.assert_allclose(query_posterior(7.5 * q, 0.2 * c, "cosine").value, base, atol=1e-9)


class TestPnLoss:
    def test_symmetric_episode_gives_ln_n(self):
        support = np.eye(3)
        queries = np.zeros((3, 3))
        out = pn_loss(support, [1, 1, 1], queries, [1, 1, 1]).value
        assert float(out) == pytest.approx(math.log(3), abs=1e-12)

    def test_separation_lowers_loss(self):
        def loss_at(dist):
            support = np.array([[0.0, 0.0], [dist, 0.0]])
            return float(pn_loss(support, [1, 1], support.copy(), [1, 1]).value)

        assert loss_at(10.0) < loss_at(1.0)
        assert loss_at(1.0) >= 0.0

    def test_matches_scalar_oracle(self, rng):
        support = rng.standard_normal((6, 5))
        queries = rng.standard_normal((6, 5))
        out = float(pn_loss(support, [2, 2, 2], queries, [2, 2, 2]).value)
        assert out == pytest.approx(_pn_oracle(support, [2, 2, 2], queries, [2, 2, 2]), abs=1e-10)

    def test_uneven_groups_weight_speakers_equally(self, rng):
        support = rng.standard_normal((3, 4))
        queries = rng.standard_normal((5, 4))
        out = float(pn_loss(support, [1, 2], queries, [4, 1]).value)
        assert out == pytest.approx(_pn_oracle(support, [1, 2], queries, [4, 1]), abs=1e-10)

    def test_single_speaker_rejected(self, rng):
        with pytest.raises(ValueError, match="at least 2 speakers"):
            pn_loss(rng.standard_normal((1, 3)), [1], rng.standard_normal((2, 3)), [2])

    def test_mismatched_groups_rejected(self, rng):
        with pytest.raises(ValueError):
            pn_loss(rng.standard_normal((2, 3)), [1, 1], rng.standard_normal((3, 3)), [1, 1, 1])

    def test_large_distances_stay_finite(self, rng):
        out = pn_loss(1e3 * rng.standard_normal((4, 3)), [1] * 4, 1e3 * rng.standard_normal((4, 3)), [1] * 4)
        assert np.isfinite(out.value)


class TestCeLoss:
    def test_uniform_logits_give_ln_n(self):
        out = ce_loss(np.zeros((5, 9)), [0, 3, 8, 2, 2]).value
        assert float(out) == pytest.approx(math.log(9), abs=1e-12)

    def test_confident_correct_is_zero(self):
        logits = np.array([[800.0, 0.0], [0.0, 800.0]])
        assert float(ce_loss(logits, [0, 1]).value) == pytest.approx(0.0, abs=1e-12)

    def test_matches_scalar_oracle(self, rng):
        logits = rng.normal(scale=3.0, size=(8, 6))
        labels = rng.integers(0, 6, size=8)
        expected = 0.0
        for row, y in zip(logits, labels):
            expected += math.log(sum(math.exp(v) for v in row)) - row[y]
        assert float(ce_loss(logits, labels).value) == pytest.approx(expected / 8, abs=1e-10)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="label 4"):
            ce_loss(np.zeros((2, 4)), [0, 4])


class TestContrastiveLoss:
    def test_single_pair_is_zero(self, rng):
        z = rng.standard_normal((1, 4))
        assert float(contrastive_loss(z, z + 0.3, [1]).value) == pytest.approx(0.0, abs=1e-12)

    def test_matching_views_below_ln2_and_improving_with_distance(self):
        def loss_at(dist):
            orig = np.array([[0.0, 0.0], [dist, 0.0]])
            return float(contrastive_loss(orig, orig.copy(), [1, 1]).value)

        assert loss_at(1.0) < math.log(2)
        assert loss_at(3.0) < loss_at(1.0)

    def test_matches_scalar_oracle(self, rng):
        orig = rng.standard_normal((6, 4))
        aug = orig + 0.2 * rng.standard_normal((6, 4))
        out = float(contrastive_loss(orig, aug, [2, 2, 2]).value)
        assert out == pytest.approx(_contra_oracle(orig, aug, [2, 2, 2]), abs=1e-10)

    def test_speaker_permutation_leaves_value_unchanged(self, rng):
        orig = rng.standard_normal((6, 4))
        aug = rng.standard_normal((6, 4))
        order = [4, 5, 0, 1, 2, 3]
        a = float(contrastive_loss(orig, aug, [2, 2, 2]).value)
        b = float(contrastive_loss(orig[order], aug[order], [2, 2, 2]).value)
        assert a == pytest.approx(b, abs=1e-12)

    def test_misaligned_sets_rejected(self, rng):
        with pytest.raises(ValueError, match="not aligned"):
            contrastive_loss(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)), [3])


class TestCombinations:
    def test_cp_arithmetic(self):
        assert float(combined_cp(1.0, 0.6, 0.5).value) == pytest.approx(1.3)
        assert float(combined_cp(1.0, 0.6, 0.0).value) == pytest.approx(1.0)

    def test_cpc_arithmetic(self):
        assert float(combined_cpc(1.0, 0.6, 0.4, 0.5).value) == pytest.approx(1.5)
        assert float(combined_cpc(1.0, 0.6, 0.0, 0.5).value) == pytest.approx(float(combined_cp(1.0, 0.6, 0.5).value))

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            combined_cp(1.0, 1.0, -0.1)
        with pytest.raises(ValueError):
            combined_cpc(1.0, 1.0, 1.0, -0.1)
        with pytest.raises(ValueError):
            LossConfig(lam=-1.0)

    @pytest.mark.parametrize("with_contra", [False, True])
    def test_gradient_is_linear_in_terms(self, rng, with_contra):
        z_value = rng.standard_normal((4, 3))
        aug_value = z_value + 0.1 * rng.standard_normal((4, 3))
        logits_value = rng.standard_normal((4, 5))
        labels = [0, 1, 2, 3]
        lam = 0.5

        def grads(build):
            z, logits = G.leaf(z_value), G.leaf(logits_value)
            return G.backward(build(z, logits), [z, logits])

        ce = lambda z, lg: ce_loss(lg, labels)
        pn = lambda z, lg: pn_loss(G.take_rows(z, [0, 1]), [1, 1], G.take_rows(z, [2, 3]), [1, 1])
        contra = lambda z, lg: contrastive_loss(normalize(z), normalize(aug_value), [2, 2])

        if with_contra:
            total = grads(lambda z, lg: combined_cpc(ce(z, lg), pn(z, lg), contra(z, lg), lam))
            parts = [grads(ce), grads(pn), grads(contra)]
            expected = [a + lam * (b + c) for a, b, c in zip(*parts)]
        else:
            total = grads(lambda z, lg: combined_cp(ce(z, lg), pn(z, lg), lam))
            parts = [grads(ce), grads(pn)]
            expected = [a + lam * b for a, b in zip(*parts)]
        for got, want in zip(total, expected):
            np.testing.assert_allclose(got, want, atol=1e-10)


class TestLossConfig:
    def test_metric_coerced_from_string(self):
        assert LossConfig(metric="cosine").metric is Metric.COSINE

    def test_unknown_metric_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(metric="manhattan")
