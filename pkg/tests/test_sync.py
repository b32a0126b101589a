import math

import numpy as np
import pytest
import torch

from pcavs.errors import DegenerateInputError, InvalidArgumentError
from pcavs.models import ContrastiveBatch
from pcavs.sync import cosine_similarity, info_nce, retrieval_hits, sync_loss


def _batch(pv, pa, neg_a, neg_v) -> ContrastiveBatch:
    t = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731
    return ContrastiveBatch(
        positive_visual=t(pv), positive_audio=t(pa), negative_audios=t(neg_a), negative_visuals=t(neg_v)
    )


# --- cosine_similarity ---

class TestCosine:
    def test_known_value(self):
        assert float(cosine_similarity([1.0, 0.0], [1.0, 1.0])) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_range_and_symmetry(self):
        gen = torch.Generator().manual_seed(0)
        a = torch.randn(50, 8, generator=gen, dtype=torch.float64)
        b = torch.randn(50, 8, generator=gen, dtype=torch.float64)
        s = cosine_similarity(a, b)
        assert bool((s.abs() <= 1 + 1e-12).all())
        torch.testing.assert_close(s, cosine_similarity(b, a))

    def test_broadcasts_against_negatives(self):
        a = torch.ones(4, 1, 3)
        b = torch.ones(4, 5, 3)
        assert cosine_similarity(a, b).shape == (4, 5)

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])


# --- info_nce ---

class TestInfoNCE:
    @pytest.mark.parametrize("pos,neg,expected", [
        (1.0, [0.0], 0.31326168751822286),
        (0.0, [0.0], math.log(2)),
        (0.0, [0.0, 0.0, 0.0], math.log(4)),
    ])
    def test_known_values(self, pos, neg, expected):
        assert float(info_nce(pos, neg)) == pytest.approx(expected, abs=1e-6)

    def test_non_negative_and_decreasing_in_positive(self):
        neg = torch.tensor([0.2, -0.5, 0.9], dtype=torch.float64)
        losses = [float(info_nce(p, neg)) for p in (-1.0, 0.0, 0.5, 1.0)]
        assert all(v >= 0 for v in losses)
        assert losses == sorted(losses, reverse=True)

    def test_stable_for_large_scores(self):
        v = float(info_nce(1000.0, [999.0, -1000.0]))
        assert math.isfinite(v)
        assert v == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-9)

    def test_temperature_scales_logits(self):
        assert float(info_nce(1.0, [0.0], temperature=0.5)) == pytest.approx(math.log1p(math.exp(-2.0)))

    @pytest.mark.parametrize("temperature", [0.2, 1.0])
    def test_gradient_matches_finite_differences(self, temperature):
        gen = torch.Generator().manual_seed(4)
        pos = (torch.rand(5, generator=gen, dtype=torch.float64) * 2 - 1).requires_grad_()
        neg = (torch.rand(5, 6, generator=gen, dtype=torch.float64) * 2 - 1).requires_grad_()
        assert torch.autograd.gradcheck(
            lambda p, n: info_nce(p, n, temperature), (pos, neg), eps=1e-6, atol=1e-6, rtol=1e-4
        )

    def test_matches_scalar_formula(self):
        rng = np.random.default_rng(21)
        for _ in range(1000):
            n = int(rng.integers(1, 17))
            tau = float(rng.choice([0.1, 0.5, 1.0]))
            pos = float(rng.uniform(-1, 1))
            neg = rng.uniform(-1, 1, size=n)
            expected = -math.log(math.exp(pos / tau) / (math.exp(pos / tau) + sum(math.exp(v / tau) for v in neg)))
            assert float(info_nce(pos, neg, tau)) == pytest.approx(expected, rel=1e-9, abs=1e-12)

    def test_empty_negatives_rejected(self):
        with pytest.raises(InvalidArgumentError):
            info_nce(1.0, torch.empty(0))

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            info_nce(float("nan"), [0.0])


# --- sync_loss ---

class TestSyncLoss:
    def test_orthogonal_negatives(self):
        batch = _batch([[1.0, 0.0]], [[1.0, 0.0]], [[[0.0, 1.0]]], [[[0.0, 1.0]]])
        total, v2a, a2v = sync_loss(batch)
        assert float(total) == pytest.approx(0.62652, abs=1e-5)
        assert float(v2a) == pytest.approx(float(a2v))

    @pytest.mark.parametrize("n", [1, 3, 7])
    def test_negatives_equal_positive(self, n):
        row = [0.6, 0.8]
        batch = _batch([row], [row], [[row] * n], [[row] * n])
        total, _, _ = sync_loss(batch)
        assert float(total) == pytest.approx(2 * math.log(n + 1), abs=1e-9)

    def test_total_is_sum_of_directions(self):
        gen = torch.Generator().manual_seed(1)
        batch = ContrastiveBatch(
            positive_visual=torch.randn(6, 4, generator=gen),
            positive_audio=torch.randn(6, 4, generator=gen),
            negative_audios=torch.randn(6, 3, 4, generator=gen),
            negative_visuals=torch.randn(6, 3, 4, generator=gen),
        )
        total, v2a, a2v = sync_loss(batch)
        torch.testing.assert_close(total, v2a + a2v)

    @pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e4])
    def test_invariant_to_feature_scale(self, scale):
        gen = torch.Generator().manual_seed(2)
        shapes = ((5, 8), (5, 8), (5, 4, 8), (5, 4, 8))
        parts = [torch.randn(*shape, generator=gen, dtype=torch.float64) for shape in shapes]
        base = sync_loss(ContrastiveBatch(*parts))
        scaled = sync_loss(ContrastiveBatch(*(scale * p for p in parts)))
        for a, b in zip(base, scaled):
            torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-12)

    def test_batch_without_negatives_rejected(self):
        with pytest.raises(InvalidArgumentError):
            _batch([[1.0, 0.0]], [[1.0, 0.0]], [[]], [[]])

    def test_retrieval_hits(self):
        batch = _batch(
            [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 0.0]],
            [[[0.0, 1.0]], [[0.0, 1.0]]], [[[0.0, 1.0]], [[0.0, 1.0]]],
        )
        v2a, a2v = retrieval_hits(batch)
        assert v2a.tolist() == [True, False]
        assert a2v.tolist() == [True, False]
