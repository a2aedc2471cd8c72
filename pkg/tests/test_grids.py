import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcf import DataError, EmbeddingGrid, FeatureGrid, gap, pairwise_dot, stable_softmax

from conftest import random_embedding, random_grid


def scalar_gap(grid: FeatureGrid) -> np.ndarray:
    """Reference loop: per-channel sum over cells divided by the cell count."""
    out = np.zeros(grid.channels, dtype=np.float64)
    for i in range(grid.num_cells):
        for ch in range(grid.channels):
            out[ch] += float(grid.data[i, ch])
    return out / grid.num_cells


def scalar_pairwise_dot(query, distractors) -> np.ndarray:
    hw = query.num_cells
    out = np.zeros((hw, len(distractors) * hw), dtype=np.float64)
    for i in range(hw):
        for m, other in enumerate(distractors):
            for j in range(hw):
                acc = 0.0
                for ch in range(query.channels):
                    acc += float(query.data[i, ch]) * float(other.data[j, ch])
                out[i, m * hw + j] = acc
    return out


class TestFeatureGrid:
    def test_rejects_wrong_length(self):
        with pytest.raises(DataError):
            FeatureGrid(2, 2, 3, np.zeros((3, 3), dtype=np.float32))

    def test_rejects_nan(self):
        data = np.zeros((4, 3), dtype=np.float32)
        data[1, 1] = np.nan
        with pytest.raises(DataError):
            FeatureGrid(2, 2, 3, data)

    def test_equality_is_bitwise(self):
        rng = np.random.default_rng(0)
        g = random_grid(rng)
        same = FeatureGrid(g.height, g.width, g.channels, g.data.copy())
        assert g == same
        bumped = g.data.copy()
        bumped[0, 0] += 1e-6
        assert g != FeatureGrid(g.height, g.width, g.channels, bumped)


class TestEmbeddingGrid:
    def test_rejects_unnormalized_rows(self):
        with pytest.raises(DataError):
            EmbeddingGrid(1, 2, 3, np.full((2, 3), 2.0, dtype=np.float32))

    def test_normalized_repairs_rows(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(6, 4)) * 3.0
        grid = EmbeddingGrid.normalized(2, 3, raw)
        norms = np.linalg.norm(grid.data.astype(np.float64), axis=1)
        assert np.abs(norms - 1).max() < 1e-4

    def test_normalized_rejects_zero_rows(self):
        raw = np.ones((4, 3))
        raw[2] = 0.0
        with pytest.raises(DataError):
            EmbeddingGrid.normalized(2, 2, raw)


class TestGap:
    def test_constant_grid(self):
        grid = FeatureGrid(7, 7, 4, np.ones((49, 4), dtype=np.float32))
        assert np.allclose(gap(grid), [1, 1, 1, 1])

    def test_two_cell_mean(self):
        grid = FeatureGrid(2, 1, 1, np.array([[2.0], [4.0]], dtype=np.float32))
        assert gap(grid) == pytest.approx([3.0])

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(2)
        grid = random_grid(rng, 4, 4, 8)
        assert np.abs(gap(grid) - scalar_gap(grid)).max() < 1e-6

    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        a = random_grid(rng, 3, 3, 5)
        b = random_grid(rng, 3, 3, 5)
        mixed = FeatureGrid(3, 3, 5, (alpha * a.data + beta * b.data).astype(np.float32))
        expected = alpha * gap(a).astype(np.float64) + beta * gap(b).astype(np.float64)
        assert np.abs(gap(mixed) - expected).max() < 1e-5


class TestStableSoftmax:
    def test_symmetry(self):
        assert stable_softmax([0.0, 0.0], 1.0) == pytest.approx([0.5, 0.5])

    def test_closed_form_low_temperature(self):
        # exp(10) / (exp(10) + 1) evaluated directly
        expected = math.exp(10) / (math.exp(10) + 1)
        out = stable_softmax([1.0, 0.0], 0.1)
        assert out[0] == pytest.approx(expected, rel=1e-12)
        assert out[0] == pytest.approx(0.9999546021312976, rel=1e-12)

    def test_huge_logits_stay_finite(self):
        out = stable_softmax([1000.0, 0.0], 1.0)
        assert np.isfinite(out).all()
        assert out == pytest.approx([1.0, 0.0])

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ValueError):
            stable_softmax([1.0, 2.0], 0.0)
        with pytest.raises(ValueError):
            stable_softmax([1.0, 2.0], -0.5)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-20, 20))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, logits, shift):
        base = stable_softmax(logits, 1.0)
        shifted = stable_softmax([v + shift for v in logits], 1.0)
        assert np.abs(base - shifted).max() < 1e-6

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one(self, logits):
        assert stable_softmax(logits, 0.7).sum() == pytest.approx(1.0, abs=1e-6)


class TestPairwiseDot:
    def test_identical_unit_rows(self):
        row = np.zeros(4)
        row[0] = 1.0
        grid = EmbeddingGrid.normalized(2, 2, np.tile(row, (4, 1)))
        out = pairwise_dot(grid, [grid])
        assert np.allclose(out, 1.0)

    def test_orthogonal_one_hot_rows(self):
        grid = EmbeddingGrid.normalized(2, 2, np.eye(4))
        out = pairwise_dot(grid, [grid])
        assert np.allclose(out, np.eye(4))

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(3)
        q = random_embedding(rng, 3, 3, 16)
        ds = [random_embedding(rng, 3, 3, 16) for _ in range(2)]
        assert np.abs(pairwise_dot(q, ds) - scalar_pairwise_dot(q, ds)).max() < 1e-6

    def test_rejects_channel_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(DataError):
            pairwise_dot(random_embedding(rng, 2, 2, 4), [random_embedding(rng, 2, 2, 5)])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_unit_rows_bound_entries(self, seed):
        rng = np.random.default_rng(seed)
        q = random_embedding(rng, 2, 3, 7)
        ds = [random_embedding(rng, 2, 3, 7) for _ in range(2)]
        out = pairwise_dot(q, ds)
        assert out.min() >= -1 - 1e-4
        assert out.max() <= 1 + 1e-4
