import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.errors import (DimensionMismatchError, UnknownBlockError,
                           ZeroNormError)
from fedsim.params import (ClientUpdate, ParamVector, UpdateSet, combine,
                           cosine_similarity, load_params, masked_overwrite,
                           save_params)


def pv(*values, blocks=None):
    vals = np.asarray(values, dtype=float)
    if blocks is None:
        blocks = (("all", 0, len(vals)),)
    return ParamVector(vals, blocks)


class TestParamVector:
    def test_blocks_must_cover_contiguously(self):
        with pytest.raises(ValueError):
            ParamVector([1.0, 2.0, 3.0], (("a", 0, 2),))
        with pytest.raises(ValueError):
            ParamVector([1.0, 2.0], (("a", 0, 1), ("b", 0, 1)))
        with pytest.raises(ValueError):
            ParamVector([1.0, 2.0], (("a", 0, 1), ("a", 1, 1)))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            pv(1.0, np.nan)
        with pytest.raises(ValueError, match="non-finite"):
            pv(np.inf, 0.0)

    def test_values_are_immutable(self):
        v = pv(1.0, 2.0)
        with pytest.raises(ValueError):
            v.values[0] = 5.0

    def test_block_access(self):
        v = ParamVector([1, 2, 3, 4], (("a", 0, 2), ("b", 2, 2)))
        assert v.block_values("b").tolist() == [3.0, 4.0]
        with pytest.raises(UnknownBlockError):
            v.block_slice("nope")


class TestCombine:
    def test_identity(self):
        assert combine([1.0], [pv(3.0, -2.0)]).values.tolist() == [3.0, -2.0]

    def test_halves(self):
        got = combine([0.5, 0.5], [pv(1.0, 1.0), pv(3.0, 3.0)])
        assert got.values.tolist() == [2.0, 2.0]

    def test_quarters(self):
        got = combine([0.75, 0.25], [pv(4.0), pv(-4.0)])
        assert got.values.tolist() == [2.0]

    def test_dimension_mismatch_names_index(self):
        with pytest.raises(DimensionMismatchError) as err:
            combine([0.5, 0.5], [pv(1.0), pv(1.0, 2.0)])
        assert err.value.index == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            combine([], [])

    @given(st.floats(-100, 100), st.lists(
        st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_linearity_in_weights(self, alpha, values):
        v = pv(*values)
        lhs = combine([alpha], [v]).values
        rhs = alpha * combine([1.0], [v]).values
        np.testing.assert_array_equal(lhs, rhs)


class TestCosineSimilarity:
    def test_self_similarity(self):
        assert cosine_similarity(pv(1.0, 2.0), pv(1.0, 2.0)) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity(pv(1.0, 0.0), pv(0.0, 1.0)) == 0.0

    def test_antiparallel(self):
        assert cosine_similarity(pv(2.0, 0.0), pv(-1.0, 0.0)) == pytest.approx(-1.0)

    def test_zero_norm_raises(self):
        with pytest.raises(ZeroNormError):
            cosine_similarity(pv(0.0, 0.0), pv(1.0, 0.0), client_id=9)

    @given(st.floats(1e-3, 1e3),
           st.lists(st.floats(-100, 100), min_size=2, max_size=6),
           st.lists(st.floats(-100, 100), min_size=2, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_positive_scale_invariance(self, lam, a, b):
        n = min(len(a), len(b))
        u, v = pv(*a[:n]), pv(*b[:n])
        if np.linalg.norm(u.values) == 0 or np.linalg.norm(v.values) == 0:
            return
        assert cosine_similarity(u.scaled(lam), v) == pytest.approx(
            cosine_similarity(u, v), abs=1e-12)


class TestMaskedOverwrite:
    BLOCKS = (("a", 0, 2), ("b", 2, 2))

    def test_full_sharing_equals_source(self):
        t = ParamVector([0, 0, 0, 0], self.BLOCKS)
        s = ParamVector([1, 1, 2, 2], self.BLOCKS)
        got = masked_overwrite(t, s, {"a", "b"})
        np.testing.assert_array_equal(got.values, s.values)

    def test_no_sharing_equals_target(self):
        t = ParamVector([0, 0, 0, 0], self.BLOCKS)
        s = ParamVector([1, 1, 2, 2], self.BLOCKS)
        got = masked_overwrite(t, s, set())
        np.testing.assert_array_equal(got.values, t.values)

    def test_partial(self):
        t = ParamVector([0, 0, 0, 0], self.BLOCKS)
        s = ParamVector([1, 1, 2, 2], self.BLOCKS)
        got = masked_overwrite(t, s, {"b"})
        assert got.values.tolist() == [0.0, 0.0, 2.0, 2.0]

    def test_idempotent(self):
        t = ParamVector([0, 1, 2, 3], self.BLOCKS)
        s = ParamVector([9, 8, 7, 6], self.BLOCKS)
        once = masked_overwrite(t, s, {"a"})
        twice = masked_overwrite(once, s, {"a"})
        np.testing.assert_array_equal(once.values, twice.values)

    def test_unknown_block(self):
        t = ParamVector([0, 0, 0, 0], self.BLOCKS)
        with pytest.raises(UnknownBlockError):
            masked_overwrite(t, t, {"zzz"})


class TestUpdateSet:
    def test_sorts_by_client_id(self):
        u = UpdateSet(
            (ClientUpdate(3, pv(1.0), 1), ClientUpdate(1, pv(2.0), 1)),
            (0.25, 0.75))
        assert u.client_ids == (1, 3)
        assert u.weights == (0.75, 0.25)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum"):
            UpdateSet((ClientUpdate(1, pv(1.0), 1),), (0.9,))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            UpdateSet((ClientUpdate(1, pv(1.0), 1),
                       ClientUpdate(2, pv(1.0), 1)), (1.5, -0.5))

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            UpdateSet((ClientUpdate(1, pv(1.0), 1),
                       ClientUpdate(1, pv(2.0), 1)), (0.5, 0.5))

    def test_mismatched_delta_shapes_rejected(self):
        with pytest.raises(DimensionMismatchError):
            UpdateSet((ClientUpdate(1, pv(1.0), 1),
                       ClientUpdate(2, pv(1.0, 2.0), 1)), (0.5, 0.5))

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError):
            ClientUpdate(1, pv(1.0), 0)


class TestCheckpointFiles:
    def test_round_trip(self, tmp_path):
        v = ParamVector(np.linspace(-3, 3, 7), (("w", 0, 4), ("b", 4, 3)))
        path = tmp_path / "model.params"
        save_params(path, v)
        back = load_params(path)
        assert back.blocks == v.blocks
        np.testing.assert_array_equal(back.values, v.values)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.params"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="parameter file"):
            load_params(path)
