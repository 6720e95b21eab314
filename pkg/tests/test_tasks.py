import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.errors import NonFiniteLossError, PartitionError
from fedsim.tasks import (Sample, apply_feature_shift,
                          linear_regression, logistic_regression, loss_and_grad,
                          make_classification_pool, make_regression_pool,
                          make_voxel_pool, mlp_1hidden, partition_iid,
                          partition_profile, soft_dice_loss, voxel_dice)


def finite_difference(model, w, batch, h=1e-6):
    """Central-difference gradient of the mean batch loss."""
    grad = np.zeros(w.dim)
    for i in range(w.dim):
        up = w.values.copy()
        dn = w.values.copy()
        up[i] += h
        dn[i] -= h
        lu, _ = loss_and_grad(model, w.with_values(up), batch)
        ld, _ = loss_and_grad(model, w.with_values(dn), batch)
        grad[i] = (lu - ld) / (2 * h)
    return grad


def rel_error(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-9)
    return np.abs(a - b).max() / scale


class TestLossAndGrad:
    def test_linear_zero_residual(self):
        m = linear_regression(1)
        w = m.zero_params()
        loss, grad = loss_and_grad(m, w, [Sample([1.0], [0.0])])
        assert loss == 0.0
        assert grad.values.tolist() == [0.0]

    def test_linear_hand_derivative(self):
        m = linear_regression(1)
        w = m.zero_params().with_values([1.0])
        loss, grad = loss_and_grad(m, w, [Sample([1.0], [0.0])])
        assert loss == pytest.approx(0.5, rel=1e-12)
        assert grad.values[0] == pytest.approx(1.0, rel=1e-12)

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_nan_input_names_sample(self):
        m = linear_regression(2)
        w = m.zero_params().with_values([1.0, 1.0])
        batch = [Sample([1.0, 1.0], [0.0]), Sample([1e300, 1e300], [0.0])]
        with pytest.raises(NonFiniteLossError) as err:
            loss_and_grad(m, w, batch)
        assert err.value.sample_index == 1

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            loss_and_grad(linear_regression(1), linear_regression(1).zero_params(), [])


MODELS = [
    ("linear", linear_regression(5),
     lambda rng: Sample(rng.normal(size=5), [rng.normal()])),
    ("logistic", logistic_regression(5),
     lambda rng: Sample(rng.normal(size=5), [float(rng.random() < 0.5)])),
    ("mlp", mlp_1hidden(4, hidden=3, n_outputs=2),
     lambda rng: Sample(rng.normal(size=4), rng.normal(size=2))),
    ("voxel", voxel_dice((3, 3, 3), voxel_features=3),
     lambda rng: Sample(rng.normal(size=(27, 3)),
                        (rng.random(27) < 0.4).astype(float))),
]


class TestGradientOracle:
    @pytest.mark.parametrize("name,model,sampler", MODELS,
                             ids=[m[0] for m in MODELS])
    def test_matches_central_differences(self, name, model, sampler):
        worst = 0.0
        for draw in range(20):
            rng = np.random.default_rng(1000 + draw)
            w = model.init_params(draw).with_values(
                model.init_params(draw).values + rng.normal(0, 0.3, model.dim))
            batch = [sampler(rng) for _ in range(3)]
            _, grad = loss_and_grad(model, w, batch)
            fd = finite_difference(model, w, batch)
            worst = max(worst, rel_error(grad.values, fd))
        assert worst < 1e-5


class TestSoftDiceLoss:
    def test_perfect_overlap(self):
        g = np.array([1.0, 0.0, 1.0])
        loss, _ = soft_dice_loss(g, g, eps=1.0)
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_empty_empty_scores_zero(self):
        z = np.zeros(5)
        loss, _ = soft_dice_loss(z, z, eps=1.0)
        assert loss == 0.0

    def test_disjoint(self):
        loss, _ = soft_dice_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0)
        assert loss == pytest.approx(2.0 / 3.0, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_dice_loss(np.zeros(3), np.zeros(4), 1.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        p = rng.random(12)
        g = (rng.random(12) < 0.5).astype(float)
        _, grad = soft_dice_loss(p, g, 1.0)
        fd = np.zeros_like(p)
        h = 1e-7
        for i in range(len(p)):
            up, dn = p.copy(), p.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (soft_dice_loss(up, g, 1.0)[0]
                     - soft_dice_loss(dn, g, 1.0)[0]) / (2 * h)
        assert rel_error(grad, fd) < 1e-5

    @given(st.integers(0, 2 ** 10 - 1), st.integers(0, 2 ** 10 - 1))
    @settings(max_examples=80, deadline=None)
    def test_bounded_and_zero_iff_equal(self, pbits, gbits):
        p = np.array([(pbits >> i) & 1 for i in range(10)], dtype=float)
        g = np.array([(gbits >> i) & 1 for i in range(10)], dtype=float)
        loss, _ = soft_dice_loss(p, g, 1.0)
        assert 0.0 <= loss <= 1.0
        assert (loss == pytest.approx(0.0, abs=1e-12)) == bool((p == g).all())


def tiny_pool(n):
    return [Sample([float(i)], [0.0], "a" if i % 2 else "b") for i in range(n)]


class TestPartitionIID:
    def test_even_split(self):
        parts = partition_iid(tiny_pool(10), 5, seed=0)
        assert [p.n_k for p in parts] == [2, 2, 2, 2, 2]

    def test_remainder_on_lowest_ids(self):
        parts = partition_iid(tiny_pool(11), 5, seed=0)
        assert [p.n_k for p in parts] == [3, 2, 2, 2, 2]
        assert [p.client_id for p in parts] == [1, 2, 3, 4, 5]

    def test_single_client(self):
        parts = partition_iid(tiny_pool(7), 1, seed=0)
        assert parts[0].n_k == 7

    def test_too_many_clients(self):
        with pytest.raises(PartitionError):
            partition_iid(tiny_pool(3), 4, seed=0)

    @pytest.mark.parametrize("n,m", [(10, 3), (23, 6), (9, 9)])
    def test_multiset_preserved(self, n, m):
        pool = tiny_pool(n)
        parts = partition_iid(pool, m, seed=3)
        got = sorted(s.x[0] for p in parts for s in p.samples)
        assert got == sorted(s.x[0] for s in pool)

    def test_reproducible(self):
        a = partition_iid(tiny_pool(20), 4, seed=9)
        b = partition_iid(tiny_pool(20), 4, seed=9)
        for pa, pb in zip(a, b):
            assert [s.x[0] for s in pa.samples] == [s.x[0] for s in pb.samples]


class TestPartitionProfile:
    def test_forced_class_selection(self):
        pool = ([Sample([0.0], [0.0], "a")] * 5 + [Sample([0.0], [0.0], "b")] * 5)
        parts = partition_profile(pool, [(1, 5, {"a": 5})], seed=0)
        assert parts[0].n_k == 5
        assert all(s.class_label == "a" for s in parts[0].samples)

    def test_limited_profile_totals(self):
        from fedsim.profiles import FETS2022_LIMITED, profile_total
        total = profile_total(FETS2022_LIMITED)
        assert total == 278
        counts = {"lgg": 0, "hgg": 0}
        for _, _, mix in FETS2022_LIMITED:
            for k, v in mix.items():
                counts[k] += v
        pool = make_classification_pool(total, 4, seed=1, class_counts=counts)
        parts = partition_profile(pool, FETS2022_LIMITED, seed=1)
        assert sum(p.n_k for p in parts) == 278
        assert len(parts) == 18
        sizes = sorted((p.n_k for p in parts), reverse=True)
        assert sizes[:4] == [35, 35, 35, 35]

    def test_sample_weights_by_size(self):
        pool = tiny_pool(100)
        parts = partition_profile(pool, [(1, 90, None), (2, 10, None)], seed=2)
        n = [p.n_k for p in parts]
        p_k = [v / sum(n) for v in n]
        assert p_k == [0.9, 0.1]

    def test_deficit_error_lists_class(self):
        pool = [Sample([0.0], [0.0], "a")] * 3
        with pytest.raises(PartitionError) as err:
            partition_profile(pool, [(1, 2, {"b": 2})], seed=0)
        assert err.value.deficits == [("b", 2)]

    def test_reproducible_and_disjoint(self):
        pool = make_classification_pool(60, 3, seed=4)
        rows = [(1, 20, None), (2, 15, None), (3, 25, None)]
        a = partition_profile(pool, rows, seed=5)
        b = partition_profile(pool, rows, seed=5)
        seen = set()
        for pa, pb in zip(a, b):
            keys_a = [tuple(s.x) for s in pa.samples]
            keys_b = [tuple(s.x) for s in pb.samples]
            assert keys_a == keys_b
            assert not (seen & set(keys_a))
            seen |= set(keys_a)
        assert len(seen) == 60


class TestGenerators:
    def test_feature_shift_moves_means(self):
        parts = partition_iid(make_regression_pool(40, 3, seed=1), 2, seed=1)
        shifted = apply_feature_shift(parts, scale=5.0, seed=1)
        for raw, moved in zip(parts, shifted):
            d = np.mean([m.x - r.x for r, m in zip(raw.samples, moved.samples)],
                        axis=0)
            assert np.linalg.norm(d) > 0.1
        again = apply_feature_shift(parts, scale=5.0, seed=1)
        np.testing.assert_array_equal(shifted[0].samples[0].x,
                                      again[0].samples[0].x)

    def test_voxel_pool_shapes(self):
        pool = make_voxel_pool(6, seed=2, grid_shape=(4, 4, 4), voxel_features=3)
        assert len(pool) == 6
        assert pool[0].x.shape == (64, 3)
        assert set(np.unique(pool[0].y)) <= {0.0, 1.0}

    def test_class_counts_exact(self):
        pool = make_classification_pool(50, 3, seed=0,
                                        class_counts={"hgg": 41, "lgg": 9})
        labels = [s.class_label for s in pool]
        assert labels.count("hgg") == 41 and labels.count("lgg") == 9
