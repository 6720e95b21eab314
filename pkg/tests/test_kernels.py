import numpy as np
import pytest

from fedsim import tasks
from fedsim.kernels import available_backends, fallback, get_backend

pytestmark = pytest.mark.skipif(
    "compiled" not in available_backends(),
    reason="compiled kernels not built")


def stacked(samples):
    X = np.stack([s.x.reshape(-1) for s in samples])
    Y = np.stack([np.atleast_1d(s.y).reshape(-1) for s in samples])
    return X, Y


def cases():
    rng = np.random.default_rng(0)
    lin = tasks.linear_regression(6)
    log = tasks.logistic_regression(6)
    mlp = tasks.mlp_1hidden(5, hidden=4, n_outputs=2)
    vox = tasks.voxel_dice((4, 4, 4), voxel_features=3)
    out = []
    out.append((lin, *stacked(tasks.make_regression_pool(14, 6, 1))))
    out.append((log, *stacked(tasks.make_classification_pool(14, 6, 1))))
    out.append((mlp, rng.normal(size=(14, 5)), rng.normal(size=(14, 2))))
    out.append((vox, *stacked(tasks.make_voxel_pool(10, 2, (4, 4, 4), 3))))
    return out


@pytest.mark.parametrize("model,X,Y", cases(),
                         ids=["linear", "logistic", "mlp", "voxel"])
class TestBackendParity:
    def test_batch_grad(self, model, X, Y):
        comp = get_backend("compiled")
        w = model.init_params(3).values
        l1, g1 = fallback.batch_grad(model.kind_id, model.kernel_dims, w, X, Y,
                                     model.dice_eps)
        l2, g2 = comp.batch_grad(model.kind_id, model.kernel_dims, w, X, Y,
                                 model.dice_eps)
        assert l1 == pytest.approx(l2, rel=1e-12, abs=1e-15)
        np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)

    def test_eval_losses(self, model, X, Y):
        comp = get_backend("compiled")
        w = model.init_params(4).values
        e1 = fallback.eval_losses(model.kind_id, model.kernel_dims, w, X, Y,
                                  model.dice_eps)
        e2 = comp.eval_losses(model.kind_id, model.kernel_dims, w, X, Y,
                              model.dice_eps)
        np.testing.assert_allclose(e1, e2, rtol=1e-12, atol=1e-15)

    def test_sgd_trajectory(self, model, X, Y):
        comp = get_backend("compiled")
        w = model.init_params(5).values
        n = X.shape[0]
        rng = np.random.default_rng(9)
        idx = np.concatenate([rng.permutation(n) for _ in range(4)]).astype(np.int64)
        offsets = np.arange(0, len(idx) + 1, 4, dtype=np.int64)
        if offsets[-1] != len(idx):
            offsets = np.append(offsets, len(idx)).astype(np.int64)
        etas = 0.05 * 0.99 ** np.arange(len(offsets) - 1)
        anchor = model.init_params(6).values
        corr = 0.01 * model.init_params(7).values
        for lam, anc, cor in [(0.0, None, None), (0.5, anchor, None),
                              (0.0, None, corr), (0.3, anchor, corr)]:
            w1, l1 = fallback.sgd_run(model.kind_id, model.kernel_dims, w, X, Y,
                                      idx, offsets, etas, 1e-4, lam, anc, cor,
                                      model.dice_eps)
            w2, l2 = comp.sgd_run(model.kind_id, model.kernel_dims, w, X, Y,
                                  idx, offsets, etas, 1e-4, lam, anc, cor,
                                  model.dice_eps)
            np.testing.assert_allclose(w1, w2, rtol=1e-10, atol=1e-13)
            np.testing.assert_allclose(l1, l2, rtol=1e-10, atol=1e-13)


class TestBackendSelection:
    def test_backend_names(self):
        assert fallback.BACKEND == "python"
        assert get_backend("compiled").BACKEND == "compiled"
        with pytest.raises(ValueError):
            get_backend("gpu")
