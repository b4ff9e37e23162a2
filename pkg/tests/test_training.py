import numpy as np
import pytest

from salinst.tensor import Tensor
from salinst.training import clip_gradients


def _params(grads):
    out = {}
    for i, g in enumerate(grads):
        t = Tensor(np.zeros((1, 1, 1, len(g))), requires_grad=True)
        t.grad = np.array(g, dtype=float).reshape(1, 1, 1, -1)
        out[f"p{i}"] = t
    return out


class TestClipGradients:
    def test_below_ceiling_untouched(self):
        params = _params([[3.0, 0.0], [0.0, 4.0]])   # global norm 5
        norm = clip_gradients(params, 10.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_array_equal(params["p0"].grad.reshape(-1), [3.0, 0.0])

    def test_above_ceiling_rescaled_to_max_norm(self):
        params = _params([[30.0, 0.0], [0.0, 40.0]])   # global norm 50
        norm = clip_gradients(params, 5.0)
        assert norm == pytest.approx(50.0)
        clipped = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params.values()))
        assert clipped == pytest.approx(5.0)
        # direction preserved
        assert params["p0"].grad.reshape(-1)[0] == pytest.approx(3.0)
        assert params["p1"].grad.reshape(-1)[1] == pytest.approx(4.0)

    def test_zero_ceiling_disables(self):
        params = _params([[30.0, 40.0]])
        clip_gradients(params, 0.0)
        np.testing.assert_array_equal(params["p0"].grad.reshape(-1), [30.0, 40.0])

    def test_missing_grads_ignored(self):
        params = _params([[3.0, 4.0]])
        params["empty"] = Tensor(np.zeros((1, 1, 1, 2)), requires_grad=True)
        assert clip_gradients(params, 1.0) == pytest.approx(5.0)
