import numpy as np
import pytest

from reroute import ops
from reroute.controller import CnnController, RnnController
from reroute.errors import ConfigError
from reroute.gradcheck import check_gradients
from reroute.tensor import ShapeError, Tensor


def zero_params(module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


class TestCnnController:
    def test_zero_weights_give_uniform_scores(self, rng, f64):
        ctrl = CnnController(8, n_options=6, max_iterations=5, rng=rng)
        zero_params(ctrl)
        logits = ctrl.score(Tensor(rng.standard_normal((4, 8, 6, 6))), 0)
        assert np.abs(logits.data).max() == 0.0
        w = ops.softmax(logits).data
        np.testing.assert_allclose(w, 1 / 6, atol=1e-7)

    def test_output_shape(self, rng):
        ctrl = CnnController(16, n_options=6, max_iterations=5, rng=rng)
        logits = ctrl.score(Tensor(rng.standard_normal((4, 16, 8, 8)).astype(np.float32)), 2)
        assert logits.shape == (4, 6)

    def test_distinct_iterations_update_distinct_bn_slots(self, rng, f64):
        ctrl = CnnController(8, n_options=3, max_iterations=4, rng=rng)
        x = Tensor(rng.standard_normal((6, 8, 5, 5)) + 1.0)
        before = {j: ctrl.bn.slots[j]._buffers["running_mean"].copy() for j in range(4)}
        ctrl.score(x, 1)
        after = {j: ctrl.bn.slots[j]._buffers["running_mean"].copy() for j in range(4)}
        assert not np.array_equal(before[1], after[1])
        for j in (0, 2, 3):
            np.testing.assert_array_equal(before[j], after[j])

    def test_iteration_overflow_rejected(self, rng):
        ctrl = CnnController(8, n_options=3, max_iterations=2, rng=rng)
        with pytest.raises(ConfigError, match="iteration"):
            ctrl.score(Tensor(np.zeros((1, 8, 4, 4), np.float32)), 2)

    def test_gradients_flow_to_params_and_input(self, rng, f64):
        ctrl = CnnController(4, n_options=3, max_iterations=2, rng=rng)
        x = Tensor(rng.standard_normal((3, 4, 5, 5)), requires_grad=True)
        v = Tensor(rng.standard_normal((3, 3)))

        def f():
            return ops.sum_(ops.mul(ctrl.score(x, 1), v))

        params = [x] + ctrl.parameters()
        assert check_gradients(f, params, max_entries_per_param=40) < 1e-4


class TestRnnController:
    def test_zero_parameters_give_uniform(self, rng, f64):
        ctrl = RnnController(8, n_options=4, hidden=6, rng=rng)
        zero_params(ctrl)
        st = ctrl.init_state(3, np.float64)
        logits, st2 = ctrl.score(Tensor(rng.standard_normal((3, 8, 4, 4))), st)
        assert np.abs(logits.data).max() == 0.0
        assert st2.iteration == 1

    def test_state_changes_scores_for_identical_inputs(self, rng, f64):
        ctrl = RnnController(8, n_options=4, hidden=6, rng=rng)
        x = Tensor(rng.standard_normal((2, 8, 4, 4)))
        st0 = ctrl.init_state(2, np.float64)
        logits1, st1 = ctrl.score(x, st0)
        logits2, _ = ctrl.score(x, st1)
        assert np.abs(logits1.data - logits2.data).max() > 1e-8

    def test_fresh_state_is_deterministic(self, rng, f64):
        ctrl = RnnController(8, n_options=4, hidden=6, rng=rng)
        x = Tensor(rng.standard_normal((2, 8, 4, 4)))
        a, _ = ctrl.score(x, ctrl.init_state(2, np.float64))
        b, _ = ctrl.score(x, ctrl.init_state(2, np.float64))
        np.testing.assert_array_equal(a.data, b.data)

    def test_reset_state_zeroes_carry(self, rng):
        ctrl = RnnController(8, n_options=4, hidden=6, rng=rng)
        st = ctrl.init_state(5, np.float32)
        assert np.all(st.h.data == 0) and np.all(st.c.data == 0) and st.iteration == 0

    def test_batch_mismatch_raises(self, rng):
        ctrl = RnnController(8, n_options=4, hidden=6, rng=rng)
        st = ctrl.init_state(3, np.float32)
        with pytest.raises(ShapeError, match="batch"):
            ctrl.score(Tensor(np.zeros((2, 8, 4, 4), np.float32)), st)

    def test_gradients(self, rng, f64):
        ctrl = RnnController(4, n_options=3, hidden=5, rng=rng)
        x = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
        v = Tensor(rng.standard_normal((2, 3)))

        def f():
            logits, _ = ctrl.score(x, ctrl.init_state(2, np.float64))
            return ops.sum_(ops.mul(logits, v))

        assert check_gradients(f, [x] + ctrl.parameters(), max_entries_per_param=40) < 1e-4
