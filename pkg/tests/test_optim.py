import numpy as np
import numpy.testing as npt
import pytest

from hebb import layers as L
from hebb.errors import ConfigError, DimensionError
from hebb.optim import (
    Adam,
    EarlyStopConfig,
    EarlyStopping,
    LocalOptimizer,
    PlateauConfig,
    ReduceLROnPlateau,
)
from hebb.tensorcore import RngState


def adam_oracle(x0, grad_fn, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook transcription: scalar Adam with bias correction."""
    x = float(x0)
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x -= lr * m_hat / (v_hat ** 0.5 + eps)
    return x


class TestLocalOptimizer:
    def test_linear_decay_midpoint(self):
        opt = LocalOptimizer({"layer": 0.04}, 100)
        assert opt.lr("layer", 50) == pytest.approx(0.02)

    def test_lr_zero_at_final_epoch(self):
        opt = LocalOptimizer({"layer": 0.04}, 100)
        w = np.ones((2, 2))
        opt.step("layer", w, np.full((2, 2), 5.0), 100)
        npt.assert_array_equal(w, np.ones((2, 2)))

    def test_zero_delta_keeps_weights(self):
        opt = LocalOptimizer({"layer": 0.1}, 10)
        w = np.full((3,), 2.0)
        opt.step("layer", w, np.zeros(3), 0)
        npt.assert_array_equal(w, [2.0, 2.0, 2.0])

    def test_unregistered_layer(self):
        opt = LocalOptimizer({"a": 0.1}, 10)
        with pytest.raises(ConfigError, match="'b'"):
            opt.step("b", np.ones(2), np.ones(2), 0)

    def test_shape_mismatch(self):
        opt = LocalOptimizer({"a": 0.1}, 10)
        with pytest.raises(DimensionError):
            opt.step("a", np.ones(2), np.ones(3), 0)

    def test_only_named_layer_changes(self):
        a = L.linear("a", 3, 2, rng=RngState(0))
        b = L.linear("b", 3, 2, rng=RngState(1))
        before = b.params["weight"].tobytes()
        opt = LocalOptimizer({"a": 0.1, "b": 0.1}, 10)
        opt.step("a", a.params["weight"], np.ones((2, 3)), 0)
        assert b.params["weight"].tobytes() == before

    def test_lr_affine_in_epoch(self):
        opt = LocalOptimizer({"a": 0.08}, 40)
        values = [opt.lr("a", e) for e in range(41)]
        diffs = np.diff(values)
        npt.assert_allclose(diffs, diffs[0], atol=1e-15)
        assert values[-1] == 0.0


class TestAdam:
    def test_first_step_magnitude(self):
        # with a unit gradient the first step is lr/(1+eps)
        theta = np.array([1.0])
        adam = Adam({"x": theta}, lr=0.001)
        adam.step({"x": np.array([1.0])})
        assert theta[0] == pytest.approx(1.0 - 0.001, abs=1e-8)

    def test_zero_grads_fix_params(self):
        theta = np.array([3.0, -2.0])
        adam = Adam({"x": theta}, lr=0.01)
        for _ in range(10):
            adam.step({"x": np.zeros(2)})
        npt.assert_array_equal(theta, [3.0, -2.0])

    def test_five_steps_match_textbook_oracle(self):
        # quadratic loss 0.5*(x-3)^2, gradient x-3
        theta = np.array([0.0])
        adam = Adam({"x": theta}, lr=0.1)
        for _ in range(5):
            adam.step({"x": theta - 3.0})
        expected = adam_oracle(0.0, lambda x: x - 3.0, 0.1, 5)
        assert theta[0] == pytest.approx(expected, abs=1e-12)

    def test_sign_flip_symmetry(self):
        a = np.array([0.0])
        b = np.array([0.0])
        Adam({"x": a}, lr=0.05).step({"x": np.array([2.5])})
        Adam({"x": b}, lr=0.05).step({"x": np.array([-2.5])})
        assert abs(a[0]) == pytest.approx(abs(b[0]), abs=1e-15)


class TestReduceLROnPlateau:
    def test_improvement_keeps_lr(self):
        sched = ReduceLROnPlateau(PlateauConfig(patience=2))
        lr = sched.step(1.0, 0.1)
        lr = sched.step(0.9, lr)
        assert lr == 0.1

    def test_reduces_after_patience(self):
        # first call sets the best; reduction fires on the second stagnant call
        sched = ReduceLROnPlateau(PlateauConfig(factor=0.5, patience=2))
        lr = sched.step(1.0, 0.1)
        lr = sched.step(1.0, lr)
        assert lr == 0.1
        lr = sched.step(1.0, lr)
        assert lr == 0.05

    def test_floor_at_min_lr(self):
        sched = ReduceLROnPlateau(PlateauConfig(factor=0.1, patience=1,
                                                min_lr=0.01))
        lr = sched.step(1.0, 0.02)
        lr = sched.step(1.0, lr)
        assert lr == 0.01
        lr = sched.step(1.0, lr)
        assert lr == 0.01

    def test_sequence_non_increasing(self):
        rng = np.random.default_rng(0)
        sched = ReduceLROnPlateau(PlateauConfig(patience=3))
        lr = 1.0
        history = []
        for value in rng.uniform(0, 1, 100):
            lr = sched.step(float(value), lr)
            history.append(lr)
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_max_mode(self):
        sched = ReduceLROnPlateau(PlateauConfig(patience=1, mode="max"))
        lr = sched.step(0.5, 0.1)   # best = 0.5
        lr = sched.step(0.6, lr)    # improvement
        assert lr == 0.1
        lr = sched.step(0.6, lr)    # stagnant -> reduce
        assert lr == 0.05


class StubModel:
    def __init__(self):
        self.value = np.array([0.0])

    def snapshot(self):
        return {"value": self.value.copy()}

    def restore(self, snap):
        np.copyto(self.value, snap["value"])


class TestEarlyStopping:
    def test_never_stops_on_improvement(self):
        early = EarlyStopping(EarlyStopConfig(patience=2))
        model = StubModel()
        for value in [1.0, 0.9, 0.8, 0.7]:
            assert not early.step(value, model)

    def test_stops_after_patience_and_restores(self):
        early = EarlyStopping(EarlyStopConfig(patience=3))
        model = StubModel()
        model.value[0] = 42.0
        assert not early.step(1.0, model)   # best snapshot at 42
        model.value[0] = 7.0
        assert not early.step(1.0, model)   # stagnant 1
        assert not early.step(1.0, model)   # stagnant 2
        assert early.step(1.0, model)       # stagnant 3 -> stop
        assert model.value[0] == 42.0       # restored bit-exact

    def test_stop_flag_monotone(self):
        early = EarlyStopping(EarlyStopConfig(patience=1))
        model = StubModel()
        early.step(1.0, model)
        assert early.step(1.0, model)
        for value in [0.0, -1.0, -2.0]:
            assert early.step(value, model)  # once stopped, stays stopped

    def test_max_mode(self):
        early = EarlyStopping(EarlyStopConfig(patience=1, mode="max"))
        model = StubModel()
        assert not early.step(0.1, model)
        assert not early.step(0.2, model)
        assert early.step(0.2, model)
