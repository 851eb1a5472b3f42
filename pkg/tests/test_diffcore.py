import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from robustaug import diffcore as dc
from robustaug.diffcore import ParamSet, Tape, backprop, evaluate_graph, finite_diff_check, sgd_update
from robustaug.models import ModelSpec, build_model


def test_matmul_hand_value():
    tape = Tape()
    out = dc.matmul(tape.constant([[1, 2], [3, 4]]), tape.constant([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_relu_and_softmax_values():
    tape = Tape()
    np.testing.assert_array_equal(dc.relu(tape.constant([-1.0, 2.0])).data, [0.0, 2.0])
    np.testing.assert_allclose(dc.softmax(tape.constant([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)


def test_square_gradient():
    tape = Tape()
    x = tape.param("x", np.array(3.0))
    loss = x * x
    assert backprop(tape, loss)["x"] == pytest.approx(6.0)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    from robustaug.objectives import cross_entropy

    rng = np.random.default_rng(0)
    z = rng.normal(size=(1, 5))
    tape = Tape()
    logits = tape.param("z", z)
    loss = cross_entropy(dc.softmax(logits), np.array([2]))
    grad = backprop(tape, loss)["z"]
    s = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    onehot = np.eye(5)[[2]]
    np.testing.assert_allclose(grad, s - onehot, atol=1e-14)


def test_backprop_rejects_non_scalar():
    tape = Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        backprop(tape, x * 2.0)


def test_unused_parameter_gets_zero_gradient():
    tape = Tape()
    x = tape.param("x", np.array([1.0, 2.0]))
    tape.param("unused", np.ones((2, 2)))
    grads = backprop(tape, dc.sum(x * x))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_shape_mismatch_names_layer():
    model = build_model(ModelSpec("mlp", (28, 28, 1), 10))
    with pytest.raises(dc.GraphShapeError, match="fc1"):
        evaluate_graph(model.graph, model.params.params, np.zeros((2, 27, 28, 1)))


class TestSGD:
    def test_plain_step(self):
        ps = ParamSet({"w": np.array([1.0])})
        sgd_update(ps, {"w": np.array([1.0])}, lr=0.1, momentum=0.0)
        assert ps.params["w"][0] == pytest.approx(0.9)

    def test_momentum_two_steps(self):
        ps = ParamSet({"w": np.array([1.0])})
        for _ in range(2):
            sgd_update(ps, {"w": np.array([1.0])}, lr=0.1, momentum=0.9)
        assert ps.momentum["w"][0] == pytest.approx(1.9)
        assert ps.params["w"][0] == pytest.approx(0.71)

    def test_zero_gradient_is_noop(self):
        ps = ParamSet({"w": np.array([0.3, -2.0])})
        sgd_update(ps, {"w": np.zeros(2)}, lr=0.5, momentum=0.9)
        np.testing.assert_array_equal(ps.params["w"], [0.3, -2.0])

    def test_non_finite_gradient_names_parameter(self):
        ps = ParamSet({"w": np.zeros(2), "b": np.zeros(1)})
        with pytest.raises(dc.NonFiniteError, match="'b'"):
            sgd_update(ps, {"w": np.zeros(2), "b": np.array([np.nan])}, lr=0.1)

    @given(hnp.arrays(np.float64, 5, elements=st.floats(-10, 10)),
           hnp.arrays(np.float64, 5, elements=st.floats(-10, 10)))
    def test_zero_lr_is_identity(self, w, g):
        ps = ParamSet({"w": w.copy()})
        sgd_update(ps, {"w": g}, lr=0.0, momentum=0.5)
        np.testing.assert_array_equal(ps.params["w"], w)


def _mlp_loss(model, batch=4):
    from robustaug.objectives import cross_entropy

    h, w, c = model.spec.input_shape

    def loss_fn(tape, params, rng):
        x = rng.uniform(0, 1, size=(batch, h, w, c))
        y = rng.integers(0, model.spec.num_classes, size=batch)
        logits, _ = evaluate_graph(model.graph, params, x, tape)
        return cross_entropy(dc.softmax(logits), y)

    return loss_fn


class TestFiniteDifferences:
    def test_quadratic_is_exact(self):
        a = np.random.default_rng(1).normal(size=(6,))

        def loss_fn(tape, params, rng):
            x = tape.param("x", params["x"])
            d = x - tape.constant(a)
            return dc.sum(d * d)

        err = finite_diff_check(loss_fn, {"x": np.zeros(6)}, seed=0)
        assert err < 1e-10

    def test_mlp_784_128_10(self):
        model = build_model(ModelSpec("mlp", (28, 28, 1), 10, seed=3))
        err = finite_diff_check(_mlp_loss(model), model.params.params, seed=0, n_probe=100)
        assert err < 1e-6

    def test_lenet(self):
        model = build_model(ModelSpec("lenet", (28, 28, 1), 10, seed=4))
        err = finite_diff_check(_mlp_loss(model, batch=1), model.params.params, seed=0, n_probe=100)
        assert err < 1e-5

    @pytest.mark.parametrize("prim", ["add", "sub", "mul", "softmax", "log", "mean",
                                      "l1", "sq_l2", "kl", "conv", "maxpool", "relu"])
    def test_each_primitive(self, prim):
        rng0 = np.random.default_rng(7)
        p0 = {"a": rng0.uniform(0.2, 1.0, size=(3, 4, 4, 2)), "b": rng0.uniform(0.2, 1.0, size=(3, 4, 4, 2))}
        w0 = rng0.normal(size=(2, 2, 2, 3))

        def loss_fn(tape, params, rng):
            a = tape.param("a", params["a"])
            b = tape.param("b", params["b"])
            c = tape.constant(rng.normal(size=(3, 4, 4, 2)))
            flat = lambda t: dc.flatten(t)  # noqa: E731
            if prim == "add":
                out = (a + b) * c
            elif prim == "sub":
                out = (a - b) * c
            elif prim == "mul":
                out = a * b * c
            elif prim == "softmax":
                return dc.sum(dc.softmax(flat(a)) * flat(c))
            elif prim == "log":
                out = dc.log(a) * c
            elif prim == "mean":
                return dc.mean(a * c) + dc.mean(dc.sum(flat(b), axis=1))
            elif prim == "l1":
                return dc.sum(dc.l1_distance(flat(a), flat(b)))
            elif prim == "sq_l2":
                return dc.sum(dc.sq_l2_distance(flat(a), flat(b)))
            elif prim == "kl":
                return dc.sum(dc.kl_rows(dc.softmax(flat(a)), dc.softmax(flat(b))))
            elif prim == "conv":
                out = dc.conv2d(a, tape.constant(w0), tape.constant(np.zeros(3)))
                return dc.sum(out * tape.constant(rng.normal(size=out.shape)))
            elif prim == "maxpool":
                out = dc.maxpool2(a * c)
                return dc.sum(out * out)
            else:
                out = dc.relu(a - b) * c
            return dc.sum(out)

        err = finite_diff_check(loss_fn, p0, seed=1)
        tol = 1e-10 if prim in ("add", "sub", "mul") else 1e-5
        assert err < tol


def test_evaluate_graph_is_pure():
    model = build_model(ModelSpec("lenet", (28, 28, 1), 10, seed=0))
    x = np.random.default_rng(0).uniform(size=(3, 28, 28, 1))
    a, _ = model.forward(x)
    b, _ = model.forward(x)
    assert a.data.tobytes() == b.data.tobytes()


@settings(max_examples=50)
@given(hnp.arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_positive_and_normalised(z):
    s = dc.softmax(Tape(grad_enabled=False).constant(z)).data
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


class TestKinkRejection:
    def _pool_loss(self, gap):
        def loss_fn(tape, params, rng):
            a = tape.param("a", params["a"])
            # two window entries that differ by ``gap`` along the probed coordinate
            x = dc.mul(a, tape.constant(np.array([1.0, -1.0, 0.0, 0.0]).reshape(1, 2, 2, 1)))
            return dc.sum(dc.maxpool2(dc.add(x, tape.constant(np.full((1, 2, 2, 1), gap)))))

        return loss_fn

    def test_flipped_max_pool_winner_is_rejected(self):
        # at a=1e-7 the winner changes inside the +-1e-5 stencil
        with pytest.raises(RuntimeError, match="kink-free"):
            finite_diff_check(self._pool_loss(0.0), {"a": np.full((1, 2, 2, 1), 1e-7)}, seed=0)

    def test_stable_max_pool_winner_is_accepted(self):
        err = finite_diff_check(self._pool_loss(0.0), {"a": np.full((1, 2, 2, 1), 0.5)}, seed=0)
        assert err < 1e-9

    def test_relu_near_zero_is_rejected(self):
        def loss_fn(tape, params, rng):
            return dc.sum(dc.relu(tape.param("a", params["a"])))

        with pytest.raises(RuntimeError):
            finite_diff_check(loss_fn, {"a": np.array([[5e-5, 1.0]])}, seed=0)
