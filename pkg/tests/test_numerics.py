import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from presto import _kernels
from presto.numerics import (
    Adam, AdamState, NonFiniteError, SeededStream, ShapeError, Tensor, adam_update,
    check_gradients, gaussian_draw, no_grad, relative_error, stop_gradient,
)
from presto.numerics import tensor as T


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_square_grad():
    x = leaf(3.0)
    y = x * x
    y.backward()
    assert y.item() == 9.0
    assert x.grad == 6.0


def test_product_rule():
    x, y = leaf(2.0), leaf(5.0)
    (x * y).backward()
    assert (x.grad, y.grad) == (5.0, 2.0)


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = {"w1": leaf(rng.standard_normal((8, 8)) * 0.5), "b1": leaf(rng.standard_normal(8) * 0.1),
              "w2": leaf(rng.standard_normal((8, 1)) * 0.5), "b2": leaf(np.zeros(1))}
    x = rng.standard_normal((5, 8))

    def loss():
        h = T.tanh(T.linear(x, params["w1"], params["b1"]))
        return T.linear(h, params["w2"], params["b2"]).sum()

    a, n = check_gradients(loss, params, 200, rng)
    assert relative_error(a, n).max() < 1e-4


def _primitive_loss(p, x):
    h = T.layer_norm(T.linear(x, p["w"], p["b"]))
    a = T.softmax(T.matmul(h, T.transpose(h, (1, 0))), axis=-1)
    s = T.sinusoidal(T.reshape(p["s"], (3,)), np.array([1.0, 2.0]))
    z = T.silu(T.matmul(a, h)) + T.sigmoid(h) * T.exp(h * 0.1) - T.log(T.softplus(h) + 1.0)
    z = T.concat([z, s], axis=1) / 3.0 - z.mean() * 2.0
    return (T.take_rows(p["emb"], np.array([0, 2, 1])) * z[:, :4]).sum() + T.tsum(z * z, axis=1).mean()


def test_every_primitive_gradchecks():
    rng = np.random.default_rng(1)
    p = {"w": leaf(rng.standard_normal((4, 4)) * 0.5), "b": leaf(rng.standard_normal(4) * 0.1),
         "s": leaf(rng.standard_normal(3)), "emb": leaf(rng.standard_normal((3, 4)))}
    x = rng.standard_normal((3, 4))
    a, n = check_gradients(lambda: _primitive_loss(p, x), p, 40, rng)
    assert relative_error(a, n).max() < 1e-5


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as e:
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    assert "(2, 3)" in str(e.value) and "(4,)" in str(e.value)


def test_nonfinite_names_primitive():
    with pytest.raises(NonFiniteError) as e:
        T.log(Tensor(np.array([-1.0, 1.0])))
    assert e.value.op == "log"


def test_stop_gradient_blocks_flow():
    x = leaf(2.0)
    y = x * stop_gradient(x * x) + x
    y.backward()
    assert x.grad == pytest.approx(4.0 + 1.0)


def test_stop_gradient_finite_difference_disagrees_only_inside_wrapped_path():
    # finite differences see the wrapped path, autodiff does not: the gap is exactly its derivative
    x = leaf(1.5)
    f = lambda: (x * stop_gradient(x * x)).sum()   # noqa: E731
    a, n = check_gradients(f, {"x": x}, 1, np.random.default_rng(0))
    assert n[0] == pytest.approx(3 * 1.5 ** 2, rel=1e-6)
    assert a[0] == pytest.approx(1.5 ** 2)


def test_no_grad_records_nothing():
    x = leaf(2.0)
    with no_grad():
        y = x * x
    assert y._parents == ()


def test_adam_zero_gradient_leaves_params():
    p = {"a": leaf([1.0, 2.0])}
    s = AdamState(lr=0.1)
    adam_update(p, {"a": np.zeros(2)}, s)
    assert np.array_equal(p["a"].data, [1.0, 2.0])
    assert s.step_count == 1


def test_adam_first_step():
    p = {"a": leaf(1.0)}
    adam_update(p, {"a": np.array(2.0)}, AdamState(lr=0.1))
    assert p["a"].data == pytest.approx(1.0 - 0.1 * 2 / (2 + 1e-8), abs=1e-15)


def test_adam_locality():
    p = {"a": leaf([1.0]), "b": leaf([0.3])}
    before = p["b"].data.tobytes()
    adam_update(p, {"a": np.array([1.0]), "b": None}, AdamState(lr=0.1))
    assert p["b"].data.tobytes() == before


def test_adam_nan_gradient_no_mutation():
    p = {"a": leaf([1.0]), "b": leaf([2.0])}
    s = AdamState(lr=0.1)
    with pytest.raises(FloatingPointError):
        adam_update(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, s)
    assert s.step_count == 0 and p["a"].data[0] == 1.0 and not s.first_moment


def test_adam_optimizer_minimises_quadratic():
    x = leaf([3.0, -2.0])
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
    assert np.abs(x.data).max() < 1e-2


def test_gaussian_draw_deterministic_and_distinct():
    a = gaussian_draw(SeededStream(4), (3, 3)).data
    assert np.array_equal(a, gaussian_draw(SeededStream(4), (3, 3)).data)
    assert not np.array_equal(a, gaussian_draw(SeededStream(5), (3, 3)).data)


def test_gaussian_mean_clt():
    z = SeededStream(0).normal(100_000)
    assert abs(z.mean()) < 3 / np.sqrt(1e5)


def test_stream_counter_advances_and_child_is_independent():
    s = SeededStream(1)
    c0 = s.counter
    s.normal(10)
    assert s.counter > c0
    assert np.array_equal(s.child(3).normal(4), SeededStream(1, 3).normal(4))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.floats(1e-3, 1e2))
def test_kernel_backends_agree(n, d, gamma):
    rng = np.random.default_rng(n * 7 + d)
    x, y = rng.standard_normal((n, d)), rng.standard_normal((n + 1, d))
    nb, npb = _kernels.numba_backend, _kernels.numpy_backend
    if nb is None:
        pytest.skip("numba unavailable")
    np.testing.assert_allclose(nb.pairwise_sqdist(x, y), npb.pairwise_sqdist(x, y), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(nb.rbf_sums(x, y, gamma), npb.rbf_sums(x, y, gamma), rtol=1e-9, atol=1e-12)
    ya, ra = nb.layer_norm_fwd(x, 1e-6)
    yb, rb = npb.layer_norm_fwd(x, 1e-6)
    np.testing.assert_allclose(ya, yb, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(nb.sigmoid(x * 30), npb.sigmoid(x * 30), rtol=1e-12, atol=1e-300)


def test_env_flag_selects_numpy_backend():
    import subprocess
    import sys
    code = "from presto import _kernels; print(_kernels.USE_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], env={"PRESTO_NUMBA": "0", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
