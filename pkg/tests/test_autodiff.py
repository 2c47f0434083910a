"""Oracle and property tests for the tensor/autodiff core."""

import math

import numpy as np
import pytest

from blocklab import autodiff as ad

RNG = np.random.default_rng(20240601)


def gradcheck(build, theta0, h=1e-5, tol=1e-6):
    """Backward vs central finite differences through an arbitrary chain."""

    def f(theta):
        with ad.Tape():
            p = ad.parameter("p", theta)
            return build(p).data

    with ad.Tape() as tape:
        p = ad.parameter("p", theta0)
        loss = build(p)
    g = tape.backward(loss, [p])["p"]
    fd = ad.finite_diff_grad(f, theta0.copy(), h)
    err = ad.rel_error(g, fd)
    assert err <= tol, f"gradcheck failed: rel err {err:.3e}"
    return err


def rand(*shape):
    return RNG.normal(size=shape)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_symmetric_row():
    with ad.Tape():
        out = ad.softmax_rows(ad.constant([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-15)


def test_softmax_masked_position_exact_zero():
    with ad.Tape():
        out = ad.softmax_rows(ad.constant([[3.0, 17.0], [1.0, -2.0]]), causal=True)
    assert out.data[0, 1] == 0.0
    assert out.data[0, 0] == 1.0


def test_softmax_hand_value():
    # independent closed form e^{x_i} / sum e^{x_j}
    expect = [math.exp(1.0), math.exp(2.0)]
    expect = [v / sum(expect) for v in expect]
    with ad.Tape():
        out = ad.softmax_rows(ad.constant([[1.0, 2.0]]))
    assert np.allclose(out.data[0], expect, atol=1e-15)
    assert abs(out.data[0, 0] - 0.26894) < 5e-6
    assert abs(out.data[0, 1] - 0.73106) < 5e-6


def test_softmax_rows_sum_to_one():
    for _ in range(50):
        m = rand(5, 7) * 10
        with ad.Tape():
            out = ad.softmax_rows(ad.constant(m))
        assert np.all(np.abs(out.data.sum(-1) - 1.0) <= 1e-12)
        assert np.all(out.data >= 0)


def test_softmax_causal_zeros_exact_and_rows_sum():
    for _ in range(20):
        m = rand(6, 6) * 5
        with ad.Tape():
            out = ad.softmax_rows(ad.constant(m), causal=True)
        assert np.all(out.data[np.triu_indices(6, k=1)] == 0.0)
        assert np.all(np.abs(out.data.sum(-1) - 1.0) <= 1e-12)


def test_softmax_fully_masked_row_errors():
    with ad.Tape():
        with pytest.raises(ValueError):
            ad.softmax_rows(ad.constant([[-np.inf, -np.inf]]))


# ---------------------------------------------------------------------------
# normalize
# ---------------------------------------------------------------------------

def test_layernorm_hand_value():
    with ad.Tape():
        out = ad.normalize(ad.constant([[1.0, 3.0]]), ad.constant([1.0, 1.0]), "layernorm", 0.0)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-15)


def test_rmsnorm_hand_value():
    rms = math.sqrt((9.0 + 16.0) / 2.0)
    with ad.Tape():
        out = ad.normalize(ad.constant([[3.0, 4.0]]), ad.constant([1.0, 1.0]), "rmsnorm", 0.0)
    assert np.allclose(out.data, [[3.0 / rms, 4.0 / rms]], atol=1e-15)
    assert abs(out.data[0, 0] - 0.84853) < 5e-6
    assert abs(out.data[0, 1] - 1.13137) < 5e-6


def test_layernorm_standardization_invariants():
    # eps = 0: per-row mean 0 within 1e-10, per-row sum of squares = D within 1e-8
    for _ in range(50):
        n, d = int(RNG.integers(1, 6)), int(RNG.integers(2, 9))
        x = rand(n, d) * RNG.uniform(0.1, 10)
        with ad.Tape():
            out = ad.normalize(ad.constant(x), ad.constant(np.ones(d)), "layernorm", 0.0)
        assert np.all(np.abs(out.data.sum(-1)) <= 1e-10)
        assert np.all(np.abs((out.data**2).sum(-1) - d) <= 1e-8)
        assert abs((out.data**2).sum() - n * d) <= 1e-8


def test_layernorm_zero_row_eps0_errors():
    with ad.Tape():
        with pytest.raises(ZeroDivisionError):
            ad.normalize(ad.constant([[2.0, 2.0]]), ad.constant([1.0, 1.0]), "layernorm", 0.0)
        with pytest.raises(ZeroDivisionError):
            ad.normalize(ad.constant([[0.0, 0.0]]), ad.constant([1.0, 1.0]), "rmsnorm", 0.0)


def test_normalize_rejects_bad_args():
    with ad.Tape():
        with pytest.raises(ValueError):
            ad.normalize(ad.constant([[1.0, 2.0]]), ad.constant([1.0, 1.0]), "batchnorm", 0.0)
        with pytest.raises(ValueError):
            ad.normalize(ad.constant([[1.0, 2.0]]), ad.constant([1.0, 1.0]), "layernorm", -1.0)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def test_activation_point_values():
    with ad.Tape():
        x = ad.constant([-2.0, 0.0, 2.0])
        assert np.allclose(ad.relu(x).data, [0.0, 0.0, 2.0])
        assert np.allclose(ad.leaky_relu(x, 0.1).data, [-0.2, 0.0, 2.0])
        assert ad.gelu(ad.constant([0.0])).data[0] == 0.0


def test_piecewise_linear_identity():
    # sigma(z) = z * sigma'(z) away from zero
    z = rand(40)
    z = np.where(np.abs(z) < 1e-3, 0.5, z)
    for kind, alpha in (("relu", 0.0), ("leaky_relu", 0.13)):
        with ad.Tape():
            a = ad.activation(ad.constant(z), kind, alpha)
        deriv = np.where(z > 0, 1.0, alpha if kind == "leaky_relu" else 0.0)
        assert np.array_equal(a.data, z * deriv)


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    for d in (2, 7, 31):
        with ad.Tape():
            loss = ad.cross_entropy_next_token(ad.constant(np.zeros((3, d))), np.zeros(3, int))
        assert abs(loss.data - math.log(d)) <= 1e-12


def test_cross_entropy_confident_limit():
    logits = np.zeros((1, 5))
    logits[0, 2] = 40.0
    with ad.Tape():
        loss = ad.cross_entropy_next_token(ad.constant(logits), np.array([2]))
    assert loss.data < 1e-10


def test_cross_entropy_hand_value():
    expect = math.log(1.0 + math.exp(-1.0))  # -ln softmax([1,2])[1]
    with ad.Tape():
        loss = ad.cross_entropy_next_token(ad.constant([[1.0, 2.0]]), np.array([1]))
    assert abs(loss.data - expect) <= 1e-15
    assert abs(loss.data - 0.31326) < 5e-6


def test_cross_entropy_target_out_of_range():
    with ad.Tape():
        with pytest.raises(ValueError):
            ad.cross_entropy_next_token(ad.constant(np.zeros((2, 3))), np.array([0, 3]))


# ---------------------------------------------------------------------------
# backward / tape semantics
# ---------------------------------------------------------------------------

def test_backward_linear_form():
    # Q = <C, XW>  =>  dQ/dW = X^T C
    x, c = rand(4, 3), rand(4, 5)
    w0 = rand(3, 5)
    with ad.Tape() as tape:
        w = ad.parameter("w", w0)
        q = ad.inner(ad.constant(c), ad.matmul(ad.constant(x), w))
    g = tape.backward(q, [w])["w"]
    assert np.allclose(g, x.T @ c, atol=1e-12)


def test_backward_of_constant_is_zero_gradmap():
    w = ad.parameter("w", rand(3, 3))
    g = ad.backward(ad.constant(5.0), [w])
    assert np.array_equal(g["w"], np.zeros((3, 3)))


def test_backward_untraced_loss_errors():
    with ad.Tape():
        w = ad.parameter("w", rand(2, 2))
        loss = ad.sum_all(w)
    other = ad.Tape()
    with pytest.raises(ValueError):
        other.backward(loss, [w])


def test_backward_unreached_parameter_gets_zeros():
    with ad.Tape() as tape:
        w = ad.parameter("w", rand(2, 2))
        u = ad.parameter("u", rand(2, 2))
        loss = ad.sum_all(ad.mul(w, w))
    g = tape.backward(loss, [w, u])
    assert np.array_equal(g["u"], np.zeros((2, 2)))
    assert np.allclose(g["w"], 2 * w.data)


def test_ops_require_active_tape():
    with pytest.raises(RuntimeError):
        ad.add(ad.constant(1.0), ad.constant(2.0))


def test_parameter_rejects_nonfinite():
    with pytest.raises(ValueError):
        ad.parameter("bad", [1.0, np.nan])
    with pytest.raises(ValueError):
        ad.parameter("bad", [np.inf])


def test_tape_replay_is_bit_exact():
    with ad.Tape() as tape:
        w = ad.parameter("w", rand(4, 4))
        x = ad.constant(rand(3, 4))
        h = ad.normalize(ad.matmul(x, w), ad.constant(np.ones(4)), "layernorm", 1e-5)
        out = ad.softmax_rows(ad.matmul(h, ad.transpose(w)))
        ad.cross_entropy_next_token(out, np.array([0, 1, 2]))
    assert tape.replay() == len(tape.records) > 0


def test_forward_determinism_bitwise():
    x = rand(5, 6)
    outs = []
    for _ in range(2):
        with ad.Tape():
            outs.append(ad.softmax_rows(ad.constant(x.copy())).data)
    assert np.array_equal(outs[0], outs[1])


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def test_finite_diff_quadratic_exact():
    g = ad.finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) <= 1e-9


def test_finite_diff_sine():
    h = 1e-5
    g = ad.finite_diff_grad(lambda t: math.sin(t[0]), np.array([0.0]), h)
    assert abs(g[0] - 1.0) <= h * h


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_diff_grad(lambda t: 0.0, np.zeros(1), h=0.0)


# ---------------------------------------------------------------------------
# per-primitive gradient checks, 50 random draws each
# ---------------------------------------------------------------------------

def _away_from_kinks(x, margin=1e-3):
    return np.where(np.abs(x) < margin, margin * 3, x)


PRIMITIVES = {
    "add_broadcast": lambda p: ad.inner(ad.constant(rand(4, 3)), ad.add(p, ad.constant(rand(3)))),
    "mul": lambda p: ad.inner(ad.constant(rand(4, 3)), ad.mul(p, ad.constant(rand(4, 3)))),
    "neg": lambda p: ad.inner(ad.constant(rand(4, 3)), ad.neg(p)),
    "scale": lambda p: ad.inner(ad.constant(rand(4, 3)), ad.scale(p, -1.7)),
    "matmul_2d": lambda p: ad.inner(ad.constant(rand(4, 5)), ad.matmul(p, ad.constant(rand(3, 5)))),
    "matmul_stacked": lambda p: ad.inner(
        ad.constant(rand(2, 4, 5)), ad.matmul(ad.constant(rand(2, 4, 3)), p)
    ),
    "matmul_batched4d": lambda p: ad.inner(
        ad.constant(rand(2, 2, 4, 4)),
        ad.matmul(ad.reshape(p, (2, 2, 4, 3)), ad.constant(rand(2, 2, 3, 4))),
    ),
    "transpose": lambda p: ad.inner(ad.constant(rand(3, 4)), ad.transpose(p)),
    "swapaxes": lambda p: ad.inner(
        ad.constant(rand(3, 2, 4)), ad.swapaxes(ad.reshape(p, (2, 3, 4)), 0, 1)
    ),
    "reshape": lambda p: ad.inner(ad.constant(rand(12)), ad.reshape(p, (12,))),
    "narrow": lambda p: ad.inner(ad.constant(rand(4, 2)), ad.narrow(p, 1, 1, 2)),
    "embedding": lambda p: ad.inner(
        ad.constant(rand(2, 5, 3)),
        ad.embedding(p, np.array([[0, 3, 1, 3, 2], [2, 2, 0, 1, 3]])),
    ),
    "softmax": lambda p: ad.inner(ad.constant(rand(4, 3)), ad.softmax_rows(p)),
    "softmax_causal": lambda p: ad.inner(
        ad.constant(rand(4, 3)), ad.softmax_rows(ad.reshape(p, (4, 3)), causal=True)
    ),
    "layernorm_x": lambda p: ad.inner(
        ad.constant(rand(4, 3)),
        ad.normalize(p, ad.constant(rand(3) + 2.0), "layernorm", 1e-5),
    ),
    "layernorm_gamma": lambda p: ad.inner(
        ad.constant(rand(4, 3)),
        ad.normalize(ad.constant(rand(4, 3)), p, "layernorm", 0.0),
    ),
    "rmsnorm": lambda p: ad.inner(
        ad.constant(rand(4, 3)),
        ad.normalize(p, ad.constant(rand(3) + 2.0), "rmsnorm", 1e-5),
    ),
    "gelu": lambda p: ad.inner(ad.constant(rand(4, 3)), ad.gelu(p)),
    "sum_all": lambda p: ad.scale(ad.sum_all(ad.mul(p, p)), 0.5),
    "cross_entropy": lambda p: ad.cross_entropy_next_token(
        p, np.array([0, 2, 1, 2])
    ),
}

PRIMITIVE_SHAPES = {
    "add_broadcast": (4, 3),
    "mul": (4, 3),
    "neg": (4, 3),
    "scale": (4, 3),
    "matmul_2d": (4, 3),
    "matmul_stacked": (3, 5),
    "matmul_batched4d": (2, 2, 4, 3),
    "transpose": (4, 3),
    "swapaxes": (2, 3, 4),
    "reshape": (3, 4),
    "narrow": (4, 4),
    "embedding": (4, 3),
    "softmax": (4, 3),
    "softmax_causal": (4, 3),
    "layernorm_x": (4, 3),
    "layernorm_gamma": (3,),
    "rmsnorm": (4, 3),
    "gelu": (4, 3),
    "sum_all": (4, 3),
    "cross_entropy": (4, 3),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    build = PRIMITIVES[name]
    for _ in range(50):
        theta = rand(*PRIMITIVE_SHAPES[name])
        gradcheck(build, theta)


@pytest.mark.parametrize("kind,alpha", [("relu", 0.0), ("leaky_relu", 0.07)])
def test_piecewise_activation_gradients(kind, alpha):
    # inputs resampled away from the nondifferentiable point
    for _ in range(50):
        theta = _away_from_kinks(rand(4, 3))
        gradcheck(
            lambda p: ad.inner(ad.constant(rand(4, 3)), ad.activation(p, kind, alpha or 0.07)),
            theta,
        )
