"""Tape engine: primitive forward semantics, gradients vs finite differences."""

import numpy as np
import pytest

from mwpsolve.autodiff import (
    DegenerateDistributionError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    dropout_mask,
)

from helpers import assert_grads_close, central_diff


def test_sigmoid_at_zero():
    t = Tape()
    out = t.sigmoid(Tensor([0.0]))
    assert out.data[0] == 0.5


def test_masked_softmax_equal_logits():
    t = Tape()
    out = t.masked_softmax(Tensor([1.0, 1.0, 1.0]), np.array([1, 1, 0], dtype=np.uint8))
    np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0], atol=1e-12)
    assert out.data[2] == 0.0


def test_masked_softmax_distribution_properties():
    rng = np.random.default_rng(7)
    t = Tape()
    for _ in range(50):
        n = int(rng.integers(2, 12))
        logits = Tensor(rng.normal(scale=3.0, size=n))
        mask = (rng.random(n) < 0.6).astype(np.uint8)
        if not mask.any():
            mask[int(rng.integers(n))] = 1
        out = t.masked_softmax(logits, mask).data
        assert abs(out.sum() - 1.0) <= 1e-9
        assert (out[mask == 0] == 0.0).all()
        assert (out[mask == 1] > 0.0).all()


def test_masked_softmax_all_masked_raises():
    t = Tape()
    with pytest.raises(DegenerateDistributionError):
        t.masked_softmax(Tensor([1.0, 2.0]), np.zeros(2, dtype=np.uint8))


def test_matmul_identity():
    t = Tape()
    a = Tensor(np.arange(12.0).reshape(3, 4))
    out = t.matmul(Tensor(np.eye(3)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_shape_mismatch():
    t = Tape()
    with pytest.raises(ShapeError):
        t.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_backward_of_sum_is_ones():
    t = Tape()
    p = Parameter("p", [1.0, 2.0, 3.0])
    loss = t.sum(p)
    grads = t.backward(loss, [p])
    np.testing.assert_array_equal(grads[p], np.ones(3))


def test_backward_of_square():
    t = Tape()
    p = Parameter("p", [1.0, 2.0])
    loss = t.sum(t.mul(p, p))
    grads = t.backward(loss, [p])
    np.testing.assert_allclose(grads[p], [2.0, 4.0], atol=1e-12)


def test_backward_requires_scalar_loss():
    t = Tape()
    p = Parameter("p", [1.0, 2.0])
    vec = t.mul(p, p)
    with pytest.raises(ShapeError):
        t.backward(vec, [p])


def test_backward_requires_loss_on_tape():
    t = Tape()
    p = Parameter("p", [1.0])
    with pytest.raises(ShapeError):
        t.backward(p, [p])


def test_unreachable_parameter_gets_zero_gradient():
    t = Tape()
    p = Parameter("p", [1.0, 2.0])
    q = Parameter("q", [3.0])
    loss = t.sum(p)
    grads = t.backward(loss, [p, q])
    np.testing.assert_array_equal(grads[q], np.zeros(1))


def test_two_layer_tanh_net_matches_finite_differences():
    """Random 2-layer tanh net; every gradient entry vs central differences."""
    rng = np.random.default_rng(11)
    w1 = rng.normal(size=(4, 3))
    b1 = rng.normal(size=4)
    w2 = rng.normal(size=(2, 4))
    b2 = rng.normal(size=2)
    x = rng.normal(size=3)

    def run(arrays):
        t = Tape()
        pw1, pb1, pw2, pb2 = (Parameter(str(i), a) for i, a in enumerate(arrays))
        h = t.tanh(t.linear(pw1, Tensor(x), pb1))
        y = t.tanh(t.linear(pw2, h, pb2))
        return t, [pw1, pb1, pw2, pb2], t.sum(t.mul(y, y))

    arrays = [w1, b1, w2, b2]
    t, params, loss = run(arrays)
    analytic = list(t.backward(loss, params).values())
    numeric = central_diff(lambda arrs: run(arrs)[2].item(), arrays)
    assert_grads_close(analytic, numeric, tol=1e-4)


# -- per-primitive gradient checks -------------------------------------------

def _grad_case(rng, kind):
    """Build (loss builder, leaf arrays) for one primitive op-kind."""
    if kind == "matrix-product":
        arrays = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
        build = lambda t, ps: t.matmul(ps[0], ps[1])
    elif kind == "matrix-vector":
        arrays = [rng.normal(size=(3, 4)), rng.normal(size=4)]
        build = lambda t, ps: t.matmul(ps[0], ps[1])
    elif kind == "add":
        arrays = [rng.normal(size=5), rng.normal(size=5)]
        build = lambda t, ps: t.add(ps[0], ps[1])
    elif kind == "sub":
        arrays = [rng.normal(size=5), rng.normal(size=5)]
        build = lambda t, ps: t.sub(ps[0], ps[1])
    elif kind == "elementwise-multiply":
        arrays = [rng.normal(size=5), rng.normal(size=5)]
        build = lambda t, ps: t.mul(ps[0], ps[1])
    elif kind == "scale":
        arrays = [rng.normal(size=5)]
        build = lambda t, ps: t.scale(ps[0], -1.7)
    elif kind == "sigmoid":
        arrays = [rng.normal(size=6)]
        build = lambda t, ps: t.sigmoid(ps[0])
    elif kind == "tanh":
        arrays = [rng.normal(size=6)]
        build = lambda t, ps: t.tanh(ps[0])
    elif kind == "log":
        arrays = [rng.random(6) + 0.5]
        build = lambda t, ps: t.log(ps[0])
    elif kind == "concatenate":
        arrays = [rng.normal(size=3), rng.normal(size=4)]
        build = lambda t, ps: t.concat(ps[0], ps[1])
    elif kind == "masked-softmax":
        arrays = [rng.normal(size=6)]
        mask = np.array([1, 1, 0, 1, 1, 0], dtype=np.uint8)
        build = lambda t, ps: t.masked_softmax(ps[0], mask)
    elif kind == "embedding-lookup":
        arrays = [rng.normal(size=(5, 3))]
        build = lambda t, ps: t.embedding(ps[0], 2)
    elif kind == "dropout-mask":
        arrays = [rng.normal(size=6)]
        mask = dropout_mask(6, 0.5, rng)
        build = lambda t, ps: t.dropout(ps[0], mask)
    elif kind == "pick":
        arrays = [rng.normal(size=6)]
        build = lambda t, ps: t.pick(ps[0], 3)
    elif kind == "linear":
        arrays = [rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=3)]
        build = lambda t, ps: t.linear(ps[0], ps[1], ps[2])
    elif kind == "gated-unit":
        arrays = [rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3),
                  rng.normal(size=(3, 4)), rng.normal(size=3)]
        build = lambda t, ps: t.gated_unit(*ps)
    elif kind == "gru-cell":
        d, hid = 3, 4
        arrays = [rng.normal(size=d), rng.normal(size=hid)]
        for _ in range(3):
            arrays += [rng.normal(size=(hid, d)), rng.normal(size=(hid, hid)),
                       rng.normal(size=hid)]
        build = lambda t, ps: t.gru_cell(*ps)
    else:
        raise AssertionError(kind)
    return build, arrays


ALL_KINDS = ["matrix-product", "matrix-vector", "add", "sub", "elementwise-multiply",
             "scale", "sigmoid", "tanh", "log", "concatenate", "masked-softmax",
             "embedding-lookup", "dropout-mask", "pick", "linear", "gated-unit",
             "gru-cell"]


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_primitive_gradients(kind):
    """Analytic vs central finite-difference gradients for each primitive."""
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        build, arrays = _grad_case(rng, kind)

        def scalar(arrs):
            t = Tape()
            ps = [Parameter(str(i), a) for i, a in enumerate(arrs)]
            out = build(t, ps)
            # a fixed projection makes the loss sensitive to every output entry
            proj = Tensor(np.linspace(0.5, 1.5, out.size).reshape(out.shape))
            if out.size == 1:
                return t, ps, t.mul(out, proj) if out.shape else out
            return t, ps, t.sum(t.mul(out, proj))

        t, ps, loss = scalar(arrays)
        analytic = list(t.backward(loss, ps).values())
        numeric = central_diff(lambda arrs: scalar(arrs)[2].item(), arrays)
        assert_grads_close(analytic, numeric, tol=1e-4)


def test_primitive_forward_dispatch():
    t = Tape()
    out = t.apply("sigmoid", Tensor([0.0]))
    assert out.data[0] == 0.5
    with pytest.raises(ShapeError):
        t.apply("no-such-op", Tensor([0.0]))


def test_dropout_eval_mode_is_identity():
    # eval mode: the caller passes no mask, so the value flows unchanged
    x = np.array([1.0, -2.0, 3.0])
    mask = dropout_mask(3, 0.0, np.random.default_rng(0))
    t = Tape()
    out = t.dropout(Tensor(x), mask)
    np.testing.assert_array_equal(out.data, x)


def test_dropout_preserves_expected_value():
    rng = np.random.default_rng(3)
    x = np.full(2000, 2.0)
    total = np.zeros_like(x)
    trials = 400
    for _ in range(trials):
        total += x * dropout_mask(x.shape, 0.5, rng)
    np.testing.assert_allclose(total.mean() / trials, 2.0, rtol=0.02)


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    arrays = [rng.normal(size=(3, 3)), rng.normal(size=3)]

    def run():
        t = Tape()
        w = Parameter("w", arrays[0])
        x = Parameter("x", arrays[1])
        loss = t.sum(t.tanh(t.matmul(w, x)))
        return {p.name: g for p, g in t.backward(loss, [w, x]).items()}

    a, b = run(), run()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_value_reuse_accumulates_gradient():
    t = Tape()
    p = Parameter("p", [1.5])
    y = t.add(t.mul(p, p), p)  # p^2 + p -> grad 2p + 1
    grads = t.backward(t.sum(y), [p])
    np.testing.assert_allclose(grads[p], [4.0], atol=1e-12)


def test_non_recording_tape_runs_but_cannot_backward():
    t = Tape(record=False)
    p = Parameter("p", [2.0])
    out = t.mul(p, p)
    assert out.data[0] == 4.0
    assert len(t) == 0
    with pytest.raises(ShapeError):
        t.backward(out, [p])
