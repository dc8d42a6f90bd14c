import numpy as np
import pytest

from raqr import diffengine as de
from raqr.errors import ShapeError

from oracles import central_difference, rel_err

GRAD_TOL = 1e-4
INSTANCES = 20


def _check(build, shapes, rng, positive=()):
    """Compare backward against central differences for ``sum(w * build(*xs))``."""
    xs = []
    for i, s in enumerate(shapes):
        x = rng.standard_normal(s)
        if i in positive:
            x = np.abs(x) + 0.5
        xs.append(x)
    ws = [rng.standard_normal(o.shape) for o in _outputs(build, [de.tensor(x) for x in xs])]

    def scalar(vals):
        outs = _outputs(build, [de.tensor(v) for v in vals])
        return sum(float(np.sum(w * o.value)) for w, o in zip(ws, outs))

    leaves = [de.tensor(x, requires_grad=True) for x in xs]
    outs = _outputs(build, leaves)
    loss = de.sum_(de.mul(outs[0], ws[0]))
    for w, o in zip(ws[1:], outs[1:]):
        loss = loss + de.sum_(de.mul(o, w))
    loss.backward()
    for i, leaf in enumerate(leaves):
        def f(xi, i=i):
            vals = list(xs)
            vals[i] = xi
            return scalar(vals)

        fd = central_difference(f, xs[i])
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(xs[i])
        assert rel_err(ad, fd) < GRAD_TOL, (i, rel_err(ad, fd))


def _outputs(build, args):
    out = build(*args)
    return list(out) if isinstance(out, tuple) else [out]


PRIMITIVES = {
    "add": (lambda a, b: de.add(a, b), [(3, 4), (3, 4)], ()),
    "add_broadcast": (lambda a, b: de.add(a, b), [(2, 3, 4), (4,)], ()),
    "sub": (lambda a, b: de.sub(a, b), [(3, 4), (1, 4)], ()),
    "hadamard": (lambda a, b: de.hadamard(a, b), [(3, 4), (3, 4)], ()),
    "div": (lambda a, b: de.div(a, b), [(3, 4), (3, 4)], (1,)),
    "matmul": (lambda a, b: de.matmul(a, b), [(3, 4), (4, 2)], ()),
    "matmul_batched": (lambda a, b: de.matmul(a, b), [(2, 3, 4), (4, 5)], ()),
    "transpose": (lambda a: de.transpose(a), [(2, 3, 4)], ()),
    "permute": (lambda a: de.transpose(a, (0, 2, 1, 3)), [(2, 3, 4, 2)], ()),
    "reshape": (lambda a: de.reshape(a, (4, 6)), [(2, 3, 4)], ()),
    "concat": (lambda a, b: de.concat([a, b], axis=-2), [(2, 3, 4), (2, 2, 4)], ()),
    "slice": (lambda a: a[:, 1:3, :], [(2, 4, 3)], ()),
    "exp": (lambda a: de.exp(a), [(3, 4)], ()),
    "log1p": (lambda a: de.log1p(a), [(3, 4)], (0,)),
    "sigmoid": (lambda a: de.sigmoid(a), [(3, 4)], ()),
    "relu": (lambda a: de.relu(a), [(3, 4)], ()),
    "gelu": (lambda a: de.gelu(a), [(3, 4)], ()),
    "softmax": (lambda a: de.softmax(a, axis=-1), [(3, 5)], ()),
    "layer_norm": (lambda a: de.layer_norm(a), [(3, 6)], ()),
    "complex_magnitude": (lambda a, b: de.complex_magnitude(a, b), [(3, 4), (3, 4)], ()),
    "complex_phase_apply": (lambda z, a, b: de.complex_phase_apply(z, a, b),
                            [(3, 4), (3, 4), (3, 4)], (0,)),
    "mean": (lambda a: de.mean(a, axis=1), [(3, 4)], ()),
    "mean_all": (lambda a: de.mean(a), [(3, 4)], ()),
    "sum": (lambda a: de.sum_(a, axis=(0, 2)), [(2, 3, 4)], ()),
    "square": (lambda a: de.square(a), [(3, 4)], ()),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    build, shapes, positive = PRIMITIVES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(INSTANCES):
        _check(build, shapes, rng, positive)


def test_sigmoid_value_and_slope():
    x = de.tensor([0.0], requires_grad=True)
    y = de.sigmoid(x)
    assert y.value[0] == 0.5
    de.sum_(y).backward()
    assert x.grad[0] == 0.25


def test_sigmoid_extremes_finite():
    y = de.sigmoid(de.tensor([-1000.0, 1000.0]))
    assert np.all(np.isfinite(y.value))
    assert y.value[0] == 0.0 and y.value[1] == 1.0


def test_magnitude_gradient_345():
    re = de.tensor([3.0], requires_grad=True)
    im = de.tensor([4.0], requires_grad=True)
    de.sum_(de.complex_magnitude(re, im)).backward()
    assert re.grad[0] == pytest.approx(0.6)
    assert im.grad[0] == pytest.approx(0.8)


def test_magnitude_subgradient_at_origin():
    re = de.tensor([0.0, 1.0], requires_grad=True)
    im = de.tensor([0.0, 0.0], requires_grad=True)
    de.sum_(de.complex_magnitude(re, im)).backward()
    assert re.grad[0] == 0.0 and im.grad[0] == 0.0


def test_magnitude_gradient_norm_bounded(rng):
    re = de.tensor(rng.standard_normal(200) * 10 ** rng.uniform(-8, 8, 200), requires_grad=True)
    im = de.tensor(rng.standard_normal(200), requires_grad=True)
    de.sum_(de.complex_magnitude(re, im)).backward()
    assert np.all(np.hypot(re.grad, im.grad) <= 1.0 + 1e-12)


def test_phase_apply_clamp():
    z = de.tensor([2.0])
    re = de.tensor([0.0], requires_grad=True)
    im = de.tensor([0.0], requires_grad=True)
    out_r, out_i = de.complex_phase_apply(z, re, im)
    assert out_r.value[0] == 0.0 and out_i.value[0] == 0.0
    de.sum_(out_r + out_i).backward()
    assert np.isfinite(re.grad[0]) and np.isfinite(im.grad[0])
    # below the clamp the map is linear with slope z / clamp
    assert re.grad[0] == pytest.approx(2.0 / de.PHASE_CLAMP)


def test_phase_apply_unit_output(rng):
    z = rng.uniform(0.1, 3, 10)
    r, i = de.complex_phase_apply(de.tensor(z), de.tensor(rng.standard_normal(10)),
                                  de.tensor(rng.standard_normal(10)))
    np.testing.assert_allclose(np.hypot(r.value, i.value), z, rtol=1e-14)


def test_sum_linear_functional(rng):
    x = de.tensor(rng.standard_normal((3, 4)), requires_grad=True)
    de.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_half_squared_norm(rng):
    v = rng.standard_normal(7)
    x = de.tensor(v, requires_grad=True)
    de.mul(de.sum_(de.square(x)), 0.5).backward()
    np.testing.assert_allclose(x.grad, v, rtol=1e-15)


def test_backward_requires_scalar(rng):
    with pytest.raises(ShapeError):
        de.tensor(rng.standard_normal(3), requires_grad=True).backward()


def test_shape_errors():
    with pytest.raises(ShapeError, match="matmul"):
        de.matmul(de.tensor(np.ones((2, 3))), de.tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        de.add(de.tensor(np.ones((2, 3))), de.tensor(np.ones((4,))))
    with pytest.raises(ShapeError, match="reshape"):
        de.reshape(de.tensor(np.ones(6)), (4, 2))
    with pytest.raises(ShapeError, match="slice"):
        de.tensor(np.ones(6))[[0, 1]]


def test_shared_node_accumulates(rng):
    v = rng.standard_normal(5)
    x = de.tensor(v, requires_grad=True)
    y = x * x + x  # x used three times
    de.sum_(y).backward()
    np.testing.assert_allclose(x.grad, 2 * v + 1)


def test_gradient_determinism(rng):
    v = rng.standard_normal((4, 6))

    def run():
        x = de.tensor(v, requires_grad=True)
        y = de.softmax(de.gelu(x @ x.T), axis=-1)
        de.sum_(de.layer_norm(y) * y).backward()
        return x.grad

    assert run().tobytes() == run().tobytes()


def test_long_chain_no_recursion_limit():
    x = de.tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0001
    de.sum_(y).backward()
    assert x.grad[0] == pytest.approx(1.0001 ** 5000)


class TestAdam:
    def test_zero_gradient(self):
        p = [np.array([1.0, -2.0])]
        new, _ = de.adam_step(p, [np.zeros(2)], {}, lr=0.1)
        np.testing.assert_array_equal(new[0], p[0])

    def test_first_step_closed_form(self):
        # t=1: m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps)
        g = np.array([0.3, -2.0, 1e-3])
        lr, eps = 0.01, 1e-8
        new, state = de.adam_step([np.zeros(3)], [g], {}, lr=lr, eps=eps)
        np.testing.assert_allclose(new[0], -lr * g / (np.abs(g) + eps), rtol=1e-12)
        assert state["t"] == 1

    def test_determinism(self):
        def run():
            p, s = [np.array([1.5])], {}
            for i in range(10):
                p, s = de.adam_step(p, [2 * p[0] + 0.1 * i], s, lr=0.05)
            return p[0], s

        (a, sa), (b, sb) = run(), run()
        assert a.tobytes() == b.tobytes()
        assert sa["m"][0].tobytes() == sb["m"][0].tobytes()

    def test_minimizes_quadratic(self):
        x = de.tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = de.Adam([x], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            de.sum_(de.square(x)).backward()
            opt.step()
        assert np.all(np.abs(x.value) < 1e-2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            de.adam_step([np.zeros(2)], [np.zeros(3)], {}, lr=0.1)


def test_clip_grad_norm():
    a = de.tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    norm = de.clip_grad_norm([a], 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.8])
