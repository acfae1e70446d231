import numpy as np
import pytest
import scipy.sparse as sp

from pfnet import autodiff as ad
from pfnet.autodiff import AdamW, AdamWState, ShapeError, Tape, Tensor, adamw_step

SEEDS = range(20)
H = 1e-6


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return np.abs(a - b).max(initial=0) / scale


def fd_check(fn, arrays, rng):
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` against central differences."""
    probe = fn(*[Tensor(a) for a in arrays]).data
    weights = rng.normal(size=probe.shape)

    def scalar(*vals):
        return float(np.sum(fn(*[Tensor(v) for v in vals]).data * weights))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    ad.sum(ad.mul(fn(*leaves), weights)).backward()
    worst = 0.0
    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            up = [v.copy() for v in arrays]
            dn = [v.copy() for v in arrays]
            up[k][idx] += H
            dn[k][idx] -= H
            num[idx] = (scalar(*up) - scalar(*dn)) / (2 * H)
        worst = max(worst, rel_err(leaves[k].grad, num))
    return worst


def away_from_zero(rng, shape):
    x = rng.uniform(0.2, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _graph(rng, n=5, e=7):
    src = rng.integers(0, n, size=e)
    dst = rng.integers(0, n, size=e)
    return src, dst


PRIMITIVES = {
    "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], ad.matmul),
    "add": (lambda r: [r.normal(size=(4, 3)), r.normal(size=(4, 3))], ad.add),
    "add_row": (lambda r: [r.normal(size=(4, 3)), r.normal(size=(3,))], ad.add),
    "add_scalar": (lambda r: [r.normal(size=(4, 3)), r.normal(size=())], ad.add),
    "sub": (lambda r: [r.normal(size=(4, 3)), r.normal(size=(3,))], ad.sub),
    "mul": (lambda r: [r.normal(size=(4, 3)), r.normal(size=(4, 3))], ad.mul),
    "mul_row": (lambda r: [r.normal(size=(4, 3)), r.normal(size=(3,))], ad.mul),
    "neg": (lambda r: [r.normal(size=(2, 3))], ad.neg),
    "relu": (lambda r: [away_from_zero(r, (4, 3))], ad.relu),
    "square": (lambda r: [r.normal(size=(4, 3))], ad.square),
    "sin": (lambda r: [r.normal(size=(5,))], ad.sin),
    "cos": (lambda r: [r.normal(size=(5,))], ad.cos),
    "concat": (lambda r: [r.normal(size=(4, 2)), r.normal(size=(4, 3))], lambda a, b: ad.concat([a, b])),
    "sum_all": (lambda r: [r.normal(size=(4, 3))], ad.sum),
    "sum_axis0": (lambda r: [r.normal(size=(4, 3))], lambda a: ad.sum(a, axis=0)),
    "sum_axis1": (lambda r: [r.normal(size=(4, 3))], lambda a: ad.sum(a, axis=1)),
    "mean": (lambda r: [r.normal(size=(4, 3))], lambda a: ad.mean(a, axis=0)),
    "reshape": (lambda r: [r.normal(size=(4, 3))], lambda a: ad.reshape(a, (2, 6))),
    "take": (lambda r: [r.normal(size=(4, 3))], lambda a: ad.take(a, (slice(None), 1))),
    "take_rows": (lambda r: [r.normal(size=(4, 3))], lambda a: ad.take(a, slice(1, 3))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_vjp(name):
    make, fn = PRIMITIVES[name]
    worst = max(fd_check(fn, make(np.random.default_rng(s)), np.random.default_rng(100 + s))
                for s in SEEDS)
    assert worst < 1e-6, f"{name}: relative error {worst:.2e}"


def test_index_select_and_scatter_vjp():
    worst = 0.0
    for s in SEEDS:
        rng = np.random.default_rng(s)
        src, dst = _graph(rng)
        worst = max(worst, fd_check(lambda a: ad.index_select(a, src), [rng.normal(size=(5, 3))], rng))
        worst = max(worst, fd_check(lambda m: ad.scatter_add(m, dst, 5), [rng.normal(size=(7, 3))], rng))
    assert worst < 1e-6


def test_spmm_vjp():
    worst = 0.0
    for s in SEEDS:
        rng = np.random.default_rng(s)
        S = sp.random(5, 6, density=0.4, random_state=s, format="csr")
        worst = max(worst, fd_check(lambda a: ad.spmm(S, a), [rng.normal(size=(6, 3))], rng))
    assert worst < 1e-6


def test_dropout_vjp_with_fixed_mask():
    worst = 0.0
    for s in SEEDS:
        rng = np.random.default_rng(s)
        fn = lambda a: ad.dropout(a, 0.3, True, np.random.default_rng(s))  # noqa: E731
        worst = max(worst, fd_check(fn, [rng.normal(size=(6, 4))], rng))
    assert worst < 1e-6


def test_relu_example():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = ad.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    ad.sum(y).backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_scatter_example():
    out = ad.scatter_add(Tensor([[1.0, 1.0], [2.0, 2.0]]), [0, 0], 2)
    np.testing.assert_array_equal(out.data, [[3, 3], [0, 0]])


def test_quadratic_and_accumulation():
    w = Tensor([1.0, 2.0], requires_grad=True)
    ad.sum(ad.mul(w, w)).backward()
    np.testing.assert_array_equal(w.grad, [2, 4])
    ad.sum(ad.mul(w, w)).backward()
    np.testing.assert_array_equal(w.grad, [4, 8])
    w.zero_grad()
    assert w.grad is None


def test_non_scalar_backward_rejected():
    with pytest.raises(ShapeError, match="scalar"):
        ad.mul(Tensor([1.0, 2.0], requires_grad=True), 2.0).backward()


@pytest.mark.parametrize("fn, shapes", [
    (ad.matmul, [(3, 4), (3, 2)]),
    (ad.add, [(3, 4), (4, 3)]),
    (ad.mul, [(3, 4), (2,)]),
])
def test_shape_errors_name_both_shapes(fn, shapes):
    a, b = (Tensor(np.ones(s)) for s in shapes)
    with pytest.raises(ShapeError) as exc:
        fn(a, b)
    assert str(shapes[0]) in str(exc.value) and str(shapes[1]) in str(exc.value)


def test_tape_order_parents_first():
    a = Tensor(np.ones(3), requires_grad=True)
    b = ad.mul(a, 2.0)
    c = ad.add(b, a)
    d = ad.sum(ad.mul(c, b))
    order = Tape.from_output(d).nodes
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(t)]
    d.backward()
    # d = sum((2a + a) * 2a) = sum(6 a^2) -> 12 a
    np.testing.assert_allclose(a.grad, 12.0)


def test_diamond_graph_accumulates_once():
    x = Tensor([3.0], requires_grad=True)
    y = ad.square(x)
    ad.sum(ad.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_dropout_identity_cases(rng):
    a = Tensor(rng.normal(size=(4, 4)))
    assert ad.dropout(a, 0.5, False, rng) is a
    assert ad.dropout(a, 0.0, True, rng) is a
    big = Tensor(np.ones((400, 400)))
    out = ad.dropout(big, 0.2, True, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1.25}
    assert out.mean() == pytest.approx(1.0, abs=0.01)


def test_adamw_first_step():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([1.0])
    state = AdamWState(lr=1e-3, weight_decay=0.0)
    adamw_step({"p": p}, state)
    assert p.data[0] == pytest.approx(1 - 1e-3, abs=1e-6)
    assert state.step == 1


def test_adamw_zero_grad_fixed_point():
    p = Tensor([0.7, -2.0], requires_grad=True)
    p.grad = np.zeros(2)
    opt = AdamW({"p": p}, weight_decay=0.0)
    opt.step()
    np.testing.assert_array_equal(p.data, [0.7, -2.0])


def test_adamw_decay_only():
    p = Tensor([0.7, -2.0], requires_grad=True)
    p.grad = np.zeros(2)
    AdamW({"p": p}, lr=0.01, weight_decay=0.1).step()
    np.testing.assert_allclose(p.data, np.array([0.7, -2.0]) * (1 - 0.01 * 0.1), rtol=1e-15)


def test_adamw_matches_reference_recurrence(rng):
    p0 = rng.normal(size=(3,))
    grads = rng.normal(size=(5, 3))
    p = Tensor(p0.copy(), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.01, weight_decay=0.05)
    m = v = np.zeros(3)
    ref = p0.copy()
    for t, g in enumerate(grads, start=1):
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8) - 0.01 * 0.05 * ref
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_float64_throughout():
    t = Tensor(np.arange(3, dtype=np.float32))
    assert t.data.dtype == np.float64


def test_no_grad_records_nothing_and_restores():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        assert not ad.grad_enabled()
        y = ad.mul(w, w)
    assert ad.grad_enabled()
    assert not y.requires_grad and y.parents == ()
    np.testing.assert_array_equal(y.data, [1, 4])
    assert ad.mul(w, w).requires_grad


def test_no_grad_restores_after_error():
    with pytest.raises(RuntimeError):
        with ad.no_grad():
            raise RuntimeError("boom")
    assert ad.grad_enabled()
