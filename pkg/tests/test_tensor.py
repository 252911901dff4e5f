import numpy as np
import pytest

from mole import tensor as tn
from mole.tensor import Tensor, backward, check_gradients


def t64(a, grad=True, name=None):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, name=name)


def test_matmul_identity():
    out = tn.matmul(tn.tensor([[1, 2], [3, 4]]), tn.tensor([[1, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_rectangular():
    A = tn.tensor([[1, 0, 2], [0, 1, 1]])
    B = tn.tensor([[1, 1], [2, 0], [0, 3]])
    # hand-expanded dot products
    np.testing.assert_array_equal(tn.matmul(A, B).data, [[1, 7], [2, 3]])


def test_softmax_symmetric():
    np.testing.assert_allclose(tn.softmax(tn.tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(tn.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
        tn.matmul(tn.tensor(np.ones((2, 3))), tn.tensor(np.ones((2, 2))))
    with pytest.raises(tn.ShapeError, match="add"):
        tn.add(tn.tensor(np.ones((2, 3))), tn.tensor(np.ones((4,))))


def test_dtype_mismatch_rejected():
    with pytest.raises(TypeError):
        tn.add(tn.tensor([1.0]), Tensor(np.array([1.0])))


def test_backward_identity_case():
    W = t64(np.eye(2))
    x = t64([[1.0], [1.0]])
    tn.zero_grad([W, x])
    backward(tn.matmul(W, x).sum())
    np.testing.assert_array_equal(x.grad, [[1.0], [1.0]])


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0])
    with pytest.raises(tn.ShapeError):
        backward(tn.scale(x, 2.0))


def test_non_participating_leaf_stays_zero_and_frozen_never_accumulates():
    a, unused = t64([1.0, 2.0]), t64([3.0])
    frozen = Tensor(np.array([1.0, 1.0]))
    tn.zero_grad([a, unused, frozen])
    backward(tn.mul(a, frozen).sum())
    np.testing.assert_array_equal(unused.grad, [0.0])
    assert frozen.grad is None


def test_gradients_accumulate_across_uses():
    a = t64([2.0])
    a.zero_grad()
    backward(tn.add(tn.mul(a, a), a).sum())
    np.testing.assert_allclose(a.grad, [5.0])


def _primitive_cases(rng):
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(4, 2))
    yield "matmul", [x, y], lambda p: tn.matmul(p[0], p[1])
    yield "batched_matmul", [rng.normal(size=(2, 3, 4)), y], lambda p: tn.matmul(p[0], p[1])
    yield "add", [x, rng.normal(size=(3, 4))], lambda p: tn.add(p[0], p[1])
    yield "broadcast_add", [x, rng.normal(size=(4,))], lambda p: tn.add(p[0], p[1])
    yield "mul", [x, rng.normal(size=(3, 4))], lambda p: tn.mul(p[0], p[1])
    yield "scale", [x], lambda p: tn.scale(p[0], -1.7)
    yield "transpose", [x], lambda p: tn.transpose(p[0])
    yield "gather_rows", [x], lambda p: tn.gather_rows(p[0], [2, 0, 2, 1])
    yield "scatter_rows", [x], lambda p: tn.scatter_rows(p[0], [4, 0, 2], 5)
    yield "softmax", [x], lambda p: tn.softmax(p[0])
    yield "log_softmax", [x], lambda p: tn.log_softmax(p[0])
    yield "layer_norm", [x, rng.normal(size=4), rng.normal(size=4)], \
        lambda p: tn.layer_norm(p[0], p[1], p[2])
    yield "gelu", [x], lambda p: tn.gelu(p[0])
    yield "relu", [x + np.sign(x) * 0.1], lambda p: tn.relu(p[0])
    yield "concat", [x, rng.normal(size=(2, 4))], lambda p: tn.concat([p[0], p[1]], 0)
    yield "slice", [x], lambda p: p[0][1:3, ::2]
    yield "take_last", [x], lambda p: tn.take_last(p[0], np.array([0, 3, 1]))
    q = rng.normal(size=(2, 5, 3))
    yield "attention", [q, rng.normal(size=q.shape), rng.normal(size=q.shape)], \
        lambda p: tn.causal_attention(p[0], p[1], p[2])


@pytest.mark.parametrize("seed", range(10))
def test_every_primitive_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    for name, arrays, op in _primitive_cases(rng):
        params = [t64(a, name=f"{name}{i}") for i, a in enumerate(arrays)]
        # random projection makes the scalar sensitive to every output entry
        out_shape = op(params).shape
        w = Tensor(rng.normal(size=out_shape))
        rep = check_gradients(lambda: tn.mul(op(params), w).sum(), params, h=1e-5, tol=1e-4)
        assert rep.passed, (name, rep.rel_errors, rep.failures)


def test_three_layer_composition_gradcheck():
    rng = np.random.default_rng(3)
    Ws = [t64(rng.normal(size=s) * 0.5, name=f"W{i}") for i, s in
          enumerate([(5, 6), (6, 6), (6, 3)])]
    g, b = t64(np.ones(6) + 0.1 * rng.normal(size=6), name="g"), t64(np.zeros(6), name="b")
    x = Tensor(rng.normal(size=(4, 5)))

    def f():
        h = tn.gelu(tn.matmul(x, Ws[0]))
        h = tn.layer_norm(tn.matmul(h, Ws[1]), g, b)
        return tn.log_softmax(tn.matmul(h, Ws[2])).sum()

    rep = check_gradients(f, Ws + [g, b], h=1e-5, tol=1e-4)
    assert rep.passed, rep.rel_errors


def test_check_gradients_quadratic_is_exact():
    x = t64([1.0, -2.0, 0.5], name="x")
    rep = check_gradients(lambda: tn.mul(x, x).sum(), [x], h=1e-5)
    assert rep.max_rel_error < 1e-9


def test_check_gradients_constant_fn():
    x = t64([1.0, 2.0], name="x")
    c = Tensor(np.array(3.0))
    rep = check_gradients(lambda: c, [x])
    assert rep.passed
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    assert rep.rel_errors["x"] == 0.0


@pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
def test_check_gradients_reports_non_finite():
    x = t64([1.0], name="x")
    rep = check_gradients(lambda: tn.log(tn.add(x, -1.0)).sum(), [x], h=1e-5)
    assert not rep.passed and rep.failures


def test_check_gradients_requires_f64():
    x = tn.tensor([1.0], requires_grad=True)
    with pytest.raises(TypeError):
        check_gradients(lambda: x.sum(), [x])


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        W = tn.tensor(rng.normal(size=(8, 8)), requires_grad=True)
        x = tn.tensor(rng.normal(size=(3, 8)))
        W.zero_grad()
        loss = tn.log_softmax(tn.gelu(tn.matmul(x, W))).sum()
        backward(loss)
        return loss.data.copy(), W.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_no_grad_records_nothing():
    W = tn.tensor(np.ones((2, 2)), requires_grad=True)
    with tn.no_grad():
        out = tn.matmul(W, W)
    assert not out.requires_grad and out._parents == ()
