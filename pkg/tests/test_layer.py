import numpy as np
import pytest

from mole import tensor as tn
from mole.labels import NL, PAD, LanguageRegistry
from mole.layer import (MoleLinear, Routing, active_adapters, lora_parameter_count,
                        routed_forward, trainable_parameter_count)
from mole.linalg import SplitPlan, split_init
from mole.tensor import Tensor


def dense_oracle(layer, X, labels):
    out = np.zeros((X.shape[0], layer.out_features))
    for t, lab in enumerate(labels):
        if lab != PAD:
            out[t] = layer.dense(int(lab)) @ X[t]
    return out


def make_layer(d=6, k=5, plan=SplitPlan(2, 1), K=2, seed=0, dtype=np.float64, perturb=True):
    rng = np.random.default_rng(seed)
    init = split_init(rng.normal(size=(d, k)), plan, K)
    layer = MoleLinear.from_init(init, dtype=dtype)
    if perturb:  # break symmetry so every path differs
        for p in layer.trainable():
            p.data += 0.1 * rng.normal(size=p.shape)
    return layer, init


def test_active_adapters():
    assert active_adapters(2) == {"shared", "expert(2)"}
    assert active_adapters(NL) == {"nl"}
    assert active_adapters(PAD) == set()


def test_hand_built_paths():
    T = lambda a: Tensor(np.array(a, dtype=np.float64), requires_grad=True)  # noqa: E731
    layer = MoleLinear(
        Tensor(np.eye(2)),
        shared=(T([[1.0], [0.0]]), T([[1.0, 0.0]])),      # B_s A_s = [[1,0],[0,0]]
        experts=[(T([[0.0], [1.0]]), T([[0.0, 1.0]]))],   # B_e A_e = [[0,0],[0,1]]
        nl=(T([[1.0], [0.0]]), T([[1.0, 0.0]])),          # B_n A_n = [[1,0],[0,0]]
    )
    x = Tensor(np.array([[1.0, 1.0], [1.0, 1.0]]))
    y = routed_forward(x, [0, NL], layer)
    np.testing.assert_array_equal(y.data, [[2.0, 2.0], [2.0, 1.0]])


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
def test_pissa_init_matches_W(dtype, tol):
    rng = np.random.default_rng(1)
    W = rng.normal(size=(6, 5))
    layer = MoleLinear.from_init(split_init(W, SplitPlan(2, 1), 3), dtype=dtype)
    X = rng.normal(size=(7, 5))
    labels = [NL, 0, 1, 2, 0, NL, 2]
    y = routed_forward(Tensor(X.astype(dtype)), labels, layer).data
    ref = X @ W.T
    assert np.linalg.norm(y - ref) / np.linalg.norm(ref) <= tol


def test_routed_matches_dense_definition():
    layer, _ = make_layer()
    X = np.random.default_rng(2).normal(size=(8, 5))
    labels = [0, NL, 1, 1, NL, 0, PAD, PAD]
    y = routed_forward(Tensor(X), labels, layer).data
    ref = dense_oracle(layer, X, labels)
    assert np.linalg.norm(y - ref) / np.linalg.norm(ref) <= 1e-10
    assert np.all(y[6:] == 0)


def test_mixed_batch_equals_single_label_calls():
    layer, _ = make_layer()
    X = np.random.default_rng(3).normal(size=(3, 5))
    labels = [NL, 0, 1]
    y = routed_forward(Tensor(X), labels, layer).data
    rows = [routed_forward(Tensor(X[i:i + 1]), [lab], layer).data[0] for i, lab in enumerate(labels)]
    np.testing.assert_allclose(y, np.stack(rows), atol=1e-13)


def test_permutation_equivariance():
    layer, _ = make_layer()
    rng = np.random.default_rng(4)
    X = rng.normal(size=(6, 5))
    labels = np.array([0, NL, 1, 0, NL, 1])
    p = rng.permutation(6)
    y = routed_forward(Tensor(X), labels, layer).data
    yp = routed_forward(Tensor(X[p]), labels[p], layer).data
    np.testing.assert_allclose(yp, y[p], atol=1e-13)


def test_length_mismatch_and_unknown_language():
    layer, _ = make_layer()
    X = Tensor(np.zeros((3, 5)))
    with pytest.raises(ValueError):
        routed_forward(X, [0, 1], layer)
    with pytest.raises(KeyError):
        routed_forward(X, [0, 1, 5], layer)


def _loss(layer, X, labels, w):
    return tn.mul(routed_forward(X, labels, layer), w).sum()


def test_mixed_label_gradcheck():
    layer, _ = make_layer(K=2)
    rng = np.random.default_rng(5)
    X = Tensor(rng.normal(size=(6, 5)))
    labels = [NL, 0, 1, NL, 1, 0]
    w = Tensor(rng.normal(size=(6, 6)))
    names = {f"p{i}": p for i, p in enumerate(layer.trainable())}
    rep = tn.check_gradients(lambda: _loss(layer, X, labels, w), names, h=1e-5, tol=1e-4)
    assert rep.passed, rep.rel_errors


def test_gradient_routing_zeros():
    layer, _ = make_layer(K=3)
    rng = np.random.default_rng(6)
    X = Tensor(rng.normal(size=(5, 5)))
    w = Tensor(rng.normal(size=(5, 6)))
    tn.zero_grad(layer.trainable())
    tn.backward(_loss(layer, X, [0, 0, 2, PAD, PAD], w))
    Bn, An = layer.nl
    for p in [*layer.experts[1], Bn, An]:
        assert np.all(p.grad == 0)
    assert np.any(layer.experts[0][1].grad != 0) and np.any(layer.experts[2][1].grad != 0)
    assert layer.W0.grad is None


def test_nl_only_batch_trains_only_nl():
    layer, _ = make_layer(K=2)
    X = Tensor(np.random.default_rng(7).normal(size=(3, 5)))
    tn.zero_grad(layer.trainable())
    tn.backward(routed_forward(X, [NL, NL, NL], layer).sum())
    for p in [*layer.shared, *layer.experts[0], *layer.experts[1]]:
        assert np.all(p.grad == 0)


def test_zero_rank_experts_route_shared_only():
    layer, _ = make_layer(plan=SplitPlan(3, 0))
    X = np.random.default_rng(8).normal(size=(4, 5))
    labels = [0, 1, NL, 0]
    y = routed_forward(Tensor(X), labels, layer).data
    np.testing.assert_allclose(y, dense_oracle(layer, X, labels), atol=1e-12)


def test_parameter_counts():
    single = lora_parameter_count(2048, 5504, 64)
    assert single == 483_328
    assert round(single / (2048 * 5504) * 100, 1) == 4.3
    assert trainable_parameter_count(10, 20, SplitPlan(3, 0), 7) == 30 * 6
    layer, _ = make_layer(d=6, k=5, plan=SplitPlan(2, 1), K=2)
    assert layer.num_trainable() == trainable_parameter_count(6, 5, SplitPlan(2, 1), 2)


def test_registry_validation_and_fallback():
    reg = LanguageRegistry(("snake", "curly"))
    assert reg.resolve("curly") == 1
    assert reg.resolve("rust") == NL
    with pytest.raises(KeyError):
        LanguageRegistry(("a",), fallback="error").resolve("b")
    with pytest.raises(ValueError):
        LanguageRegistry(("a", "a"))
    with pytest.raises(ValueError):
        LanguageRegistry(())


def test_routing_groups():
    r = Routing([NL, 1, 0, PAD, 1], 2)
    assert r.counts == [1, 2] and r.n_nl == 1
    np.testing.assert_array_equal(r.perm, [2, 1, 4, 0])
