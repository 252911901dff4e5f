import numpy as np
import pytest

from mole.labels import NL, LanguageRegistry
from mole.linalg import SplitPlan
from mole.model import Model, ModelConfig

REG = LanguageRegistry(("snake", "curly", "paren"))
SMALL = ModelConfig(layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=300, max_seq_len=24,
                    plan=SplitPlan(3, 1), registry=REG)


@pytest.fixture(scope="module")
def base():
    m = Model.init_plain(SMALL, seed=0)
    rng = np.random.default_rng(1)
    for t in m.parameters():  # move away from the structured init
        t.data += rng.normal(scale=0.05, size=t.shape).astype(t.dtype)
    return m


def rand_batch(seed=0, B=2, T=12):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, SMALL.vocab_size, size=(B, T))
    labels = rng.choice([NL, 0, 1, 2], size=(B, T))
    return ids, labels


def rel(a, b):
    return float(np.abs(a - b).max() / np.abs(b).max())


def test_split_preserves_logits_f32(base):
    mole = base.split()
    for seed in range(3):
        ids, labels = rand_batch(seed)
        assert rel(mole.forward(ids, labels).data, base.forward(ids).data) <= 1e-5


def test_split_preserves_logits_f64(base):
    b64 = Model(SMALL, "plain", base.state(), dtype=np.float64)
    mole = b64.split()
    ids, labels = rand_batch(4)
    assert rel(mole.forward(ids, labels).data, b64.forward(ids).data) <= 1e-10


def test_nl_and_pl_equal_at_init(base):
    mole = Model(SMALL, "plain", base.state(), dtype=np.float64).split()
    ids, _ = rand_batch(5)
    nl = mole.forward(ids, np.full(ids.shape, NL)).data
    pl = mole.forward(ids, np.zeros(ids.shape, dtype=np.int64)).data
    assert rel(nl, pl) <= 1e-10


@pytest.mark.parametrize("perturb,labels_value", [
    ("expert/curly/", 0), ("expert/paren/", 0), ("nl/", 0),
    ("expert/snake/", NL), ("shared/", NL), ("expert/snake/", 2),
])
def test_routing_isolation_bit_exact(base, perturb, labels_value):
    mole = base.split()
    ids, _ = rand_batch(6)
    labels = np.full(ids.shape, labels_value)
    before = mole.forward(ids, labels).data.copy()
    rng = np.random.default_rng(7)
    mole.load_state({k: v + rng.normal(size=v.shape).astype(v.dtype)
                     for k, v in mole.state().items() if k.startswith(perturb)})
    assert np.array_equal(mole.forward(ids, labels).data, before)


def test_causality(base):
    mole = base.split()
    for t in mole.parameters():
        t.data += 0.05
    ids, labels = rand_batch(8, B=1, T=16)
    full = mole.forward(ids, labels).data
    ids2, labels2 = ids.copy(), labels.copy()
    ids2[0, 9:] = (ids2[0, 9:] + 17) % SMALL.vocab_size
    labels2[0, 9:] = NL
    cut = mole.forward(ids2, labels2).data
    np.testing.assert_allclose(cut[0, :9], full[0, :9], rtol=0, atol=1e-6)
    assert not np.allclose(cut[0, 9:], full[0, 9:])


def test_overlength_rejected(base):
    with pytest.raises(ValueError, match="max_seq_len"):
        base.forward(np.zeros((1, SMALL.max_seq_len + 1), dtype=np.int64))


def test_desk_parameter_count():
    desk = Model.init_plain(ModelConfig(), seed=0)
    mole = desk.split()
    assert mole.num_trainable() == mole.expected_num_trainable() == 2 * 4 * (128 + 512) * 40
    assert mole.num_trainable() == 204_800
    assert desk.with_lora(16).num_trainable() == 2 * 4 * (128 + 512) * 16
    trainable = set(mole.named_parameters())
    assert trainable and all(not k.startswith("base/") for k in trainable)


def test_zero_rank_plan_has_nothing_to_train(base):
    mole = Model(SMALL.replace(plan=SplitPlan(0, 0)), "plain", base.state()).split()
    assert mole.num_trainable() == 0


def test_nl_expert_variant(base):
    m = base.split(nl_expert=True)
    assert m.expert_names[-1] == "NL" and not any(k.startswith("nl/") for k in m.state())
    assert m.num_trainable() == m.expected_num_trainable()
    assert m.route_labels(np.array([NL, 0])).tolist() == [3, 0]
    ids, labels = rand_batch(9)
    assert rel(m.forward(ids, labels).data, base.forward(ids).data) <= 1e-5


def test_lora_and_full_ft_start_at_base(base):
    ids, labels = rand_batch(10)
    ref = base.forward(ids).data
    assert rel(base.with_lora(4).forward(ids, labels).data, ref) <= 1e-6
    ft = base.full_ft()
    assert np.array_equal(ft.forward(ids).data, ref)
    assert ft.num_trainable() == sum(v.size for v in base.state().values())


def test_config_json_roundtrip():
    assert ModelConfig.from_json(SMALL.to_json()) == SMALL
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(d_model=16, d_ff=32, plan=SplitPlan(12, 8))  # r_n beyond min(d, d_ff)


def test_state_roundtrip_rejects_unknown(base):
    m = base.split()
    clone = Model(SMALL, "mole", m.state())
    assert all(np.array_equal(a, clone.state()[k]) for k, a in m.state().items())
    with pytest.raises(KeyError):
        Model(SMALL, "mole", {**m.state(), "extra/x": np.zeros(1)})
