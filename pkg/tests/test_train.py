import math

import numpy as np
import pytest

from mole import tensor as tn
from mole.data import corpus as C
from mole.data.bpe import Vocabulary, tokenize_and_align
from mole.data.fences import label_sample
from mole.labels import LanguageRegistry
from mole.linalg import SplitPlan
from mole.model import Model, ModelConfig
from mole.tensor import Tensor
from mole.train import (AdamW, TrainConfig, batch_loss, batches, clip_grad_norm, collate, lr_at,
                        masked_nll, train)

REG = LanguageRegistry(("snake", "curly", "paren"))
CFG = ModelConfig(layers=1, d_model=16, n_heads=2, d_ff=32, vocab_size=300, max_seq_len=96,
                  plan=SplitPlan(3, 1), registry=REG)


@pytest.fixture(scope="module")
def corpus():
    samples = C.synth_corpus({"n_samples": 120}, 0)
    vocab = Vocabulary.train([C.prompt_and_answer(s) for s in samples], CFG.vocab_size)
    tok = [tokenize_and_align(label_sample(s.question, s.answer, REG), vocab) for s in samples]
    return samples, tok


@pytest.fixture(scope="module")
def base(corpus):
    m, _ = train(TrainConfig(mode="pretrain", steps=30, peak_lr=3e-3, batch_size=8), corpus[1],
                 CFG)
    return m


# -- loss ----------------------------------------------------------------------

def test_uniform_logits_give_log_v():
    V = 7
    logits = Tensor(np.zeros((1, 3, V)))
    loss = masked_nll(logits, [[1, 2, 3]], [[True, False, True]])
    assert loss.item() == pytest.approx(math.log(V))


def test_confident_correct_logit_gives_zero_loss():
    logits = np.zeros((1, 2, 5))
    logits[0, 1, 4] = 60.0
    loss = masked_nll(Tensor(logits), [[0, 4]], [[False, True]])
    assert loss.item() == pytest.approx(0.0, abs=1e-20)


def test_two_positions_hand_oracle():
    logits = np.array([[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0], [9.0, 9.0, 9.0]]])
    targets = [[1, 0, 2]]
    mask = [[True, True, False]]
    nll = [-(z[t] - math.log(sum(math.exp(v) for v in z)))
           for z, t in zip(logits[0][:2], targets[0][:2])]
    assert masked_nll(Tensor(logits), targets, mask).item() == pytest.approx(sum(nll) / 2,
                                                                             rel=1e-12)


def test_all_false_mask_rejected():
    with pytest.raises(ValueError):
        masked_nll(Tensor(np.zeros((1, 2, 3))), [[0, 1]], [[False, False]])


def test_masked_positions_get_exactly_zero_gradient():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 6))
    mask = np.array([[True, False, True, False], [False, False, True, True]])
    targets = rng.integers(0, 6, size=(2, 4))
    logits = Tensor(x.copy(), requires_grad=True)
    tn.backward(masked_nll(logits, targets, mask))
    assert np.all(logits.grad[~mask] == 0)
    # finite differences agree on the live positions
    h = 1e-6
    for b, t, v in [(0, 0, 1), (1, 3, 5), (0, 1, 2)]:
        xp, xm = x.copy(), x.copy()
        xp[b, t, v] += h
        xm[b, t, v] -= h
        fd = (masked_nll(Tensor(xp), targets, mask).item()
              - masked_nll(Tensor(xm), targets, mask).item()) / (2 * h)
        assert logits.grad[b, t, v] == pytest.approx(fd, abs=1e-8)


# -- schedule ---------------------------------------------------------------------

def test_lr_schedule_examples():
    assert lr_at(0, 1000, 1e-3, 0.05) == 0
    assert lr_at(50, 1000, 1e-3, 0.05) == pytest.approx(1e-3)
    assert lr_at(25, 1000, 1e-3, 0.05) == pytest.approx(0.5e-3)
    assert lr_at(1000, 1000, 1e-3, 0.05) == 0
    assert lr_at(525, 1000, 1e-3, 0.05) == pytest.approx(0.5e-3)
    assert lr_at(0, 10, 1.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        lr_at(11, 10, 1.0, 0.05)


def test_train_config_validation():
    with pytest.raises(ValueError, match="ablations"):
        TrainConfig(mode="all-lang", ablation="std-init")
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(mode="per-lang")
    assert TrainConfig(ablation="shared-last").plan(SplitPlan(12, 4)).order == "shared-last"
    assert TrainConfig(ablation="std-init").plan(SplitPlan(12, 4)).scheme == "standard"


# -- optimiser -----------------------------------------------------------------------

def test_adamw_matches_reference_step():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, 0.25])
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    opt.step()
    # first step: mhat = g, vhat = g^2, update = lr * sign(g) (up to eps)
    want = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign([0.5, 0.25])
    np.testing.assert_allclose(p.data, want, rtol=1e-7)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([a], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(a.grad) == pytest.approx(1.0, rel=1e-6)


def test_inactive_experts_keep_untouched_state(base, corpus):
    samples, tok = corpus
    snake_only = [t for s, t in zip(samples, tok) if s.meta["lang"] == "snake"
                  and s.meta["task"] != "translate"][:4]
    model = base.split()
    opt = AdamW(model.parameters(), lr=1e-2, weight_decay=0.01)
    named = model.named_parameters()
    before = {k: v.data.copy() for k, v in named.items()}
    b = collate(snake_only, CFG.max_seq_len)
    assert set(np.unique(b.labels)) <= {-2, -1, 0}
    opt.zero_grad()
    tn.backward(batch_loss(model, b))
    opt.step()
    for k, p in named.items():
        m, v, t = opt.state_of(p)
        if k.startswith(("expert/curly/", "expert/paren/")):
            assert t == 0 and not m.any() and not v.any()
            assert np.array_equal(p.data, before[k])
        elif k.startswith(("expert/snake/", "shared/")):
            assert t == 1
    # moments exist only for trainable tensors
    assert len(opt.params) == len(named)


# -- training ------------------------------------------------------------------------

def test_step0_loss_equals_base_loss(base, corpus):
    tok = corpus[1]
    cfg = TrainConfig(mode="mole", epochs=1, batch_size=8, seed=3)
    seen = []
    train(cfg, tok[:16], base=base, on_step=lambda i, loss: seen.append(loss))
    first = next(batches(tok[:16], 8, np.random.default_rng(3), epochs=1))
    with tn.no_grad():
        ref = batch_loss(base, collate(first, CFG.max_seq_len)).item()
    assert seen[0] == pytest.approx(ref, rel=1e-5)


def test_frozen_base_bytes_unchanged(base, corpus):
    split = base.split()
    frozen = {k: v.tobytes() for k, v in split.state().items() if k.startswith("base/")}
    model, _ = train(TrainConfig(mode="mole", epochs=1, batch_size=8, peak_lr=1e-2),
                     corpus[1][:40], base=base)
    after = model.state()
    assert all(after[k].tobytes() == b for k, b in frozen.items())
    assert any(not np.array_equal(after[k], v) for k, v in split.state().items()
               if k.startswith("expert/"))


def test_training_is_deterministic(base, corpus):
    cfg = TrainConfig(mode="all-lang", epochs=1, batch_size=8, seed=5)
    _, r1 = train(cfg, corpus[1][:40], base=base)
    _, r2 = train(cfg, corpus[1][:40], base=base)
    assert r1.losses == r2.losses and len(r1.losses) == 5


@pytest.mark.parametrize("mode,lang", [("per-lang", "curly"), ("full-ft", None)])
def test_baseline_modes_run(base, corpus, mode, lang):
    model, rec = train(TrainConfig(mode=mode, lang=lang, steps=2, batch_size=4), corpus[1],
                       base=base)
    assert rec.total_steps == 2 and model.mode == ("full-ft" if mode == "full-ft" else "lora")


def test_non_pretrain_needs_base(corpus):
    with pytest.raises(ValueError, match="base"):
        train(TrainConfig(mode="mole", steps=1), corpus[1], CFG)


def test_infeasible_rank_plan_rejected(base, corpus):
    with pytest.raises(ValueError):
        train(TrainConfig(mode="mole", steps=1, r_s=12, r_e=8), corpus[1], base=base)


def test_200_step_smoke(corpus):
    _, rec = train(TrainConfig(mode="pretrain", steps=200, peak_lr=3e-3, batch_size=8, seed=0),
                   corpus[1], CFG)
    assert len(rec.losses) == 200
    assert np.mean(rec.losses[-10:]) < rec.losses[0]
