import numpy as np
import pytest

from mole.data import corpus as C
from mole.data.bpe import Vocabulary
from mole.data.fences import Transition
from mole.infer import (MismatchMatrix, RouterState, evaluate, generate, generate_auto,
                        generate_manual, mismatch_matrix)
from mole.labels import NL, LanguageRegistry
from mole.linalg import SplitPlan
from mole.model import Model, ModelConfig

REG = LanguageRegistry(("snake", "curly", "paren"))
CFG = ModelConfig(layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=300, max_seq_len=160,
                  plan=SplitPlan(3, 1), registry=REG)


@pytest.fixture(scope="module")
def setup():
    samples = C.synth_corpus({"n_samples": 60}, 0)
    vocab = Vocabulary.train([C.prompt_and_answer(s) for s in samples], CFG.vocab_size)
    base = Model.init_plain(CFG, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    for t in base.parameters():
        t.data += rng.normal(scale=0.3, size=t.shape)
    return samples, vocab, base


def perturb(model, prefix, seed=1):
    rng = np.random.default_rng(seed)
    model.load_state({k: v + rng.normal(size=v.shape) for k, v in model.state().items()
                      if k.startswith(prefix)})


def test_router_replay_and_diagnostics():
    r = RouterState(REG)
    r.feed("intro\n```curly\nlet x = 1;\n")
    assert r.in_code() and r.path == REG.index("curly")
    assert RouterState.replay(r.log) == r.path
    assert any("unclosed" in d for d in r.finish())
    r = RouterState(REG)
    r.feed("Plain prose only, no fences at all.\n")
    assert r.log == [] and r.path == NL
    with pytest.raises(ValueError):
        RouterState.replay([Transition(0, 0, NL, "close")])  # cannot start inside code


def test_unregistered_fence_routes_nl():
    r = RouterState(REG)
    r.feed("```cobol\nMOVE 1\n```\n")
    assert r.log == [] and r.path == NL
    assert any("cobol" in d for d in r.finish())


def test_generation_log_replays(setup):
    samples, vocab, base = setup
    mole = base.split()
    perturb(mole, "expert/")
    for g in generate(mole, vocab, [s.question for s in samples[:4]], max_tokens=30):
        assert RouterState.replay(g.log) in (NL, 0, 1, 2)
        assert len(g.tokens) == len(g.labels) <= 30
        assert g.stopped in ("eos", "max_tokens", "context")
        assert vocab.decode(g.tokens) == g.text


def test_batched_equals_single(setup):
    samples, vocab, base = setup
    mole = base.split()
    perturb(mole, "expert/")
    qs = [s.question for s in samples[:3]]
    batch = generate(mole, vocab, qs, max_tokens=20)
    for q, g in zip(qs, batch):
        solo = generate_auto(mole, vocab, q, max_tokens=20)
        assert solo.tokens == g.tokens and solo.labels == g.labels


def test_manual_equals_auto_when_paths_coincide(setup):
    # at split init every path reconstructs the same weight, so routing cannot matter
    samples, vocab, base = setup
    mole = base.split()
    q = samples[0].question
    auto = generate_auto(mole, vocab, q, max_tokens=25)
    manual = generate_manual(mole, vocab, q, "curly", max_tokens=25)
    assert auto.text == manual.text
    assert set(manual.labels) <= {REG.index("curly")}


def test_manual_ignores_other_experts(setup):
    samples, vocab, base = setup
    mole = base.split()
    perturb(mole, "expert/snake/", seed=2)
    q = "In Snake, f(x) returns x plus 1."  # prose prompt: routes NL only
    before = generate_manual(mole, vocab, q, "snake", max_tokens=25)
    perturb(mole, "expert/curly/", seed=3)
    perturb(mole, "expert/paren/", seed=4)
    after = generate_manual(mole, vocab, q, "snake", max_tokens=25)
    assert before.tokens == after.tokens
    with pytest.raises(KeyError):
        generate_manual(mole, vocab, q, "cobol")


def test_empty_prompt_is_deterministic(setup):
    _, vocab, base = setup
    a = generate_auto(base, vocab, None, max_tokens=15)
    b = generate_auto(base, vocab, None, max_tokens=15)
    assert a.tokens == b.tokens and a.log == b.log
    assert generate_auto(base, vocab, "", max_tokens=5).stopped in ("eos", "max_tokens")


def test_kv_cache_matches_full_forward(setup):
    _, vocab, base = setup
    mole = base.split()
    perturb(mole, "")
    rng = np.random.default_rng(5)
    lens = np.array([7, 4])
    ids = rng.integers(0, CFG.vocab_size, size=(2, 7))
    labels = rng.choice([NL, 0, 1, 2], size=(2, 7))
    cache = mole.prefill(ids, labels, capacity=12)
    seqs = [list(ids[b, :lens[b]]) for b in range(2)]
    labs = [list(labels[b, :lens[b]]) for b in range(2)]
    pos = lens.copy()
    for step in range(4):
        tok = rng.integers(0, CFG.vocab_size, size=2)
        lab = rng.choice([NL, 0, 2], size=2)
        out = mole.decode_step(cache, tok, lab, pos)
        for b in range(2):
            seqs[b].append(tok[b])
            labs[b].append(lab[b])
            full = mole.forward(np.array(seqs[b]), np.array(labs[b])).data[-1]
            np.testing.assert_allclose(out[b], full, rtol=1e-10, atol=1e-10)
        pos += 1


def test_prompt_too_long_rejected(setup):
    _, vocab, base = setup
    with pytest.raises(ValueError):
        generate_auto(base, vocab, "x " * 200, max_tokens=4)


@pytest.fixture(scope="module")
def small_eval(setup):
    samples, vocab, base = setup
    mole = base.split()
    perturb(mole, "expert/")
    perturb(mole, "nl/")
    return mole, vocab, samples[:24]


def test_evaluate_report_shape(small_eval):
    mole, vocab, samples = small_eval
    ev = evaluate(mole, vocab, samples, max_tokens=20)
    assert set(ev["per_language"]) == set(REG.names)
    for v in ev["per_language"].values():
        assert np.isfinite(v["nll"]) and 0 <= v["functional_match"] <= 1
    assert ev["forced_path"] is None and np.isfinite(ev["mean_nll"])


def test_forced_matched_equals_unforced(small_eval):
    mole, vocab, samples = small_eval
    single = [s for s in samples if s.meta["task"] != "translate"]
    plain = evaluate(mole, vocab, single, functional=False)
    for k, lang in enumerate(REG.names):
        only = [s for s in single if s.meta["lang"] == lang]
        if not only:
            continue
        forced = evaluate(mole, vocab, only, forced_path=k, functional=False)
        assert forced["per_language"][lang]["nll"] == pytest.approx(
            plain["per_language"][lang]["nll"], rel=1e-12)
        assert forced["forced_path"] == f"PL({lang})"


def test_mismatch_matrix_shape_and_csv(small_eval):
    mole, vocab, samples = small_eval
    mm = mismatch_matrix(mole, vocab, samples)
    assert mm.values.shape == (4, 3) and mm.rows == ["snake", "curly", "paren", "NL"]
    assert np.isfinite(mm.values).all()
    lines = mm.to_csv().splitlines()
    assert lines[0] == "forced_adapter,snake,curly,paren" and len(lines) == 5
    back = MismatchMatrix.from_json(mm.to_json())
    assert np.array_equal(back.values, mm.values)
    assert mm.off_diagonal_mean(0) == pytest.approx(np.mean(mm.values[1:, 0]))
