"""Question/answer corpora: JSONL I/O, code-fraction filter, stratified split,
and the synthetic three-language generator."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..labels import LanguageRegistry
from . import toylang as tl
from .fences import code_blocks, code_char_fraction, prompt_text

TASKS = ("synthesize", "summarize", "translate")


@dataclass
class RawSample:
    question: str
    answer: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.question, str) or not isinstance(self.answer, str):
            raise TypeError("question and answer must be strings")
        if not self.answer:
            raise ValueError("answer must be nonempty")

    def to_json(self) -> dict:
        d = {"question": self.question, "answer": self.answer}
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_json(cls, d) -> "RawSample":
        if not isinstance(d, dict):
            raise TypeError("record is not an object")
        meta = d.get("meta", {})
        if not isinstance(meta, dict):
            raise TypeError("meta must be an object")
        return cls(d["question"], d["answer"], meta)


def _exact(x: float) -> Fraction:
    # the decimal the user meant: 0.05 -> 1/20, 1/3 -> 1/3 (binary floats overshoot)
    return Fraction(x).limit_denominator(10**6)


def read_jsonl(path) -> tuple[list[RawSample], int]:
    """Samples and the number of malformed lines skipped."""
    samples, bad = [], 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                samples.append(RawSample.from_json(json.loads(line)))
            except (ValueError, TypeError, KeyError):
                bad += 1
    return samples, bad


def write_jsonl(samples, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
    tmp.replace(path)


def _block_chars(sample: RawSample) -> Counter:
    out = Counter()
    for text in (sample.question, sample.answer):
        for b in code_blocks(text):
            out[b.lang] += b.size
    return out


def dominant_language(sample: RawSample, registry: LanguageRegistry) -> str | None:
    """Registered language with the most code characters; ties go to registry order."""
    chars = _block_chars(sample)
    best, best_n = None, -1
    for name in registry.names:
        if name in chars and chars[name] > best_n:
            best, best_n = name, chars[name]
    return best


def filter_corpus(samples, registry: LanguageRegistry,
                  threshold: float = 1 / 3) -> tuple[list[RawSample], dict]:
    """Keep samples whose code fraction is at least ``threshold`` (inclusive)
    and whose blocks all name registered languages.

    ``samples`` may hold dicts straight from JSON; malformed ones are counted.
    """
    thr = _exact(threshold)
    kept: list[RawSample] = []
    per_lang = {name: {"samples": 0, "code_chars": 0} for name in registry.names}
    stats = {"total": 0, "kept": 0, "malformed": 0, "below_threshold": 0,
             "unregistered_language": 0, "threshold": float(threshold)}
    for s in samples:
        stats["total"] += 1
        try:
            if not isinstance(s, RawSample):
                s = RawSample.from_json(s)
        except (ValueError, TypeError, KeyError):
            stats["malformed"] += 1
            continue
        total = len(s.question) + len(s.answer)
        chars = _block_chars(s)
        frac = Fraction(sum(chars.values()), total) if total else Fraction(0)
        if frac < thr:
            stats["below_threshold"] += 1
            continue
        if any(lang not in registry for lang in chars):
            stats["unregistered_language"] += 1
            continue
        kept.append(s)
        dom = dominant_language(s, registry)
        if dom is not None:
            per_lang[dom]["samples"] += 1
        for lang, n in chars.items():
            per_lang[lang]["code_chars"] += n
    stats["kept"] = len(kept)
    stats["per_language"] = per_lang
    return kept, stats


def split_train_valid(samples, registry: LanguageRegistry, valid_fraction: float = 0.05,
                      seed: int = 0) -> tuple[list[RawSample], list[RawSample]]:
    """Per-language stratified split; each stratum gives ``ceil(n * fraction)``
    validation samples. Samples without a registered block form their own stratum."""
    if not 0 <= valid_fraction < 1:
        raise ValueError(f"valid_fraction must be in [0, 1), got {valid_fraction}")
    frac = _exact(valid_fraction)
    strata: dict = {name: [] for name in registry.names}
    strata[None] = []
    for i, s in enumerate(samples):
        strata[dominant_language(s, registry)].append(i)
    rng = np.random.default_rng(seed)
    valid_idx: set[int] = set()
    for key in [*registry.names, None]:
        idx = strata[key]
        if not idx:
            continue
        n_valid = math.ceil(len(idx) * frac)
        pick = rng.permutation(len(idx))[:n_valid]
        valid_idx.update(idx[j] for j in pick)
    train = [s for i, s in enumerate(samples) if i not in valid_idx]
    valid = [s for i, s in enumerate(samples) if i in valid_idx]
    return train, valid


# -- synthetic corpus -----------------------------------------------------------

_FN_NAMES = ("f", "g", "h", "calc", "step", "mix", "shift", "scale", "bump", "area")
_PARAMS = (("x",), ("n",), ("a",), ("v",))
_PARAMS2 = (("x", "y"), ("a", "b"), ("n", "m"), ("p", "q"))
_LOCALS = ("t", "z", "k", "s")
_OPS = ("+", "-", "*")


def _random_program(rng: np.random.Generator) -> tl.Program:
    name = str(rng.choice(_FN_NAMES))
    kind = int(rng.integers(4))
    num = lambda: tl.Num(int(rng.integers(1, 10)))  # noqa: E731
    op = lambda: str(rng.choice(_OPS))  # noqa: E731
    if kind == 1:
        (p,) = _PARAMS[rng.integers(len(_PARAMS))]
        loc = str(rng.choice(_LOCALS))
        body = tl.Let(loc, tl.Bin(op(), tl.Var(p), num()), tl.Bin(op(), tl.Var(loc), num()))
        return tl.Program(name, (p,), body)
    if kind == 2:
        p, q = _PARAMS2[rng.integers(len(_PARAMS2))]
        inner = tl.Bin(op(), tl.Var(p), tl.Var(q))
        body = tl.Bin(op(), inner, num()) if rng.random() < 0.6 else inner
        return tl.Program(name, (p, q), body)
    (p,) = _PARAMS[rng.integers(len(_PARAMS))]
    if kind == 3:
        cmp = str(rng.choice(["<", ">"]))
        body = tl.If(cmp, tl.Var(p), num(), tl.Bin(op(), tl.Var(p), num()),
                     tl.Bin(op(), tl.Var(p), num()))
        return tl.Program(name, (p,), body)
    return tl.Program(name, (p,), tl.Bin(op(), tl.Var(p), num()))


def _tests(prog: tl.Program, rng: np.random.Generator, n: int = 4) -> list[list]:
    out = []
    for _ in range(n):
        args = [int(a) for a in rng.integers(-5, 10, size=len(prog.params))]
        out.append([args, tl.run(prog, args)])
    return out


def _fence(code: str, lang: str) -> str:
    return f"```{lang}\n{code}\n```"


def _make_sample(prog: tl.Program, task: str, lang: str, src_lang: str | None,
                 rng: np.random.Generator) -> RawSample:
    # wording is terse on purpose: paren code is short, and every sample must
    # reach a one-third code fraction whatever the program shape
    disp = tl.DISPLAY[lang]
    phrase = tl.describe(prog.body)
    meta = {"task": task, "lang": lang, "params": list(prog.params),
            "tests": _tests(prog, rng)}
    if task == "synthesize":
        q = f"In {disp}, {tl.signature(prog)} {phrase}."
        a = _fence(tl.render(prog, lang), lang)
    elif task == "summarize":
        q = f"Explain:\n{_fence(tl.render(prog, lang), lang)}"
        a = f"{phrase[0].upper()}{phrase[1:]}."
    else:
        meta["src_lang"] = src_lang
        q = (f"Translate this {tl.DISPLAY[src_lang]} code to {disp}:\n"
             f"{_fence(tl.render(prog, src_lang), src_lang)}")
        a = _fence(tl.render(prog, lang), lang)
    return RawSample(q, a, meta)


def validate_synth_spec(spec: dict) -> dict:
    langs = spec.get("languages", list(tl.LANGUAGES))
    for name in langs:
        if name not in tl.LANGUAGES:
            raise ValueError(f"unknown synthetic language {name!r}; choose from {tl.LANGUAGES}")
    if len(langs) < 2 or len(set(langs)) != len(langs):
        raise ValueError("synthetic corpus needs at least two distinct languages")
    tasks = spec.get("tasks", {t: 1.0 for t in TASKS})
    if isinstance(tasks, list):
        tasks = {t: 1.0 for t in tasks}
    for t, w in tasks.items():
        if t not in TASKS:
            raise ValueError(f"unknown task {t!r}; choose from {TASKS}")
        if w < 0:
            raise ValueError(f"negative task weight for {t}")
    if not any(w > 0 for w in tasks.values()):
        raise ValueError("task mix has no positive weight")
    n = int(spec.get("n_samples", 1000))
    if n < 0:
        raise ValueError("n_samples must be non-negative")
    return {"languages": list(langs), "tasks": dict(tasks), "n_samples": n,
            "min_code_fraction": float(spec.get("min_code_fraction", 1 / 3))}


def synth_corpus(spec: dict, seed: int = 0) -> list[RawSample]:
    """Deterministic synthetic corpus; one program per sample, resampled until
    the code fraction clears ``min_code_fraction``."""
    spec = validate_synth_spec(spec)
    rng = np.random.default_rng(seed)
    langs = spec["languages"]
    names = list(spec["tasks"])
    w = np.array([spec["tasks"][t] for t in names], dtype=np.float64)
    w /= w.sum()
    thr = _exact(spec["min_code_fraction"])
    out = []
    for _ in range(spec["n_samples"]):
        task = names[rng.choice(len(names), p=w)]
        lang = langs[rng.integers(len(langs))]
        src = None
        if task == "translate":
            others = [x for x in langs if x != lang]
            src = others[rng.integers(len(others))]
        for _attempt in range(1000):
            s = _make_sample(_random_program(rng), task, lang, src, rng)
            if code_char_fraction(s.question, s.answer) >= thr:
                break
        else:  # pragma: no cover - the templates clear 1/3 easily
            raise RuntimeError(f"could not generate a {task}/{lang} sample above threshold")
        out.append(s)
    return out


def pretrain_documents(spec: dict, seed: int = 0, paired_fraction: float = 0.0) -> list[str]:
    """Documents for base pretraining.

    Most are a lone fenced program or a lone English description. A
    ``paired_fraction`` share juxtaposes one program in two syntaxes, or a
    description and its code, with no instruction wording; the finetuning
    question/answer format itself never appears.
    """
    spec = validate_synth_spec(spec)
    if not 0 <= paired_fraction <= 1:
        raise ValueError("paired_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    langs = spec["languages"]
    docs = []
    for _ in range(spec["n_samples"]):
        prog = _random_program(rng)
        text = f"{tl.signature(prog)} {tl.describe(prog.body)}."
        r = rng.random()
        if r < paired_fraction / 2:
            a, b = rng.choice(len(langs), size=2, replace=False)
            docs.append(f"{_fence(tl.render(prog, langs[a]), langs[a])}\n\n"
                        f"{_fence(tl.render(prog, langs[b]), langs[b])}")
        elif r < paired_fraction:
            lang = langs[rng.integers(len(langs))]
            docs.append(f"{text}\n\n{_fence(tl.render(prog, lang), lang)}")
        elif rng.random() < 0.75:
            lang = langs[rng.integers(len(langs))]
            docs.append(_fence(tl.render(prog, lang), lang))
        else:
            docs.append(text)
    return docs


def prompt_and_answer(sample: RawSample) -> str:
    return prompt_text(sample.question) + sample.answer


def sample_language(sample: RawSample, registry: LanguageRegistry) -> str | None:
    """Evaluation language: the generator's target tag, else the dominant block."""
    lang = sample.meta.get("lang")
    if lang in registry:
        return lang
    return dominant_language(sample, registry)


# -- ground-truth checking --------------------------------------------------------

def first_code_block(text: str) -> tuple[str | None, str] | None:
    blocks = code_blocks(text)
    if not blocks:
        return None
    b = blocks[0]
    return b.lang, text[b.interior_start:b.interior_end]


def functional_match(sample: RawSample, generated: str) -> bool:
    """Does ``generated`` (an answer) implement the sample's ground truth?

    Any parse or runtime failure counts as a miss.
    """
    meta = sample.meta
    tests = meta.get("tests")
    if not tests:
        return False
    try:
        if meta.get("task") == "summarize":
            text = generated.strip()
            body = tl.parse_description(text[:1].lower() + text[1:])
            prog = tl.Program("f", tuple(meta["params"]), body)
        else:
            block = first_code_block(generated)
            if block is None:
                return False
            prog = tl.parse(block[1], meta["lang"])
        return all(tl.run(prog, args) == want for args, want in tests)
    except (tl.ParseError, tl.BudgetExceeded, NameError, ValueError, TypeError, KeyError,
            RecursionError):
        return False
