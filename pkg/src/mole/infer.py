"""Routed greedy generation and the evaluation harness."""
from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .data.bpe import BOS, EOS, Vocabulary, tokenize_and_align
from .data.bpe import PAD as PAD_ID
from .data.corpus import RawSample, functional_match, sample_language
from .data.fences import FenceAutomaton, Transition, label_sample
from .labels import NL, LanguageRegistry, label_name
from .model import Model
from .train import code_nll_by_language, collate, token_nll

BUFFER = 64


class RouterState:
    """Adapter path for generated text, driven by fence events.

    Wraps the labelling automaton so generation routes exactly like training
    data was labelled; keeps the last ``BUFFER`` decoded characters.
    """

    def __init__(self, registry: LanguageRegistry):
        self.fa = FenceAutomaton(registry)
        self.buffer: deque[str] = deque(maxlen=BUFFER)

    @property
    def path(self) -> int:
        return self.fa.path

    @property
    def log(self) -> list[Transition]:
        return self.fa.log

    def feed(self, text: str) -> list[int]:
        self.buffer.extend(text)
        return self.fa.feed_text(text)

    def finish(self) -> list[str]:
        self.fa.finish()
        return self.fa.diagnostics

    def in_code(self) -> bool:
        return self.fa.mode != "text"

    @staticmethod
    def replay(log: list[Transition]) -> int:
        path = NL
        for t in log:
            if t.src != path:
                raise ValueError(f"transition at {t.offset} starts from {t.src}, not {path}")
            path = t.dst
        return path


@dataclass
class Generation:
    text: str
    tokens: list[int]
    labels: list[int]
    log: list[Transition] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    stopped: str = "eos"   # eos | max_tokens | context


def _prompt(question: str | None, vocab: Vocabulary, registry: LanguageRegistry):
    if question is None:        # raw continuation from BOS
        return [BOS], [NL]
    # same labelling as a training sample with the answer still empty
    ts = tokenize_and_align(label_sample(question, "", registry), vocab, bos=True, eos=False)
    return ts.ids.tolist(), ts.labels.tolist()


def generate(model: Model, vocab: Vocabulary, prompts: list[str | None], max_tokens: int = 96,
             mode: str = "auto", lang: str | None = None,
             force: int | None = None) -> list[Generation]:
    """Greedy decoding for a batch of prompts.

    ``mode="auto"`` routes by fence detection on the decoded output; ``"manual"``
    routes every generated token to ``lang``. ``force`` replaces any
    code-labelled path (prompt or output) by the given path.
    """
    reg = model.config.registry
    if mode not in ("auto", "manual"):
        raise ValueError(f"unknown generation mode {mode!r}")
    manual = None
    if mode == "manual":
        if lang is None:
            raise ValueError("manual mode needs a language")
        manual = reg.index(lang)
    if force is not None and not (force == NL or 0 <= force < reg.K):
        raise ValueError(f"invalid forced path {force}")

    def routed(lab: int) -> int:
        return force if force is not None and lab >= 0 else lab

    if not prompts:
        return []
    pre = [_prompt(p, vocab, reg) for p in prompts]
    B = len(pre)
    lens = np.array([len(i) for i, _ in pre])
    cap = min(model.config.max_seq_len, int(lens.max()) + max_tokens)
    if lens.max() >= model.config.max_seq_len:
        raise ValueError(f"prompt of {lens.max()} tokens leaves no room to generate")
    T0 = int(lens.max())
    ids = np.full((B, T0), PAD_ID, dtype=np.int64)
    labs = np.full((B, T0), NL, dtype=np.int64)
    for b, (i, lab) in enumerate(pre):
        ids[b, :len(i)] = i
        labs[b, :len(i)] = [routed(x) for x in lab]
    cache = model.prefill(ids, labs, cap)
    next_logits = cache.prefill_logits[np.arange(B), lens - 1]

    routers = [RouterState(reg) for _ in range(B)]
    decoders = [vocab.incremental_decoder() for _ in range(B)]
    out = [Generation("", [], []) for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    pos = lens.copy()
    for _ in range(max_tokens):
        tok = np.argmax(next_logits, axis=-1)
        new_labels = np.full(B, NL, dtype=np.int64)
        for b in range(B):
            if done[b]:
                continue
            t = int(tok[b])
            g = out[b]
            if t == EOS:
                done[b] = True
                continue
            text = decoders[b].push(t)
            path = routers[b].path
            char_labels = routers[b].feed(text)
            lab = char_labels[0] if char_labels else path
            if manual is not None:
                lab = manual
            g.text += text
            g.tokens.append(t)
            g.labels.append(lab)
            new_labels[b] = routed(lab)
            if pos[b] >= cap:
                done[b] = True
                g.stopped = "context"
        if done.all():
            break
        active = ~done
        step_pos = np.minimum(pos, cap - 1)
        logits = model.decode_step(cache, np.where(active, tok, PAD_ID), new_labels, step_pos)
        next_logits = logits
        pos = pos + active
    for b in range(B):
        g = out[b]
        g.text += decoders[b].flush()
        if not done[b]:
            g.stopped = "max_tokens"
        g.diagnostics = routers[b].finish()
        g.log = routers[b].log
    return out


def generate_auto(model: Model, vocab: Vocabulary, question: str | None,
                  max_tokens: int = 96) -> Generation:
    return generate(model, vocab, [question], max_tokens, mode="auto")[0]


def generate_manual(model: Model, vocab: Vocabulary, question: str | None, lang: str,
                    max_tokens: int = 96) -> Generation:
    return generate(model, vocab, [question], max_tokens, mode="manual", lang=lang)[0]


# -- evaluation -----------------------------------------------------------------

def _nll_groups(model: Model, tokenized, groups, force, batch_size: int = 32):
    """Code-token and all-target NLL sums per group key."""
    acc: dict = {}
    with tn.no_grad():
        for s in range(0, len(tokenized), batch_size):
            chunk = tokenized[s:s + batch_size]
            b = collate(chunk, model.config.max_seq_len)
            labels = b.labels if force is None else np.where(b.labels >= 0, force, b.labels)
            nll = token_nll(model(b.inputs, labels).data.astype(np.float64), b.targets)
            for j, key in enumerate(groups[s:s + batch_size]):
                code = b.mask[j] & (b.target_labels[j] >= 0)
                a = acc.setdefault(key, [0.0, 0, 0.0, 0])
                a[0] += float(nll[j][code].sum())
                a[1] += int(code.sum())
                a[2] += float(nll[j][b.mask[j]].sum())
                a[3] += int(b.mask[j].sum())
    return acc


def _mean(a, i):
    return a[i] / a[i + 1] if a[i + 1] else float("nan")


def evaluate(model: Model, vocab: Vocabulary, samples: list[RawSample],
             forced_path: int | None = None, functional: bool = True,
             max_tokens: int = 96, batch_size: int = 32) -> dict:
    """Per-language and per-(language, task) NLL and functional match.

    ``nll`` averages over code-labelled answer tokens; ``nll_all`` over every
    answer token. Functional match generates in auto mode (with the forced
    path applied to code positions) and runs the result against the
    generator's test cases; unparseable output counts as a miss.
    """
    reg = model.config.registry
    langs = [sample_language(s, reg) for s in samples]
    keep = [i for i, lang in enumerate(langs) if lang is not None]
    samples = [samples[i] for i in keep]
    langs = [langs[i] for i in keep]
    tasks = [s.meta.get("task", "unknown") for s in samples]
    tokenized = [tokenize_and_align(label_sample(s.question, s.answer, reg), vocab)
                 for s in samples]
    by_lang = _nll_groups(model, tokenized, langs, forced_path, batch_size)
    by_task = _nll_groups(model, tokenized, list(zip(langs, tasks)), forced_path, batch_size)

    fm = [None] * len(samples)
    if functional and samples:
        for s in range(0, len(samples), batch_size):
            gens = generate(model, vocab, [x.question for x in samples[s:s + batch_size]],
                            max_tokens, force=forced_path)
            for j, g in enumerate(gens):
                fm[s + j] = functional_match(samples[s + j], g.text)

    def rate(idx):
        vals = [fm[i] for i in idx if fm[i] is not None]
        return float(np.mean(vals)) if vals else None

    per_language, per_task = {}, {}
    for lang in reg.names:
        idx = [i for i, x in enumerate(langs) if x == lang]
        a = by_lang.get(lang, [0.0, 0, 0.0, 0])
        per_language[lang] = {"nll": _mean(a, 0), "nll_all": _mean(a, 2),
                              "code_tokens": a[1], "samples": len(idx),
                              "functional_match": rate(idx)}
        per_task[lang] = {}
        for task in sorted(set(tasks)):
            tidx = [i for i in idx if tasks[i] == task]
            if not tidx:
                continue
            a = by_task[(lang, task)]
            per_task[lang][task] = {"nll": _mean(a, 0), "nll_all": _mean(a, 2),
                                    "samples": len(tidx), "functional_match": rate(tidx)}
    fms = [v["functional_match"] for v in per_language.values()
           if v["functional_match"] is not None]
    nlls = [v["nll"] for v in per_language.values() if not math.isnan(v["nll"])]
    return {"forced_path": None if forced_path is None else label_name(forced_path, reg),
            "per_language": per_language, "per_task": per_task,
            "mean_nll": float(np.mean(nlls)) if nlls else float("nan"),
            "mean_functional_match": float(np.mean(fms)) if fms else None}


@dataclass
class MismatchMatrix:
    rows: list[str]          # forced adapter: each language, then "NL"
    cols: list[str]          # evaluation language
    values: np.ndarray       # (K+1, K) code-token NLL

    def diagonal(self) -> np.ndarray:
        K = len(self.cols)
        return self.values[np.arange(K), np.arange(K)]

    def off_diagonal_mean(self, col: int) -> float:
        """Mean over every row except the matched one (the NL row included)."""
        rows = [r for r in range(len(self.rows)) if r != col]
        return float(np.mean(self.values[rows, col]))

    def to_json(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "values": self.values.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "MismatchMatrix":
        return cls(list(d["rows"]), list(d["cols"]), np.array(d["values"], dtype=np.float64))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["forced_adapter", *self.cols])
        for name, row in zip(self.rows, self.values):
            w.writerow([name, *(f"{v:.6f}" for v in row)])
        return buf.getvalue()


def mismatch_matrix(model: Model, vocab: Vocabulary, samples: list[RawSample],
                    batch_size: int = 32) -> MismatchMatrix:
    """Code-token NLL with each adapter forced onto each language's code."""
    reg = model.config.registry
    K = reg.K
    langs = [sample_language(s, reg) for s in samples]
    by_lang: dict[str, list] = {n: [] for n in reg.names}
    for s, lang in zip(samples, langs):
        if lang is not None:
            by_lang[lang].append(tokenize_and_align(label_sample(s.question, s.answer, reg),
                                                    vocab))
    values = np.full((K + 1, K), np.nan)
    for r, path in enumerate([*range(K), NL]):
        for c, lang in enumerate(reg.names):
            if by_lang[lang]:
                values[r, c] = code_nll_by_language(model, by_lang[lang], batch_size,
                                                    force=path)[lang]
    return MismatchMatrix([*reg.names, "NL"], list(reg.names), values)
