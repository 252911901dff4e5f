"""Experiment configs and the full reproduction grid."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import checkpoint
from .data import corpus as C
from .data.bpe import TokenizedSample, Vocabulary, tokenize_and_align
from .data.fences import label_sample, label_spans
from .infer import evaluate, mismatch_matrix
from .labels import LanguageRegistry
from .linalg import SplitPlan
from .model import Model, ModelConfig
from .train import RunRecord, TrainConfig, train

log = logging.getLogger(__name__)

DEFAULTS: dict = {
    "name": "desk",
    "corpus": {"synth": {"languages": ["snake", "curly", "paren"], "n_samples": 1600},
               "seed": 0, "threshold": 1 / 3},
    "pretrain_corpus": {"synth": {"languages": ["snake", "curly", "paren"], "n_samples": 6000},
                        "paired_fraction": 0.3, "seed": 1},
    "model": {"layers": 4, "d_model": 128, "n_heads": 4, "d_ff": 512, "vocab_size": 512,
              "max_seq_len": 256, "plan": {"r_s": 12, "r_e": 4},
              "languages": ["snake", "curly", "paren"], "fallback": "nl"},
    "pretrain": {"steps": 3000, "batch_size": 16, "peak_lr": 1e-3, "warmup_fraction": 0.05,
                 "weight_decay": 0.01, "clip_norm": 1.0},
    "finetune": {"epochs": 2, "batch_size": 16, "peak_lr": 1e-4, "warmup_fraction": 0.05,
                 "weight_decay": 0.01, "clip_norm": 1.0},
    "seeds": [0, 1, 2],
    "valid_fraction": 0.05,
    "split_seed": 0,
    "eval": {"functional": True, "max_tokens": 96},
    "grid": {"baselines": True, "ablations": True,
             "rank_variants": [[16, 0], [14, 2], [8, 8]]},
}


class ConfigError(ValueError):
    pass


def _schema() -> dict:
    text = resources.files("mole").joinpath("schemas/experiment.json").read_text("utf-8")
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("synth",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(doc: dict) -> dict:
    """Schema-check a user document, then fill defaults."""
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, doc)
    if "path" in doc.get("corpus", {}):
        cfg["corpus"].pop("synth", None)
    model_config(cfg)  # cross-field checks (heads, ranks)
    train_config(cfg, "pretrain")
    train_config(cfg, "finetune")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return validate_config(doc)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def registry(cfg: dict) -> LanguageRegistry:
    m = cfg["model"]
    return LanguageRegistry(tuple(m["languages"]), m.get("fallback", "nl"))


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    p = m["plan"]
    try:
        return ModelConfig(layers=m["layers"], d_model=m["d_model"], n_heads=m["n_heads"],
                           d_ff=m["d_ff"], vocab_size=m["vocab_size"],
                           max_seq_len=m["max_seq_len"],
                           plan=SplitPlan(p["r_s"], p["r_e"], p.get("order", "shared-first"),
                                          p.get("scheme", "pissa")),
                           registry=registry(cfg))
    except ValueError as exc:
        raise ConfigError(f"model config: {exc}") from None


def train_config(cfg: dict, which: str, **kw) -> TrainConfig:
    d = dict(cfg[which])
    if which == "pretrain":
        d["mode"] = "pretrain"
    d.update(kw)
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{which} config: {exc}") from None


# -- data ---------------------------------------------------------------------

@dataclass
class Prepared:
    registry: LanguageRegistry
    vocab: Vocabulary
    train: list[C.RawSample]
    valid: list[C.RawSample]
    train_tok: list[TokenizedSample]
    pretrain_tok: list[TokenizedSample]
    filter_stats: dict

    def select(self, lang: str | None = None) -> list[TokenizedSample]:
        if lang is None:
            return self.train_tok
        return [t for s, t in zip(self.train, self.train_tok)
                if C.dominant_language(s, self.registry) == lang]


def prepare(cfg: dict, vocab: Vocabulary | None = None) -> Prepared:
    """Filter, split and tokenize; ``vocab`` skips BPE training (reuse a checkpoint's)."""
    reg = registry(cfg)
    cc = cfg["corpus"]
    if "path" in cc:
        samples, bad = C.read_jsonl(cc["path"])
    else:
        samples, bad = C.synth_corpus(cc["synth"], cc.get("seed", 0)), 0
    kept, stats = C.filter_corpus(samples, reg, cc.get("threshold", 1 / 3))
    stats["malformed"] += bad
    tr, va = C.split_train_valid(kept, reg, cfg["valid_fraction"], cfg["split_seed"])
    pc = cfg["pretrain_corpus"]
    docs = C.pretrain_documents(pc["synth"], pc.get("seed", 1), pc.get("paired_fraction", 0.0))
    if vocab is None:
        vocab = Vocabulary.train([C.prompt_and_answer(s) for s in tr] + docs,
                                 cfg["model"]["vocab_size"])
    train_tok = [tokenize_and_align(label_sample(s.question, s.answer, reg), vocab) for s in tr]
    pre_tok = [tokenize_and_align(label_spans(d, reg), vocab) for d in docs]
    return Prepared(reg, vocab, tr, va, train_tok, pre_tok, stats)


# -- grid ---------------------------------------------------------------------

@dataclass
class RunSpec:
    run_id: str
    mode: str
    ablation: str = "none"
    seed: int = 0
    lang: str | None = None
    ranks: tuple[int, int] | None = None


def grid(cfg: dict) -> list[RunSpec]:
    seeds = cfg["seeds"]
    g = cfg["grid"]
    runs = [RunSpec(f"mole-s{s}", "mole", seed=s) for s in seeds]
    if g.get("baselines", True):
        runs += [RunSpec(f"all-lang-s{s}", "all-lang", seed=s) for s in seeds]
        runs += [RunSpec(f"per-lang-{lang}-s{seeds[0]}", "per-lang", seed=seeds[0], lang=lang)
                 for lang in cfg["model"]["languages"]]
        runs.append(RunSpec(f"full-ft-s{seeds[0]}", "full-ft", seed=seeds[0]))
    if g.get("ablations", True):
        runs += [RunSpec(f"mole-{a}-s{seeds[0]}", "mole", ablation=a, seed=seeds[0])
                 for a in ("std-init", "shared-last", "nl-expert")]
    for rs, re_ in g.get("rank_variants", []):
        runs.append(RunSpec(f"mole-r{rs}-{re_}-s{seeds[0]}", "mole", seed=seeds[0],
                            ranks=(rs, re_)))
    return runs


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n",
                   encoding="utf-8")
    tmp.replace(path)


def metrics_record(run_id: str, spec: RunSpec, ev: dict, model: Model, wall: float) -> dict:
    return {"model_id": run_id, "mode": spec.mode, "ablation": spec.ablation, "seed": spec.seed,
            "lang": spec.lang, "ranks": list(spec.ranks) if spec.ranks else None,
            "num_trainable": model.num_trainable(), "per_language": ev["per_language"],
            "per_task": ev["per_task"], "mean_nll": ev["mean_nll"],
            "mean_functional_match": ev["mean_functional_match"], "train_seconds": wall}


def reproduce(cfg: dict, out_dir, progress=None) -> dict:
    """Pretrain once, run the grid, evaluate, and write a manifest."""
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    say = progress or (lambda msg: log.info("%s", msg))
    chash = config_hash(cfg)
    t0 = time.perf_counter()
    data = prepare(cfg)
    _dump(out / "config.json", cfg)
    _dump(out / "filter_stats.json", data.filter_stats)
    artifacts: list[dict] = []

    def record(path: Path, seed: int | None, run: str) -> None:
        artifacts.append({"path": str(path.relative_to(out)), "sha256": _sha256(path),
                          "config_hash": chash, "seed": seed, "run": run})

    C.write_jsonl(data.valid, out / "valid.jsonl")
    record(out / "valid.jsonl", cfg["split_seed"], "data")

    mc = model_config(cfg)
    say(f"pretraining base ({len(data.pretrain_tok)} documents)")
    base, prec = train(train_config(cfg, "pretrain", seed=cfg["seeds"][0]), data.pretrain_tok, mc)
    checkpoint.save(out / "base.ckpt", base, data.vocab, {"run": "pretrain",
                                                          "config_hash": chash})
    _dump(out / "runs" / "pretrain.record.json", prec.to_json())
    record(out / "base.ckpt", cfg["seeds"][0], "pretrain")
    ev_opts = cfg["eval"]
    valid = data.valid[: ev_opts.get("max_samples", len(data.valid))]

    base_eval = evaluate(base, data.vocab, valid, functional=ev_opts["functional"],
                         max_tokens=ev_opts["max_tokens"])
    _dump(out / "runs" / "base.metrics.json", {"model_id": "base", "mode": "plain",
                                                "ablation": "none", "seed": cfg["seeds"][0],
                                                **base_eval})
    results: dict[str, dict] = {}
    for spec in grid(cfg):
        say(f"run {spec.run_id}")
        kw = {"mode": spec.mode, "ablation": spec.ablation, "seed": spec.seed, "lang": spec.lang}
        if spec.ranks:
            kw["r_s"], kw["r_e"] = spec.ranks
        tcfg = train_config(cfg, "finetune", **kw)
        model, rec = train(tcfg, data.select(spec.lang if spec.mode == "per-lang" else None),
                           base=base)
        ckpt = out / "runs" / f"{spec.run_id}.ckpt"
        checkpoint.save(ckpt, model, data.vocab, {"run": spec.run_id, "config_hash": chash,
                                                  "seed": spec.seed})
        rec.checkpoint = str(ckpt.relative_to(out))
        eval_set = valid if spec.mode != "per-lang" else [
            s for s in valid if C.sample_language(s, data.registry) == spec.lang]
        ev = evaluate(model, data.vocab, eval_set, functional=ev_opts["functional"],
                      max_tokens=ev_opts["max_tokens"])
        m = metrics_record(spec.run_id, spec, ev, model, rec.wall_clock)
        if spec.mode == "mole" and spec.ablation == "none" and spec.ranks is None:
            mm = mismatch_matrix(model, data.vocab, valid)
            m["mismatch_matrix"] = mm.to_json()
            csv_path = out / "runs" / f"{spec.run_id}.mismatch.csv"
            csv_path.write_text(mm.to_csv(), encoding="utf-8")
            record(csv_path, spec.seed, spec.run_id)
        for suffix, obj in ((".record.json", rec.to_json()), (".metrics.json", m)):
            p = out / "runs" / f"{spec.run_id}{suffix}"
            _dump(p, obj)
            record(p, spec.seed, spec.run_id)
        record(ckpt, spec.seed, spec.run_id)
        results[spec.run_id] = m
    summary = summarize(cfg, results)
    _dump(out / "summary.json", summary)
    record(out / "summary.json", None, "summary")
    manifest = {"config_hash": chash, "seeds": cfg["seeds"], "artifacts": artifacts,
                "wall_clock_seconds": time.perf_counter() - t0}
    _dump(out / "manifest.json", manifest)
    return summary


def _mean(xs):
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and np.isnan(x))]
    return float(np.mean(xs)) if xs else None


def summarize(cfg: dict, results: dict[str, dict]) -> dict:
    """Aggregate the headline comparisons from per-run metrics."""
    seeds = cfg["seeds"]
    langs = cfg["model"]["languages"]

    def mean_over(prefix, key):
        return _mean([results[f"{prefix}-s{s}"][key] for s in seeds if f"{prefix}-s{s}" in results])

    out = {"mole": {"mean_nll": mean_over("mole", "mean_nll"),
                    "mean_functional_match": mean_over("mole", "mean_functional_match")}}
    if any(k.startswith("all-lang") for k in results):
        out["all-lang"] = {"mean_nll": mean_over("all-lang", "mean_nll"),
                           "mean_functional_match": mean_over("all-lang",
                                                              "mean_functional_match")}
    per_lang_runs = [r for r in results.values() if r["mode"] == "per-lang"]
    if per_lang_runs:
        out["per-lang"] = {
            "mean_nll": _mean([r["per_language"][r["lang"]]["nll"] for r in per_lang_runs]),
            "mean_functional_match": _mean([r["per_language"][r["lang"]]["functional_match"]
                                            for r in per_lang_runs])}
    mats = [np.array(results[f"mole-s{s}"]["mismatch_matrix"]["values"]) for s in seeds
            if f"mole-s{s}" in results and "mismatch_matrix" in results[f"mole-s{s}"]]
    if mats:
        avg = np.mean(mats, axis=0)
        K = len(langs)
        rows = []
        for c, lang in enumerate(langs):
            off = float(np.mean([avg[r, c] for r in range(K + 1) if r != c]))
            rows.append({"lang": lang, "matched": float(avg[c, c]), "mismatched_mean": off,
                         "matched_lower": bool(avg[c, c] < off)})
        out["mismatch"] = {"mean_matrix": avg.tolist(), "per_language": rows}
    out["runs"] = {k: {"mean_nll": v["mean_nll"],
                       "mean_functional_match": v["mean_functional_match"],
                       "num_trainable": v["num_trainable"]} for k, v in results.items()}
    return out
