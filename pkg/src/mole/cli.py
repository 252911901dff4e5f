"""``mole`` command line.

Exit codes: 0 ok, 2 validation error, 3 runtime/training error, 4 I/O error.
Failures print one ``mole: error: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import corpus as C
from .experiment import (ConfigError, load_config, model_config, prepare, reproduce,
                         train_config, validate_config)
from .infer import evaluate, generate, mismatch_matrix
from .labels import NL, LanguageRegistry
from .linalg import SplitPlan
from .train import train

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line diagnostics, validation exit code
        raise UsageError(message)


def _dump_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _load_model(path):
    model, vocab, header = checkpoint.load(path)
    if vocab is None:
        raise ConfigError(f"{path}: checkpoint carries no vocabulary")
    return model, vocab, header


# -- commands -------------------------------------------------------------------

def cmd_pretrain(a) -> int:
    cfg = load_config(a.config)
    data = prepare(cfg)
    model, rec = train(train_config(cfg, "pretrain", seed=a.seed), data.pretrain_tok,
                       model_config(cfg))
    checkpoint.save(a.out, model, data.vocab, {"run": "pretrain", "seed": a.seed,
                                               "final_loss": rec.losses[-1] if rec.losses else None})
    if a.record:
        _dump_json(a.record, rec.to_json())
    return EXIT_OK


def _ranks(text: str) -> tuple[int, int]:
    try:
        rs, re_ = (int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--ranks expects RS,RE integers, got {text!r}") from None
    return rs, re_


def cmd_split_init(a) -> int:
    base, vocab, header = _load_model(a.base)
    rs, re_ = _ranks(a.ranks)
    plan = SplitPlan(rs, re_, a.order, a.scheme)
    model = base.split(plan, seed=a.seed)
    checkpoint.save(a.out, model, vocab, {"run": "split-init", "base": str(a.base)})
    return EXIT_OK


def cmd_finetune(a) -> int:
    cfg = load_config(a.config)
    start, vocab, header = _load_model(a.base)
    kw = {"mode": a.mode, "ablation": a.ablation, "seed": a.seed, "lang": a.lang}
    tcfg = train_config(cfg, "finetune", **kw)
    data = prepare(cfg, vocab)
    subset = data.select(a.lang if a.mode == "per-lang" else None)
    if start.mode == "mole":
        if a.mode != "mole" or a.ablation not in ("none", "shared-last", "std-init"):
            raise ConfigError("a split checkpoint can only be finetuned with --mode mole")
        model, rec = train(tcfg, subset, start=start)
    else:
        model, rec = train(tcfg, subset, base=start)
    checkpoint.save(a.out, model, vocab, {"run": "finetune", "seed": a.seed, "mode": a.mode,
                                          "ablation": a.ablation})
    if a.record:
        _dump_json(a.record, rec.to_json())
    return EXIT_OK


def _forced_path(name: str | None, registry: LanguageRegistry) -> int | None:
    if name is None:
        return None
    if name.upper() == "NL":
        return NL
    if name not in registry:
        raise ConfigError(f"--force-adapter {name!r} not in registry {list(registry.names)}")
    return registry.index(name)


def cmd_eval(a) -> int:
    model, vocab, header = _load_model(a.model)
    samples, bad = C.read_jsonl(a.set)
    if not samples:
        raise ConfigError(f"{a.set}: no valid samples")
    force = _forced_path(a.force_adapter, model.config.registry)
    ev = evaluate(model, vocab, samples, forced_path=force, functional=not a.no_functional,
                  max_tokens=a.max_tokens)
    meta = header.get("metadata", {})
    out = {"model_id": str(a.model), "mode": model.mode, "ablation": meta.get("ablation", "none"),
           "seed": meta.get("seed"), "skipped_records": bad, **ev}
    if a.mismatch:
        mm = mismatch_matrix(model, vocab, samples)
        out["mismatch_matrix"] = mm.to_json()
        csv_path = Path(a.csv) if a.csv else Path(a.out).with_suffix(".csv")
        csv_path.write_text(mm.to_csv(), encoding="utf-8")
    _dump_json(a.out, out)
    return EXIT_OK


def cmd_generate(a) -> int:
    model, vocab, _ = _load_model(a.model)
    if a.mode == "manual" and not a.lang:
        raise ConfigError("--mode manual needs --lang")
    text = sys.stdin.read() if a.prompt == "-" else Path(a.prompt).read_text(encoding="utf-8")
    prompt = text if text else None
    g = generate(model, vocab, [prompt], a.max_tokens, mode=a.mode, lang=a.lang)[0]
    sys.stdout.write(g.text + "\n")
    for d in g.diagnostics:
        print(f"mole: note: {d}", file=sys.stderr)
    if a.log:
        _dump_json(a.log, {"stopped": g.stopped, "tokens": g.tokens, "labels": g.labels,
                           "transitions": [t.__dict__ for t in g.log],
                           "diagnostics": g.diagnostics})
    return EXIT_OK


def cmd_export_expert(a) -> int:
    checkpoint.export_expert(a.model, a.lang, a.out)
    return EXIT_OK


def cmd_import_expert(a) -> int:
    checkpoint.import_expert(a.model, a.expert, a.out)
    return EXIT_OK


def cmd_data_synth(a) -> int:
    try:
        spec = json.loads(Path(a.spec).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{a.spec}: not valid JSON ({exc.msg})") from None
    C.write_jsonl(C.synth_corpus(spec, a.seed), a.out)
    return EXIT_OK


def cmd_data_filter(a) -> int:
    if a.threshold < 0:
        raise ConfigError("--threshold must be non-negative")
    raw, bad = [], 0
    with open(a.inp, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                raw.append(json.loads(line))
            except json.JSONDecodeError:
                bad += 1
    reg = LanguageRegistry(tuple(a.languages.split(",")))
    kept, stats = C.filter_corpus(raw, reg, a.threshold)
    stats["malformed"] += bad
    stats["total"] += bad
    C.write_jsonl(kept, a.out)
    if a.stats:
        _dump_json(a.stats, stats)
    return EXIT_OK


def cmd_reproduce(a) -> int:
    if not a.all:
        raise ConfigError("reproduce needs --all (the only supported grid)")
    cfg = load_config(a.config) if a.config else validate_config({})
    summary = reproduce(cfg, a.out, progress=lambda m: print(f"mole: {m}", file=sys.stderr))
    print(json.dumps({k: summary[k] for k in summary if k != "runs"}, indent=2))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mole", description="Mixture of language-specific adapters, desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", help="train the frozen base model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--record")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("split-init", help="split base feedforward weights into adapters")
    s.add_argument("--base", required=True)
    s.add_argument("--ranks", required=True, help="RS,RE")
    s.add_argument("--order", choices=["shared-first", "shared-last"], default="shared-first")
    s.add_argument("--scheme", choices=["pissa", "standard"], default="pissa")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_split_init)

    s = sub.add_parser("finetune", help="finetune adapters or baselines")
    s.add_argument("--config", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--mode", choices=["mole", "all-lang", "per-lang", "full-ft"], default="mole")
    s.add_argument("--ablation", choices=["none", "std-init", "shared-last", "nl-expert"],
                   default="none")
    s.add_argument("--lang")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--record")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("eval", help="per-language metrics, optional mismatch matrix")
    s.add_argument("--model", required=True)
    s.add_argument("--set", required=True)
    s.add_argument("--force-adapter")
    s.add_argument("--mismatch", action="store_true")
    s.add_argument("--no-functional", action="store_true")
    s.add_argument("--max-tokens", type=int, default=96)
    s.add_argument("--csv")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("generate", help="greedy routed generation")
    s.add_argument("--model", required=True)
    s.add_argument("--mode", choices=["auto", "manual"], default="auto")
    s.add_argument("--lang")
    s.add_argument("--prompt", required=True, help="file with the question, or - for stdin")
    s.add_argument("--max-tokens", type=int, default=96)
    s.add_argument("--log")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("export-expert", help="write one language's expert tensors")
    s.add_argument("--model", required=True)
    s.add_argument("--lang", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export_expert)

    s = sub.add_parser("import-expert", help="replace one expert from an exported file")
    s.add_argument("--model", required=True)
    s.add_argument("--expert", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_import_expert)

    d = sub.add_parser("data", help="corpus utilities")
    dsub = d.add_subparsers(dest="data_command", required=True, parser_class=_Parser)
    s = dsub.add_parser("synth", help="generate the synthetic corpus")
    s.add_argument("--spec", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_data_synth)
    s = dsub.add_parser("filter", help="keep samples with enough code")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--threshold", type=float, default=1 / 3)
    s.add_argument("--languages", default="snake,curly,paren")
    s.add_argument("--out", required=True)
    s.add_argument("--stats")
    s.set_defaults(fn=cmd_data_filter)

    s = sub.add_parser("reproduce", help="run the full experiment grid")
    s.add_argument("--all", action="store_true")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_reproduce)
    return p


def _oneline(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def _fail(exc: BaseException, code: int) -> int:
    print(f"mole: error: {_oneline(exc)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(exc, EXIT_VALIDATION)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="mole: %(levelname)s: %(message)s")
    try:
        return args.fn(args)
    except checkpoint.CheckpointError as exc:
        return _fail(exc, EXIT_IO)
    except (OSError, UnicodeDecodeError) as exc:
        return _fail(exc, EXIT_IO)
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        return _fail(exc, EXIT_VALIDATION)
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(exc, EXIT_RUNTIME)

if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
