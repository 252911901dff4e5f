"""Pretraining, MoLE finetuning and the baseline/ablation training modes."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .data.bpe import PAD as PAD_ID
from .data.bpe import TokenizedSample
from .labels import PAD
from .linalg import SplitPlan
from .model import Model, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

TRAIN_MODES = ("pretrain", "mole", "all-lang", "per-lang", "full-ft")
ABLATIONS = ("none", "std-init", "shared-last", "nl-expert")


@dataclass
class TrainConfig:
    mode: str = "mole"
    ablation: str = "none"
    epochs: int = 2
    batch_size: int = 16
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    steps: int | None = None          # overrides epochs (pretraining)
    lang: str | None = None           # per-lang target language
    r_s: int | None = None            # rank plan override (defaults to model config)
    r_e: int | None = None

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {TRAIN_MODES}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.ablation != "none" and self.mode != "mole":
            raise ValueError("ablations are only valid with mode 'mole'")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ValueError("batch_size must be positive; epochs/steps non-negative")
        if self.peak_lr <= 0 or self.weight_decay < 0:
            raise ValueError("peak_lr must be positive and weight_decay non-negative")
        if self.mode == "per-lang" and not self.lang:
            raise ValueError("per-lang mode needs a target language")
        if (self.r_s is None) != (self.r_e is None):
            raise ValueError("give both r_s and r_e or neither")

    def plan(self, default: SplitPlan) -> SplitPlan:
        r_s = default.r_s if self.r_s is None else self.r_s
        r_e = default.r_e if self.r_e is None else self.r_e
        return SplitPlan(r_s, r_e,
                         order="shared-last" if self.ablation == "shared-last" else "shared-first",
                         scheme="standard" if self.ablation == "std-init" else "pissa")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class RunRecord:
    config: dict
    model: dict = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    valid_curve: list[dict] = field(default_factory=list)   # {step, per_language: {lang: nll}}
    num_samples: int = 0
    total_steps: int = 0
    truncated: int = 0
    wall_clock: float = 0.0
    checkpoint: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


# -- loss ---------------------------------------------------------------------

def masked_nll(logits: Tensor, targets, mask) -> Tensor:
    """Mean next-token NLL over positions where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise tn.ShapeError(f"masked_nll: logits {logits.shape}, targets {targets.shape}, "
                            f"mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("masked_nll: mask selects no positions")
    picked = tn.take_last(tn.log_softmax(logits), targets)
    w = Tensor(mask.astype(logits.dtype) / logits.dtype.type(-n))
    return tn.mul(picked, w).sum()


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position NLL without recording a graph."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_fraction: float) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0."""
    if total_steps <= 0:
        return 0.0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_fraction * total_steps
    if step < warm:
        return peak_lr * step / warm
    if total_steps == warm:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warm)


# -- optimiser --------------------------------------------------------------

class AdamW:
    """Decoupled weight decay Adam over a fixed parameter list.

    A parameter whose gradient is missing or identically zero on a step is
    skipped entirely: no moment decay, no weight decay, no step count. Routed
    adapters that saw no tokens therefore keep their state untouched.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self) -> int:
        """Apply one update; returns how many tensors were updated."""
        updated = 0
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None or not g.any():
                continue
            self.t[i] += 1
            t = self.t[i]
            m, v = self.m[i], self.v[i]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
            updated += 1
        return updated

    def zero_grad(self) -> None:
        tn.zero_grad(self.params)

    def state_of(self, p: Tensor) -> tuple[np.ndarray, np.ndarray, int]:
        i = next(j for j, q in enumerate(self.params) if q is p)
        return self.m[i], self.v[i], self.t[i]


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if max_norm and total > max_norm:
        c = max_norm / (total + 1e-6)
        for g in grads:
            g *= c
    return total


# -- batching ---------------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray     # (B, T) token ids
    labels: np.ndarray     # (B, T) routing labels of the inputs
    targets: np.ndarray    # (B, T) next-token ids
    mask: np.ndarray       # (B, T) loss positions
    target_labels: np.ndarray  # (B, T) label of each target token


def collate(samples: list[TokenizedSample], max_len: int | None = None,
            all_tokens: bool = False) -> Batch:
    """Right-pad to the batch maximum and shift for next-token prediction.

    ``all_tokens`` puts every real target in the loss (pretraining).
    """
    seqs = [(s.ids, s.labels, s.mask) for s in samples]
    if max_len is not None:
        seqs = [(i[:max_len + 1], lab[:max_len + 1], m[:max_len + 1]) for i, lab, m in seqs]
    T = max(len(i) for i, _, _ in seqs)
    B = len(seqs)
    ids = np.full((B, T), PAD_ID, dtype=np.int64)
    labels = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for b, (i, lab, m) in enumerate(seqs):
        n = len(i)
        ids[b, :n], labels[b, :n] = i, lab
        mask[b, :n] = True if all_tokens else m
    return Batch(ids[:, :-1], labels[:, :-1], ids[:, 1:], mask[:, 1:], labels[:, 1:])


def batches(data: list[TokenizedSample], batch_size: int, rng: np.random.Generator,
            epochs: int | None = None, steps: int | None = None):
    """Deterministic shuffled batches; by epoch count or by step count."""
    n = len(data)
    done = 0
    epoch = 0
    while True:
        if epochs is not None and epoch >= epochs:
            return
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            if steps is not None and done >= steps:
                return
            yield [data[j] for j in order[s:s + batch_size]]
            done += 1
        epoch += 1


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


# -- models per mode ------------------------------------------------------------

def build_model(cfg: TrainConfig, model_config: ModelConfig, base: Model | None) -> Model:
    if cfg.mode == "pretrain":
        if base is not None:
            raise ValueError("pretraining starts from scratch; do not pass a base")
        return Model.init_plain(model_config, seed=cfg.seed)
    if base is None:
        raise ValueError(f"mode {cfg.mode!r} needs a base checkpoint")
    plan = cfg.plan(base.config.plan)
    plan.check(base.config.d_model, base.config.d_ff)
    if cfg.mode == "mole":
        return base.split(plan, nl_expert=cfg.ablation == "nl-expert", seed=cfg.seed)
    if cfg.mode in ("all-lang", "per-lang"):
        if cfg.mode == "per-lang" and cfg.lang not in base.config.registry:
            raise ValueError(f"per-lang language {cfg.lang!r} not in registry")
        return base.with_lora(plan.r_n, seed=cfg.seed)
    return base.full_ft()


def batch_loss(model: Model, batch: Batch) -> Tensor:
    logits = model(batch.inputs, batch.labels)
    return masked_nll(logits, batch.targets, batch.mask)


def code_nll_by_language(model: Model, data: list[TokenizedSample], batch_size: int = 32,
                         force: int | None = None) -> dict[str, float]:
    """Mean NLL of code-labelled target tokens per language (no graph)."""
    names = model.config.registry.names
    tot = np.zeros(len(names))
    cnt = np.zeros(len(names))
    with tn.no_grad():
        for s in range(0, len(data), batch_size):
            b = collate(data[s:s + batch_size], model.config.max_seq_len)
            labels = b.labels if force is None else np.where(b.labels >= 0, force, b.labels)
            nll = token_nll(model(b.inputs, labels).data.astype(np.float64), b.targets)
            for k in range(len(names)):
                sel = b.mask & (b.target_labels == k)
                tot[k] += nll[sel].sum()
                cnt[k] += sel.sum()
    return {n: (float(tot[k] / cnt[k]) if cnt[k] else float("nan")) for k, n in enumerate(names)}


def train(cfg: TrainConfig, data: list[TokenizedSample], model_config: ModelConfig | None = None,
          base: Model | None = None, valid: list[TokenizedSample] | None = None,
          eval_every: int | None = None, on_step=None,
          start: Model | None = None) -> tuple[Model, RunRecord]:
    """Train per ``cfg``; returns the model and its :class:`RunRecord`.

    ``data`` is already selected for the mode (per-lang filtering happens
    upstream, where dominant languages are known). ``start`` supplies an
    already-built model (for instance a split checkpoint) instead of deriving
    one from ``base``.
    """
    if start is not None:
        model = start
    else:
        if model_config is None:
            if base is None:
                raise ValueError("need a model config or a base model")
            model_config = base.config
        model = build_model(cfg, model_config, base)
    if not data:
        raise ValueError("no training samples")
    params = model.parameters()
    opt = AdamW(params, lr=0.0, weight_decay=cfg.weight_decay)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * steps_per_epoch(
        len(data), cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    max_len = model.config.max_seq_len
    rec = RunRecord(config=cfg.to_json(), model=model.describe(), num_samples=len(data),
                    total_steps=total)
    rec.truncated = sum(len(s) > max_len + 1 for s in data)
    if rec.truncated:
        log.warning("%d samples longer than %d tokens were truncated", rec.truncated, max_len + 1)
    all_tokens = cfg.mode == "pretrain"
    start = time.perf_counter()
    it = batches(data, cfg.batch_size, rng, epochs=None if cfg.steps is not None else cfg.epochs,
                 steps=cfg.steps)
    for step, group in enumerate(it):
        b = collate(group, max_len, all_tokens=all_tokens)
        opt.zero_grad()
        loss = batch_loss(model, b)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at step {step}")
        tn.backward(loss)
        clip_grad_norm(params, cfg.clip_norm)
        opt.lr = lr_at(step + 1, total, cfg.peak_lr, cfg.warmup_fraction)
        opt.step()
        rec.losses.append(float(loss.item()))
        rec.lrs.append(opt.lr)
        if on_step is not None:
            on_step(step, rec.losses[-1])
        if valid and eval_every and (step + 1) % eval_every == 0:
            rec.valid_curve.append({"step": step + 1,
                                    "per_language": code_nll_by_language(model, valid)})
    if valid:
        if not rec.valid_curve or rec.valid_curve[-1]["step"] != len(rec.losses):
            rec.valid_curve.append({"step": len(rec.losses),
                                    "per_language": code_nll_by_language(model, valid)})
    rec.wall_clock = time.perf_counter() - start
    return model, rec
