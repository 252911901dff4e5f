"""Decoder-only transformer whose feedforward linears can be routed.

Pre-LN blocks, learned absolute positions, output projection tied to the token
embedding. The feedforward pair (``ff_up``: d_model -> d_ff, ``ff_down``:
d_ff -> d_model) is the only place adapters live; everything else is base.

Tensor names double as checkpoint keys::

    base/tok_emb  base/pos_emb  base/ln_f.{g,b}
    base/layer{i}/{ln1,ln2}.{g,b}  base/layer{i}/attn.{q,k,v,o}
    base/layer{i}/ff_{up,down}.W        dense feedforward (plain, full-ft)
    base/layer{i}/ff_{up,down}.W0       frozen residual under adapters
    shared/layer{i}/ff_up.{B,A}   expert/{lang}/layer{i}/...   nl/layer{i}/...
    lora/layer{i}/ff_up.{B,A}
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .labels import NL, LanguageRegistry
from .layer import DenseLinear, LoraLinear, MoleLinear, Routing, trainable_parameter_count
from .linalg import SplitPlan, split_init
from .tensor import Tensor

MODES = ("plain", "mole", "lora", "full-ft")
NL_EXPERT = "NL"   # expert name used when natural language gets its own expert
FF = ("ff_up", "ff_down")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 512
    max_seq_len: int = 256
    plan: SplitPlan = SplitPlan(12, 4)
    registry: LanguageRegistry = LanguageRegistry(("snake", "curly", "paren"))

    def __post_init__(self):
        for f in ("layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        self.plan.check(self.d_model, self.d_ff)

    def to_json(self) -> dict:
        return {"layers": self.layers, "d_model": self.d_model, "n_heads": self.n_heads,
                "d_ff": self.d_ff, "vocab_size": self.vocab_size,
                "max_seq_len": self.max_seq_len, "plan": self.plan.to_json(),
                "registry": self.registry.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        plan = SplitPlan.from_json(d.pop("plan")) if "plan" in d else SplitPlan(12, 4)
        reg = LanguageRegistry.from_json(d.pop("registry")) if "registry" in d else cls.registry
        return cls(plan=plan, registry=reg, **d)

    def replace(self, **kw) -> "ModelConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return ModelConfig(**d)


class Model:
    def __init__(self, config: ModelConfig, mode: str, state: dict[str, np.ndarray],
                 nl_expert: bool = False, dtype=np.float32):
        if mode not in MODES:
            raise ValueError(f"unknown model mode {mode!r}")
        self.config = config
        self.mode = mode
        self.nl_expert = bool(nl_expert)
        if self.nl_expert and mode != "mole":
            raise ValueError("nl_expert requires mode 'mole'")
        self.expert_names = config.registry.names + ((NL_EXPERT,) if self.nl_expert else ())
        base_trainable = mode in ("plain", "full-ft")
        state = dict(state)

        def take(name, trainable=base_trainable):
            if name not in state:
                raise KeyError(f"missing tensor {name!r}")
            return Tensor(np.array(state.pop(name), dtype=dtype), requires_grad=trainable,
                          name=name)

        c = config
        self.tok_emb = take("base/tok_emb")
        self.pos_emb = take("base/pos_emb")
        self.ln_f = (take("base/ln_f.g"), take("base/ln_f.b"))
        self.blocks = []
        for i in range(c.layers):
            p = f"base/layer{i}"
            blk = {
                "ln1": (take(f"{p}/ln1.g"), take(f"{p}/ln1.b")),
                "ln2": (take(f"{p}/ln2.g"), take(f"{p}/ln2.b")),
                "attn": tuple(take(f"{p}/attn.{w}") for w in "qkvo"),
            }
            for ff in FF:
                blk[ff] = self._ff(i, ff, take, dtype)
            self.blocks.append(blk)
        if state:
            raise KeyError(f"unexpected tensors: {sorted(state)[:4]}")
        self._check_shapes()

    def _ff(self, i: int, ff: str, take, dtype):
        if self.mode in ("plain", "full-ft"):
            return DenseLinear(take(f"base/layer{i}/{ff}.W"))
        W0 = take(f"base/layer{i}/{ff}.W0", False)
        pair = lambda pre: (take(f"{pre}/layer{i}/{ff}.B", True),  # noqa: E731
                            take(f"{pre}/layer{i}/{ff}.A", True))
        if self.mode == "lora":
            return LoraLinear(W0, *pair("lora"))
        return MoleLinear(W0, pair("shared"), [pair(f"expert/{n}") for n in self.expert_names],
                          None if self.nl_expert else pair("nl"))

    def _check_shapes(self) -> None:
        c = self.config
        want = {self.tok_emb: (c.vocab_size, c.d_model), self.pos_emb: (c.max_seq_len, c.d_model)}
        for blk in self.blocks:
            for w in blk["attn"]:
                want[w] = (c.d_model, c.d_model)
        for t, shape in want.items():
            if t.shape != shape:
                raise tn.ShapeError(f"{t.name}: expected {shape}, got {t.shape}")

    # -- construction ---------------------------------------------------------

    @classmethod
    def init_plain(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        c = config
        std = 0.02
        proj_std = std / np.sqrt(2 * c.layers)
        s = {"base/tok_emb": rng.normal(0, std, (c.vocab_size, c.d_model)),
             "base/pos_emb": rng.normal(0, std, (c.max_seq_len, c.d_model)),
             "base/ln_f.g": np.ones(c.d_model), "base/ln_f.b": np.zeros(c.d_model)}
        for i in range(c.layers):
            p = f"base/layer{i}"
            for ln in ("ln1", "ln2"):
                s[f"{p}/{ln}.g"] = np.ones(c.d_model)
                s[f"{p}/{ln}.b"] = np.zeros(c.d_model)
            for w in "qkv":
                s[f"{p}/attn.{w}"] = rng.normal(0, std, (c.d_model, c.d_model))
            s[f"{p}/attn.o"] = rng.normal(0, proj_std, (c.d_model, c.d_model))
            s[f"{p}/ff_up.W"] = rng.normal(0, std, (c.d_ff, c.d_model))
            s[f"{p}/ff_down.W"] = rng.normal(0, proj_std, (c.d_model, c.d_ff))
        return cls(config, "plain", s, dtype=dtype)

    def base_state(self) -> dict[str, np.ndarray]:
        """Non-feedforward base tensors (shared by every derived model)."""
        return {k: v for k, v in self.state().items()
                if k.startswith("base/") and ".W" not in k.rsplit("/", 1)[-1]}

    def dense_ff(self, i: int, ff: str) -> np.ndarray:
        lin = self.blocks[i][ff]
        if isinstance(lin, DenseLinear):
            return lin.W.data
        raise ValueError(f"feedforward {ff} of layer {i} is not dense (mode {self.mode})")

    def split(self, plan: SplitPlan | None = None, nl_expert: bool = False, seed: int = 0,
              dtype=None) -> "Model":
        """MoLE model whose adapters come from splitting this plain model's
        feedforward weights; the rest of the base is copied frozen."""
        self._need_dense()
        plan = plan or self.config.plan
        config = self.config.replace(plan=plan)
        rng = np.random.default_rng(seed)
        K = len(config.registry.names) + (1 if nl_expert else 0)
        names = config.registry.names + ((NL_EXPERT,) if nl_expert else ())
        s = self.base_state()
        for i in range(config.layers):
            for ff in FF:
                init = split_init(self.dense_ff(i, ff).astype(np.float64), plan, K, rng)
                s[f"base/layer{i}/{ff}.W0"] = init.W0
                s[f"shared/layer{i}/{ff}.B"], s[f"shared/layer{i}/{ff}.A"] = init.shared
                for n, (B, A) in zip(names, init.experts):
                    s[f"expert/{n}/layer{i}/{ff}.B"], s[f"expert/{n}/layer{i}/{ff}.A"] = B, A
                if not nl_expert:
                    s[f"nl/layer{i}/{ff}.B"], s[f"nl/layer{i}/{ff}.A"] = init.nl
        return Model(config, "mole", s, nl_expert=nl_expert, dtype=dtype or self.dtype)

    def with_lora(self, r: int, seed: int = 0) -> "Model":
        """One standard-initialised rank-``r`` LoRA pair per feedforward linear."""
        self._need_dense()
        rng = np.random.default_rng(seed)
        s = self.base_state()
        for i in range(self.config.layers):
            for ff in FF:
                W = self.dense_ff(i, ff)
                d, k = W.shape
                s[f"base/layer{i}/{ff}.W0"] = W
                s[f"lora/layer{i}/{ff}.B"] = rng.normal(0.0, 1.0 / np.sqrt(r), (d, r))
                s[f"lora/layer{i}/{ff}.A"] = np.zeros((r, k))
        return Model(self.config, "lora", s, dtype=self.dtype)

    def full_ft(self) -> "Model":
        self._need_dense()
        return Model(self.config, "full-ft", self.state(), dtype=self.dtype)

    def _need_dense(self) -> None:
        if self.mode not in ("plain", "full-ft"):
            raise ValueError(f"needs a dense base model, got mode {self.mode!r}")

    # -- parameters -------------------------------------------------------------

    @property
    def dtype(self):
        return self.tok_emb.dtype

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"base/tok_emb": self.tok_emb, "base/pos_emb": self.pos_emb,
               "base/ln_f.g": self.ln_f[0], "base/ln_f.b": self.ln_f[1]}
        for i, blk in enumerate(self.blocks):
            p = f"base/layer{i}"
            out[f"{p}/ln1.g"], out[f"{p}/ln1.b"] = blk["ln1"]
            out[f"{p}/ln2.g"], out[f"{p}/ln2.b"] = blk["ln2"]
            for w, t in zip("qkvo", blk["attn"]):
                out[f"{p}/attn.{w}"] = t
            for ff in FF:
                lin = blk[ff]
                if isinstance(lin, DenseLinear):
                    out[f"{p}/{ff}.W"] = lin.W
                    continue
                out[f"{p}/{ff}.W0"] = lin.W0
                if isinstance(lin, LoraLinear):
                    out[f"lora/layer{i}/{ff}.B"], out[f"lora/layer{i}/{ff}.A"] = lin.B, lin.A
                    continue
                out[f"shared/layer{i}/{ff}.B"], out[f"shared/layer{i}/{ff}.A"] = lin.shared
                for n, (B, A) in zip(self.expert_names, lin.experts):
                    out[f"expert/{n}/layer{i}/{ff}.B"], out[f"expert/{n}/layer{i}/{ff}.A"] = B, A
                if lin.nl is not None:
                    out[f"nl/layer{i}/{ff}.B"], out[f"nl/layer{i}/{ff}.A"] = lin.nl
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named_tensors().items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Overwrite tensors in place (shapes must match)."""
        named = self.named_tensors()
        for k, v in state.items():
            if k not in named:
                if strict:
                    raise KeyError(f"unknown tensor {k!r}")
                continue
            t = named[k]
            if tuple(v.shape) != t.shape:
                raise tn.ShapeError(f"{k}: shape {tuple(v.shape)} vs {t.shape}")
            t.data[...] = v
        for blk in self.blocks:
            for ff in FF:
                blk[ff].refresh()

    def parameters(self) -> list[Tensor]:
        """Trainable tensors in a stable order."""
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def named_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def num_trainable(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def expected_num_trainable(self) -> int:
        """Closed form for the adapter modes."""
        c = self.config
        if self.mode == "mole":
            per = 2 * trainable_parameter_count(c.d_model, c.d_ff, c.plan, len(self.expert_names))
            if self.nl_expert:
                per -= 2 * (c.d_model + c.d_ff) * c.plan.r_n
            return c.layers * per
        if self.mode == "lora":
            return c.layers * 2 * (c.d_model + c.d_ff) * self.blocks[0]["ff_up"].B.shape[1]
        return self.num_trainable()

    # -- forward ------------------------------------------------------------------

    def route_labels(self, labels: np.ndarray) -> np.ndarray:
        if self.nl_expert:
            labels = np.where(labels == NL, len(self.config.registry.names), labels)
        return labels

    def forward(self, ids, labels=None, kv: list | None = None) -> Tensor:
        """Logits ``(B, T, vocab)`` for token ids ``(B, T)`` (or ``(T,)``).

        ``kv``, when given, receives each layer's per-head keys and values.
        """
        ids = np.asarray(ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        Bsz, T = ids.shape
        c = self.config
        if T > c.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {c.max_seq_len}")
        routing = None
        if self.mode == "mole":
            if labels is None:
                raise ValueError("mole model needs per-token labels")
            labels = np.asarray(labels, dtype=np.int64).reshape(Bsz, T)
            routing = Routing(self.route_labels(labels).reshape(-1), len(self.expert_names))
        elif labels is not None and np.asarray(labels).size != ids.size:
            raise ValueError(f"{np.asarray(labels).size} labels for {ids.size} tokens")

        H = c.n_heads
        dh = c.d_model // H
        x = tn.add(tn.gather_rows(self.tok_emb, ids), tn.gather_rows(self.pos_emb, np.arange(T)))
        for blk in self.blocks:
            h = tn.layer_norm(x, *blk["ln1"])
            Wq, Wk, Wv, Wo = blk["attn"]

            def heads(W):
                y = tn.reshape(tn.matmul(h, tn.transpose(W)), (Bsz, T, H, dh))
                return tn.transpose(y, (0, 2, 1, 3))

            q, k, v = heads(Wq), heads(Wk), heads(Wv)
            if kv is not None:
                kv.append((k.data, v.data))
            a = tn.causal_attention(q, k, v)
            a = tn.reshape(tn.transpose(a, (0, 2, 1, 3)), (Bsz, T, c.d_model))
            x = tn.add(x, tn.matmul(a, tn.transpose(Wo)))
            h = tn.reshape(tn.layer_norm(x, *blk["ln2"]), (Bsz * T, c.d_model))
            h = blk["ff_down"](tn.gelu(blk["ff_up"](h, routing)), routing)
            x = tn.add(x, tn.reshape(h, (Bsz, T, c.d_model)))
        x = tn.layer_norm(x, *self.ln_f)
        logits = tn.matmul(x, tn.transpose(self.tok_emb))
        return tn.reshape(logits, (T, c.vocab_size)) if squeeze else logits

    __call__ = forward

    def _routing(self, labels: np.ndarray) -> Routing | None:
        if self.mode != "mole":
            return None
        return Routing(self.route_labels(np.asarray(labels, dtype=np.int64).reshape(-1)),
                       len(self.expert_names))

    def prefill(self, ids: np.ndarray, labels: np.ndarray, capacity: int) -> "KVCache":
        """Run right-padded prompts once and keep keys/values for decoding."""
        Bsz, T = ids.shape
        if capacity > self.config.max_seq_len or capacity < T:
            raise ValueError(f"cache capacity {capacity} outside [{T}, "
                             f"{self.config.max_seq_len}]")
        kv: list = []
        with tn.no_grad():
            logits = self.forward(ids, labels, kv=kv).data
        H, dh = self.config.n_heads, self.config.d_model // self.config.n_heads
        cache = KVCache([], logits)
        for k, v in kv:
            K = np.zeros((Bsz, H, capacity, dh), dtype=k.dtype)
            V = np.zeros_like(K)
            K[:, :, :T], V[:, :, :T] = k, v
            cache.layers.append((K, V))
        return cache

    def decode_step(self, cache: "KVCache", ids: np.ndarray, labels: np.ndarray,
                    pos: np.ndarray) -> np.ndarray:
        """Logits ``(B, vocab)`` for one new token per row at positions ``pos``.

        Row ``b`` attends to cache slots ``0..pos[b]``; slots beyond are ignored,
        so rows may sit at different lengths.
        """
        c = self.config
        Bsz = ids.shape[0]
        H, dh = c.n_heads, c.d_model // c.n_heads
        pos = np.asarray(pos, dtype=np.int64)
        if pos.max() >= cache.capacity:
            raise ValueError("decode position beyond cache capacity")
        rows = np.arange(Bsz)
        visible = np.arange(cache.capacity)[None, :] <= pos[:, None]
        bias = np.where(visible, 0.0, -1e9).astype(self.dtype)[:, None, None, :]
        routing = self._routing(labels)
        with tn.no_grad():
            x = self.tok_emb.data[ids] + self.pos_emb.data[pos]
            for blk, (K, V) in zip(self.blocks, cache.layers):
                h = tn.layer_norm(Tensor(x), *blk["ln1"]).data
                Wq, Wk, Wv, Wo = (w.data for w in blk["attn"])
                q = (h @ Wq.T).reshape(Bsz, H, 1, dh)
                K[rows, :, pos] = (h @ Wk.T).reshape(Bsz, H, dh)
                V[rows, :, pos] = (h @ Wv.T).reshape(Bsz, H, dh)
                scores = q @ np.swapaxes(K, -1, -2) * self.dtype.type(1.0 / np.sqrt(dh)) + bias
                scores -= scores.max(axis=-1, keepdims=True)
                w = np.exp(scores)
                w /= w.sum(axis=-1, keepdims=True)
                a = (w @ V).reshape(Bsz, c.d_model)
                x = x + a @ Wo.T
                h = tn.layer_norm(Tensor(x), *blk["ln2"])
                x = x + blk["ff_down"](tn.gelu(blk["ff_up"](h, routing)), routing).data
            x = tn.layer_norm(Tensor(x), *self.ln_f).data
        return x @ self.tok_emb.data.T

    def describe(self) -> dict:
        return {"mode": self.mode, "nl_expert": self.nl_expert,
                "expert_names": list(self.expert_names), "num_trainable": self.num_trainable(),
                "config": self.config.to_json()}


@dataclass
class KVCache:
    layers: list          # per layer (K, V), each (B, H, capacity, dh)
    prefill_logits: np.ndarray

    @property
    def capacity(self) -> int:
        return self.layers[0][0].shape[2]
