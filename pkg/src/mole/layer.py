"""Routed feedforward linears: MoLE adapters, a plain LoRA pair, dense weights."""
from __future__ import annotations

import numpy as np

from . import tensor as tn
from .labels import NL, PAD, UnknownLanguageError
from .linalg import MoleLinearInit, SplitPlan
from .tensor import Tensor


def active_adapters(label: int) -> frozenset[str]:
    """Adapters that see a token carrying ``label``."""
    if label == PAD:
        return frozenset()
    if label == NL:
        return frozenset({"nl"})
    if label < 0:
        raise ValueError(f"invalid label {label}")
    return frozenset({"shared", f"expert({label})"})


def trainable_parameter_count(d: int, k: int, plan: SplitPlan, K: int) -> int:
    """Adapter parameters of one MoLE linear with ``K`` experts."""
    return (d + k) * (plan.r_s + K * plan.r_e + plan.r_n)


def lora_parameter_count(d: int, k: int, r: int) -> int:
    return (d + k) * r


class Routing:
    """Token grouping shared by every routed layer of one forward pass.

    Rows are reordered as ``[PL(0) rows, ..., PL(K-1) rows, NL rows]``; PAD
    rows are dropped and come back as zeros.
    """

    def __init__(self, labels, K: int):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        bad = (labels >= K) | ((labels < 0) & (labels != NL) & (labels != PAD))
        if bad.any():
            raise UnknownLanguageError(f"label {int(labels[bad][0])} outside registry of {K}")
        self.labels = labels
        self.n = labels.shape[0]
        self.K = K
        groups = [np.flatnonzero(labels == k) for k in range(K)]
        self.counts = [len(g) for g in groups]
        self.n_pl = int(sum(self.counts))
        nl = np.flatnonzero(labels == NL)
        self.n_nl = len(nl)
        self.perm = np.concatenate(groups + [nl]).astype(np.int64)
        self.bounds = np.cumsum([0] + self.counts)


def _lowrank(x: Tensor, B: Tensor, A: Tensor) -> Tensor:
    return tn.matmul(tn.matmul(x, tn.transpose(A)), tn.transpose(B))


class MoleLinear:
    """Frozen residual weight plus shared, per-language and NL adapter pairs.

    ``W0`` is ``d x k`` and maps a ``k``-feature row to ``d`` outputs, so a
    batch ``X`` of rows becomes ``X @ W0.T``. With ``nl=None`` the layer has
    no NL adapter (NL tokens must be relabelled before routing).
    """

    kind = "mole"

    def __init__(self, W0: Tensor, shared: tuple[Tensor, Tensor],
                 experts: list[tuple[Tensor, Tensor]], nl: tuple[Tensor, Tensor] | None):
        self.W0 = W0
        self.W0.requires_grad = False
        self._W0T = Tensor(np.ascontiguousarray(W0.data.T))
        self.shared = shared
        self.experts = experts
        self.nl = nl

    @classmethod
    def from_init(cls, init: MoleLinearInit, dtype=np.float32, nl_adapter: bool = True):
        def pair(p):
            return (Tensor(p[0].astype(dtype), requires_grad=True),
                    Tensor(p[1].astype(dtype), requires_grad=True))

        return cls(Tensor(init.W0.astype(dtype)), pair(init.shared),
                   [pair(e) for e in init.experts], pair(init.nl) if nl_adapter else None)

    @property
    def out_features(self) -> int:
        return self.W0.shape[0]

    @property
    def in_features(self) -> int:
        return self.W0.shape[1]

    @property
    def K(self) -> int:
        return len(self.experts)

    def trainable(self) -> list[Tensor]:
        ps = list(self.shared)
        for e in self.experts:
            ps.extend(e)
        if self.nl is not None:
            ps.extend(self.nl)
        return ps

    def num_trainable(self) -> int:
        return sum(p.data.size for p in self.trainable())

    def refresh(self) -> None:
        self._W0T = Tensor(np.ascontiguousarray(self.W0.data.T))

    def __call__(self, x: Tensor, routing: Routing) -> Tensor:
        if x.shape[-1] != self.in_features or x.shape[0] != routing.n:
            raise tn.ShapeError(f"MoleLinear: input {x.shape} vs weight {self.W0.shape} "
                                f"and {routing.n} labels")
        if routing.K != self.K:
            raise ValueError(f"routing built for {routing.K} languages, layer has {self.K}")
        if routing.n_nl and self.nl is None:
            raise ValueError("NL tokens routed to a layer without an NL adapter")
        xs = tn.gather_rows(x, routing.perm, unique=True)
        y = tn.matmul(xs, self._W0T)
        parts = []
        if routing.n_pl:
            xp = xs[: routing.n_pl] if routing.n_nl else xs
            Bs, As = self.shared
            pl = _lowrank(xp, Bs, As) if As.shape[0] else None
            if self.experts[0][1].shape[0]:
                chunks = []
                for k in range(self.K):
                    lo, hi = routing.bounds[k], routing.bounds[k + 1]
                    if hi > lo:
                        Be, Ae = self.experts[k]
                        xk = xp if (hi - lo) == routing.n_pl else xp[lo:hi]
                        chunks.append(_lowrank(xk, Be, Ae))
                ex = chunks[0] if len(chunks) == 1 else tn.concat(chunks, 0)
                pl = ex if pl is None else tn.add(pl, ex)
            if pl is None:
                pl = Tensor(np.zeros((routing.n_pl, self.out_features), dtype=x.dtype))
            parts.append(pl)
        if routing.n_nl:
            xn = xs[routing.n_pl:] if routing.n_pl else xs
            Bn, An = self.nl
            parts.append(_lowrank(xn, Bn, An))
        if parts:
            y = tn.add(y, parts[0] if len(parts) == 1 else tn.concat(parts, 0))
        return tn.scatter_rows(y, routing.perm, routing.n)

    def dense(self, path: int) -> np.ndarray:
        """Effective weight for ``path`` (``NL`` or language index)."""
        if path == NL:
            B, A = self.nl
            return self.W0.data + B.data @ A.data
        Bs, As = self.shared
        Be, Ae = self.experts[path]
        return self.W0.data + Bs.data @ As.data + Be.data @ Ae.data


class LoraLinear:
    """Frozen weight plus one low-rank pair applied to every token."""

    kind = "lora"

    def __init__(self, W0: Tensor, B: Tensor, A: Tensor):
        self.W0 = W0
        self.W0.requires_grad = False
        self._W0T = Tensor(np.ascontiguousarray(W0.data.T))
        self.B, self.A = B, A

    @classmethod
    def standard(cls, W: np.ndarray, r: int, rng: np.random.Generator, dtype=np.float32):
        d, k = W.shape
        std = 1.0 / np.sqrt(r) if r else 0.0
        return cls(Tensor(W.astype(dtype)),
                   Tensor(rng.normal(0.0, std, size=(d, r)).astype(dtype), requires_grad=True),
                   Tensor(np.zeros((r, k), dtype=dtype), requires_grad=True))

    @property
    def out_features(self) -> int:
        return self.W0.shape[0]

    def trainable(self) -> list[Tensor]:
        return [self.B, self.A]

    def num_trainable(self) -> int:
        return self.B.data.size + self.A.data.size

    def refresh(self) -> None:
        self._W0T = Tensor(np.ascontiguousarray(self.W0.data.T))

    def __call__(self, x: Tensor, routing: Routing | None = None) -> Tensor:
        return tn.add(tn.matmul(x, self._W0T), _lowrank(x, self.B, self.A))


class DenseLinear:
    """Plain bias-free linear, trainable or frozen."""

    kind = "dense"

    def __init__(self, W: Tensor):
        self.W = W

    @property
    def out_features(self) -> int:
        return self.W.shape[0]

    def trainable(self) -> list[Tensor]:
        return [self.W] if self.W.requires_grad else []

    def num_trainable(self) -> int:
        return self.W.data.size if self.W.requires_grad else 0

    def refresh(self) -> None:
        pass

    def __call__(self, x: Tensor, routing: Routing | None = None) -> Tensor:
        return tn.matmul(x, tn.transpose(self.W))


def routed_forward(X: Tensor, labels, layer: MoleLinear) -> Tensor:
    """Apply ``layer`` to the rows of ``X`` (``T x k``), routing each by its label."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != X.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {X.shape[0]} rows")
    return layer(X, Routing(labels, layer.K))
