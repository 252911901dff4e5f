"""One-sided Jacobi SVD and the principal-component adapter split."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .labels import NL

MAX_SWEEPS = 60
JACOBI_EPS = 1e-12


class SvdConvergenceError(RuntimeError):
    def __init__(self, sweeps: int, residual: float):
        super().__init__(f"Jacobi SVD did not converge after {sweeps} sweeps "
                         f"(off-diagonal residual {residual:.3e})")
        self.residual = residual


@dataclass
class SvdResult:
    U: np.ndarray  # d x m
    S: np.ndarray  # m
    V: np.ndarray  # k x m
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _off_diagonal(at: np.ndarray) -> float:
    g = at @ at.T
    return float(np.sqrt(np.sum(g * g) - np.sum(np.diag(g) ** 2)))


def _orthonormal_columns(cols: np.ndarray, norms: np.ndarray, scale: float) -> np.ndarray:
    """Normalise columns; rebuild weak and null ones by Gram-Schmidt completion."""
    n, m = cols.shape
    out = np.zeros_like(cols)
    weak = scale * 1e-6
    basis = 0
    for j in range(m):
        if norms[j] > weak:
            out[:, j] = cols[:, j] / norms[j]
            continue
        u = cols[:, j] / norms[j] if norms[j] > 0 else np.zeros(n)
        for _ in range(2):
            u = u - out[:, :j] @ (out[:, :j].T @ u)
        nu = np.linalg.norm(u)
        while nu < 0.5:
            e = np.zeros(n)
            e[basis % n] = 1.0
            basis += 1
            for _ in range(2):
                e = e - out[:, :j] @ (out[:, :j].T @ e)
            u, nu = e, np.linalg.norm(e)
        out[:, j] = u / nu
    return out


def svd(W, max_sweeps: int = MAX_SWEEPS, eps: float = JACOBI_EPS) -> SvdResult:
    """Thin SVD ``W = U diag(S) V^T`` by cyclic one-sided Jacobi rotations."""
    W = np.array(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"svd expects a matrix, got shape {W.shape}")
    if not np.isfinite(W).all():
        raise ValueError("svd: matrix has non-finite entries")
    flip = W.shape[0] < W.shape[1]
    A = W.T if flip else W
    m = A.shape[1]
    at = np.ascontiguousarray(A.T)
    vt = np.eye(m)
    fro = float(np.linalg.norm(W))
    abs_tol = (eps * fro) ** 2
    sweeps = 0
    while True:
        if sweeps >= max_sweeps:
            raise SvdConvergenceError(sweeps, _off_diagonal(at))
        sweeps += 1
        if kernels.jacobi_sweep(at, vt, eps, abs_tol) == 0:
            break
    norms = np.sqrt(np.einsum("ij,ij->i", at, at))
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    left = _orthonormal_columns(at[order].T, norms, fro)
    right = vt[order].T
    if flip:
        return SvdResult(U=right, S=norms, V=left, sweeps=sweeps)
    return SvdResult(U=left, S=norms, V=right, sweeps=sweeps)


@dataclass(frozen=True)
class SplitPlan:
    r_s: int
    r_e: int
    order: str = "shared-first"
    scheme: str = "pissa"

    def __post_init__(self):
        if self.r_s < 0 or self.r_e < 0:
            raise ValueError(f"ranks must be non-negative: {self.r_s}/{self.r_e}")
        if self.order not in ("shared-first", "shared-last"):
            raise ValueError(f"unknown order {self.order!r}")
        if self.scheme not in ("pissa", "standard"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def r_n(self) -> int:
        return self.r_s + self.r_e

    def check(self, d: int, k: int) -> None:
        if self.r_n > min(d, k):
            raise ValueError(f"rank plan {self.r_s}/{self.r_e} needs r_n={self.r_n} "
                             f"<= min({d}, {k})")

    def to_json(self) -> dict:
        return {"r_s": self.r_s, "r_e": self.r_e, "order": self.order, "scheme": self.scheme}

    @classmethod
    def from_json(cls, d: dict) -> "SplitPlan":
        return cls(d["r_s"], d["r_e"], d.get("order", "shared-first"), d.get("scheme", "pissa"))


Pair = tuple[np.ndarray, np.ndarray]  # (B: d x r, A: r x k)


@dataclass
class MoleLinearInit:
    W0: np.ndarray
    shared: Pair
    experts: list[Pair]
    nl: Pair
    plan: SplitPlan | None = None
    # singular values assigned to each adapter (pissa only)
    components: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_languages(self) -> int:
        return len(self.experts)


def _factors(res: SvdResult, idx: np.ndarray) -> Pair:
    root = np.sqrt(res.S[idx])
    B = res.U[:, idx] * root
    A = root[:, None] * res.V[:, idx].T
    return np.ascontiguousarray(B), np.ascontiguousarray(A)


def split_init(W, plan: SplitPlan, num_languages: int,
               rng: np.random.Generator | None = None) -> MoleLinearInit:
    """Split ``W`` into a frozen residual plus shared, expert and NL adapters."""
    W = np.array(W, dtype=np.float64)
    d, k = W.shape
    plan.check(d, k)
    if num_languages < 1:
        raise ValueError("need at least one language")
    r_s, r_e, r_n = plan.r_s, plan.r_e, plan.r_n

    if plan.scheme == "standard":
        rng = rng if rng is not None else np.random.default_rng(0)

        def fresh(r: int) -> Pair:
            std = 1.0 / np.sqrt(r) if r else 0.0
            return rng.normal(0.0, std, size=(d, r)), np.zeros((r, k))

        return MoleLinearInit(W0=W.copy(), shared=fresh(r_s),
                              experts=[fresh(r_e) for _ in range(num_languages)],
                              nl=fresh(r_n), plan=plan)

    res = svd(W)
    if plan.order == "shared-first":
        s_idx, e_idx = np.arange(0, r_s), np.arange(r_s, r_n)
    else:
        e_idx, s_idx = np.arange(0, r_e), np.arange(r_e, r_n)
    n_idx = np.arange(0, r_n)
    rest = np.arange(r_n, len(res.S))
    W0 = (res.U[:, rest] * res.S[rest]) @ res.V[:, rest].T
    shared = _factors(res, s_idx)
    Be, Ae = _factors(res, e_idx)
    return MoleLinearInit(
        W0=W0,
        shared=shared,
        experts=[(Be.copy(), Ae.copy()) for _ in range(num_languages)],
        nl=_factors(res, n_idx),
        plan=plan,
        components={"shared": res.S[s_idx], "expert": res.S[e_idx], "nl": res.S[n_idx],
                    "base": res.S[rest]},
    )


def merge(init: MoleLinearInit, path: int) -> np.ndarray:
    """Effective dense weight seen by tokens routed on ``path`` (NL or k)."""
    if path == NL:
        B, A = init.nl
        return init.W0 + B @ A
    if not (0 <= path < init.num_languages):
        raise ValueError(f"unknown language index {path} (K={init.num_languages})")
    Bs, As = init.shared
    Be, Ae = init.experts[path]
    return init.W0 + Bs @ As + Be @ Ae


def rel_fro(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b||_F / ||b||_F`` (absolute when ``b`` is zero)."""
    diff = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    ref = float(np.linalg.norm(b))
    return diff / ref if ref > 0 else diff
