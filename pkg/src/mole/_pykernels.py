"""Pure-Python implementations of the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

import math

import numpy as np


def jacobi_sweep(at: np.ndarray, vt: np.ndarray, eps: float, abs_tol: float) -> int:
    m = at.shape[0]
    rotations = 0
    for p in range(m - 1):
        for q in range(p + 1, m):
            ap, aq = at[p], at[q]
            alpha = float(ap @ ap)
            beta = float(aq @ aq)
            gamma = float(ap @ aq)
            if abs(gamma) <= abs_tol or abs(gamma) <= eps * math.sqrt(alpha * beta):
                continue
            zeta = (beta - alpha) / (2.0 * gamma)
            if zeta >= 0:
                t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
            else:
                t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = c * t
            at[p], at[q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = vt[p], vt[q]
            vt[p], vt[q] = c * vp - s * vq, s * vp + c * vq
            rotations += 1
    return rotations


def bpe_merge(ids: list[int], rank: np.ndarray, first_merge_id: int) -> list[int]:
    seq = list(ids)
    while len(seq) > 1:
        best, best_i = -1, -1
        for i in range(len(seq) - 1):
            r = rank[seq[i], seq[i + 1]]
            if r >= 0 and (best < 0 or r < best):
                best, best_i = int(r), i
        if best < 0:
            break
        a, b = seq[best_i], seq[best_i + 1]
        out = []
        i = 0
        while i < len(seq):
            if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                out.append(first_merge_id + best)
                i += 2
            else:
                out.append(seq[i])
                i += 1
        seq = out
    return seq
