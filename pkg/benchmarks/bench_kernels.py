"""Compiled vs pure-Python kernels: one Jacobi SVD and a BPE encode pass.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends run on identical inputs; outputs are cross-checked before timing.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from mole import _pykernels, kernels
from mole.data import corpus as C
from mole.data.bpe import FIRST_MERGE, Vocabulary


def _best(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def _svd_case(impl, W: np.ndarray):
    def run():
        at = np.ascontiguousarray(W.T.copy())
        vt = np.ascontiguousarray(np.eye(at.shape[0]))
        abs_tol = 1e-300
        for _ in range(60):
            if impl.jacobi_sweep(at, vt, 1e-12, abs_tol) == 0:
                break
        return at
    return run


def _bpe_case(impl, vocab: Vocabulary, chunks: list[bytes]):
    def run():
        return [impl.bpe_merge(list(c), vocab.rank, FIRST_MERGE) for c in chunks]
    return run


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--size", type=int, default=128, help="square SVD matrix side")
    args = ap.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled extension not importable; comparing the fallback with itself")
    compiled = kernels._impl

    rng = np.random.default_rng(0)
    W = rng.standard_normal((args.size, args.size))
    docs = [C.prompt_and_answer(s) for s in C.synth_corpus({"n_samples": 300}, 0)]
    vocab = Vocabulary.train(docs[:200], 512)
    chunks = [c.encode("utf-8") for d in docs for c in d.split(" ") if c]

    a = _svd_case(compiled, W)()
    b = _svd_case(_pykernels, W)()
    assert np.allclose(np.sort(np.linalg.norm(a, axis=1)), np.sort(np.linalg.norm(b, axis=1)))
    assert _bpe_case(compiled, vocab, chunks)() == _bpe_case(_pykernels, vocab, chunks)()

    rows = [
        (f"jacobi svd {args.size}x{args.size}", _svd_case(compiled, W), _svd_case(_pykernels, W)),
        (f"bpe encode {len(chunks)} chunks", _bpe_case(compiled, vocab, chunks),
         _bpe_case(_pykernels, vocab, chunks)),
    ]
    print(f"{'kernel':<30}{'compiled s':>12}{'python s':>12}{'speedup':>10}")
    for name, fast, slow in rows:
        tf, ts = _best(fast, args.repeat), _best(slow, args.repeat)
        print(f"{name:<30}{tf:>12.4f}{ts:>12.4f}{ts / tf:>9.1f}x")


if __name__ == "__main__":
    main()
