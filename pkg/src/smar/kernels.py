"""Retrieval hot loops with a compiled backend and a NumPy fallback.

The compiled extension ``smar._kernels`` is used when it imports; setting
``SMAR_PURE_PYTHON=1`` forces the fallback. Both backends return identical
results.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

try:
    if os.environ.get("SMAR_PURE_PYTHON"):
        raise ImportError("pure-Python backend requested")
    from smar import _kernels as _ext
except ImportError:
    _ext = None

BACKEND = "cython" if _ext is not None else "python"


def topk_rows_python(scores: np.ndarray, k: int, threads: int = 1):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    k = min(k, scores.shape[1])

    def run(block):
        if 4 * k >= block.shape[1]:
            # stable sort keeps ascending column order among equal scores
            idx = np.argsort(-block, axis=1, kind="stable")[:, :k]
        else:
            # the k-th best value bounds the candidates; ties at it are all kept
            kth = -np.partition(-block, k - 1, axis=1)[:, k - 1]
            idx = np.empty((block.shape[0], k), dtype=np.int64)
            for r, row in enumerate(block):
                cand = np.flatnonzero(row >= kth[r])
                idx[r] = cand[np.lexsort((cand, -row[cand]))[:k]]
        return idx.astype(np.int64), np.take_along_axis(block, idx, axis=1)

    if threads <= 1 or scores.shape[0] < 2 * threads:
        return run(scores)
    parts = np.array_split(scores, threads)
    with ThreadPoolExecutor(threads) as pool:
        done = list(pool.map(run, parts))
    return np.concatenate([d[0] for d in done]), np.concatenate([d[1] for d in done])


def prefix_hits_python(ranked: np.ndarray, indptr: np.ndarray, indices: np.ndarray) -> np.ndarray:
    out = np.zeros(ranked.shape, dtype=np.int64)
    for r in range(ranked.shape[0]):
        rel = indices[indptr[r]:indptr[r + 1]]
        hit = np.isin(ranked[r], rel) & (ranked[r] >= 0)
        out[r] = np.cumsum(hit)
    return out


def topk_rows(scores: np.ndarray, k: int, threads: int = 1, backend: str | None = None):
    """Indices and scores of the ``k`` best columns per row.

    Order is score descending, then column ascending.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if (backend or BACKEND) == "cython":
        if _ext is None:
            raise RuntimeError("compiled kernels are not available")
        return _ext.topk_rows(np.ascontiguousarray(scores, dtype=np.float64), k, threads)
    return topk_rows_python(scores, k, threads)


def prefix_hits(ranked: np.ndarray, indptr: np.ndarray, indices: np.ndarray, backend: str | None = None) -> np.ndarray:
    ranked = np.ascontiguousarray(ranked, dtype=np.int64)
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    if (backend or BACKEND) == "cython":
        if _ext is None:
            raise RuntimeError("compiled kernels are not available")
        return _ext.prefix_hits(ranked, indptr, indices)
    return prefix_hits_python(ranked, indptr, indices)
