"""Attention matrices and reference-row saliency of visual tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AdapruneError, DimMismatch
from .fusion import softmax_rows

STOCHASTIC_TOL = 1e-4


class UnknownToken(AdapruneError):
    def __init__(self, token: int):
        super().__init__(f"token {token} has no attention column")
        self.token = token


class InvalidAttention(AdapruneError):
    pass


def attention_from_qk(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic ``softmax(q k^T / sqrt(d_k))``."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    k = np.atleast_2d(np.asarray(k, dtype=np.float64))
    if q.shape[1] != k.shape[1] or q.shape[1] < 1:
        raise DimMismatch(f"query dim {q.shape[1]} vs key dim {k.shape[1]}")
    return softmax_rows(q @ k.T / np.sqrt(q.shape[1]))


@dataclass(frozen=True)
class AttentionRecord:
    """Head-averaged attention ``A`` plus the reference rows S and visual column map.

    Visual token ``visual_tokens[j]`` lives in column ``visual_cols[j]``;
    ``visual_tokens`` defaults to ``0..len(visual_cols)-1``.
    """

    A: np.ndarray
    reference_rows: np.ndarray
    visual_cols: np.ndarray
    stage_layer: int
    visual_tokens: np.ndarray | None = None

    def __post_init__(self):
        A = np.ascontiguousarray(self.A, dtype=np.float32)
        if A.ndim != 2:
            raise InvalidAttention("attention matrix must be 2-D")
        if not np.isfinite(A).all() or (A < 0).any():
            raise InvalidAttention("attention entries must be finite and non-negative")
        sums = A.astype(np.float64).sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL)
        if bad.size:
            raise InvalidAttention(f"row {int(bad[0])} sums to {sums[bad[0]]:.6f}, not 1")
        ref = np.asarray(self.reference_rows, dtype=np.int64).reshape(-1)
        if ref.size == 0 or ref.min() < 0 or ref.max() >= A.shape[0] or np.unique(ref).size != ref.size:
            raise InvalidAttention("reference rows must be a non-empty set of valid row indices")
        cols = np.asarray(self.visual_cols, dtype=np.int64).reshape(-1)
        if np.unique(cols).size != cols.size or (cols.size and (cols.min() < 0 or cols.max() >= A.shape[1])):
            raise InvalidAttention("visual columns must be unique valid column indices")
        toks = np.arange(cols.size) if self.visual_tokens is None else np.asarray(self.visual_tokens, dtype=np.int64)
        if toks.shape != cols.shape or np.unique(toks).size != toks.size:
            raise InvalidAttention("visual_tokens must pair one-to-one with visual_cols")
        for name, arr in (("A", A), ("reference_rows", ref), ("visual_cols", cols), ("visual_tokens", toks)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "stage_layer", int(self.stage_layer))

    def columns_for(self, tokens: np.ndarray) -> np.ndarray:
        lookup = dict(zip(self.visual_tokens.tolist(), self.visual_cols.tolist()))
        out = np.empty(len(tokens), dtype=np.int64)
        for i, t in enumerate(np.asarray(tokens).tolist()):
            if t not in lookup:
                raise UnknownToken(int(t))
            out[i] = lookup[t]
        return out


def saliency(rec: AttentionRecord, survivors: np.ndarray) -> np.ndarray:
    """Mean attention each surviving token receives from the reference rows.

    Returned in the order of ``survivors``; scores are absolute mass and are
    never renormalized over the survivors.
    """
    cols = rec.columns_for(survivors)
    block = rec.A[np.ix_(rec.reference_rows, cols)].astype(np.float64)
    return block.mean(axis=0)
