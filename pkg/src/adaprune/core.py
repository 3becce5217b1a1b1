"""Dense token-matrix types, index sets and row normalization shared by every stage."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ZERO_NORM_EPS = 1e-12
UNIT_TOL = 1e-6


class AdapruneError(Exception):
    """Base class for all data/config errors raised by the engine."""


class ZeroNormRow(AdapruneError):
    def __init__(self, index: int):
        super().__init__(f"row {index} has (near) zero norm")
        self.index = index


class DimMismatch(AdapruneError):
    pass


class ShapeMismatch(AdapruneError):
    pass


class InvalidIndexSet(AdapruneError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TokenMatrix:
    """M x d float32 token features, row-major, optionally laid out on an (H, W) grid.

    ``cls`` holds a special (e.g. [CLS]) row kept outside the patch grid.
    """

    data: np.ndarray
    grid: tuple[int, int] | None = None
    cls: np.ndarray | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ShapeMismatch(f"token matrix must be 2-D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise AdapruneError("token matrix contains non-finite entries")
        if self.grid is not None:
            h, w = (int(g) for g in self.grid)
            if h < 1 or w < 1 or h * w != data.shape[0]:
                raise ShapeMismatch(f"grid {h}x{w} does not cover {data.shape[0]} tokens")
            object.__setattr__(self, "grid", (h, w))
        if self.cls is not None:
            cls = np.ascontiguousarray(self.cls, dtype=np.float32).reshape(-1)
            if cls.shape[0] != data.shape[1]:
                raise ShapeMismatch("cls row width differs from token width")
            object.__setattr__(self, "cls", _frozen(cls))
        object.__setattr__(self, "data", _frozen(data))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def take(self, indices: Sequence[int] | np.ndarray) -> "TokenMatrix":
        return TokenMatrix(self.data[np.asarray(indices, dtype=np.int64)])


@dataclass(frozen=True)
class LayerStack:
    layers: tuple[TokenMatrix, ...]
    layer_ids: tuple[int, ...]
    has_cls: bool = field(default=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "layer_ids", tuple(int(i) for i in self.layer_ids))

    @property
    def d_v(self) -> int:
        return self.layers[0].cols if self.layers else 0

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def index_of(self, layer_id: int) -> int:
        try:
            return self.layer_ids.index(int(layer_id))
        except ValueError:
            raise KeyError(f"layer {layer_id} not present in stack {self.layer_ids}") from None

    def is_aligned(self) -> bool:
        if not self.layers:
            return True
        m0, g0 = self.layers[0].rows, self.layers[0].grid
        return all(l.rows == m0 and l.grid == g0 for l in self.layers)


def validate_stack(stack: LayerStack) -> list[str]:
    """Return the list of LayerStack invariant violations (empty when valid)."""
    problems = []
    if not stack.layers:
        problems.append("stack has no layers")
        return problems
    if len(stack.layers) != len(stack.layer_ids):
        problems.append(f"{len(stack.layers)} layers but {len(stack.layer_ids)} layer ids")
    widths = {l.cols for l in stack.layers}
    if len(widths) > 1:
        problems.append(f"feature dims differ across layers: {sorted(widths)}")
    ids = stack.layer_ids
    if any(b <= a for a, b in zip(ids, ids[1:])):
        problems.append(f"layer ids not strictly increasing: {list(ids)}")
    if any(i < 1 for i in ids):
        problems.append("layer ids must be >= 1")
    counts = {l.rows for l in stack.layers}
    if len(counts) > 1 and not all(l.grid is not None for l in stack.layers):
        problems.append("token counts differ across layers without spatial grids")
    return problems


def l2_normalize_rows(m: TokenMatrix | np.ndarray, dtype=np.float32) -> np.ndarray:
    """Divide every row by its Euclidean norm (computed in float64, returned as ``dtype``)."""
    data = m.data if isinstance(m, TokenMatrix) else np.asarray(m)
    x = data.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(norms <= ZERO_NORM_EPS)
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return (x / norms[:, None]).astype(dtype, copy=False)


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise DimMismatch(f"{u.shape[0]} vs {v.shape[0]}")
    for name, x in (("u", u), ("v", v)):
        if abs(np.linalg.norm(x) - 1.0) > UNIT_TOL:
            raise ValueError(f"{name} is not unit norm")
    return float(min(1.0, max(-1.0, float(u @ v))))


def index_set(indices: Iterable[int], bound: int | None = None) -> np.ndarray:
    """Build a sorted, duplicate-free int64 index array, checked against ``bound``."""
    arr = np.asarray(sorted(int(i) for i in indices), dtype=np.int64)
    if arr.size and np.any(np.diff(arr) == 0):
        raise InvalidIndexSet("duplicate indices")
    if arr.size and arr[0] < 0:
        raise InvalidIndexSet("negative index")
    if bound is not None and arr.size and arr[-1] >= bound:
        raise InvalidIndexSet(f"index {int(arr[-1])} out of range for {bound} tokens")
    return arr
