"""Class-conditioned convex mixing of encoder layers, projection, and grid alignment."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import AdapruneError, LayerStack, ShapeMismatch, TokenMatrix
from .router import NUM_CATEGORIES

SIMPLEX_TOL = 1e-6
PROFILE_ENV = "ADAPRUNE_PROFILE"


class NonFiniteScore(AdapruneError):
    pass


class UnalignedLayers(AdapruneError):
    pass


class MissingGrid(AdapruneError):
    pass


class ProfileError(AdapruneError):
    pass


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Max-stabilized softmax along the last axis, float64."""
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_mixture(scores: Sequence[float] | np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Mixture weights ``softmax(tau * scores)``; a point on the simplex."""
    w = np.asarray(scores, dtype=np.float64).reshape(-1)
    if w.size < 1:
        raise ValueError("need at least one layer score")
    if not (tau > 0 and math.isfinite(tau)):
        raise ValueError(f"temperature must be positive, got {tau}")
    if not np.isfinite(w).all():
        raise NonFiniteScore(f"non-finite layer score in {w.tolist()}")
    return softmax_rows(tau * w)


def check_simplex(alpha: np.ndarray, tol: float = SIMPLEX_TOL) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.size == 0 or (alpha < 0).any() or abs(alpha.sum() - 1.0) > tol:
        raise ProfileError(f"mixture weights are not on the simplex: {alpha.tolist()}")
    return alpha


@dataclass(frozen=True)
class ClassProfile:
    """Per-category layer mixture plus relevance/coverage split ratio.

    Exactly one of ``layer_weights`` (simplex coefficients keyed by encoder
    layer id) or ``layer_scores`` (raw scores turned into weights with
    ``softmax(tau * s)``) is set. Layers outside the support get weight 0.
    """

    category: int
    split_ratio: float
    layer_weights: Mapping[int, float] | None = None
    layer_scores: Mapping[int, float] | None = None
    tau: float = 1.0

    def __post_init__(self):
        if (self.layer_weights is None) == (self.layer_scores is None):
            raise ProfileError("profile needs exactly one of layer_weights / layer_scores")
        if not 0 <= int(self.category) < NUM_CATEGORIES:
            raise ProfileError(f"category {self.category} out of range")
        if not 0.0 <= float(self.split_ratio) <= 1.0:
            raise ProfileError(f"split ratio {self.split_ratio} outside [0, 1]")
        if self.layer_weights is not None:
            lw = {int(k): float(v) for k, v in self.layer_weights.items()}
            if not lw or any(v < 0 for v in lw.values()) or abs(sum(lw.values()) - 1) > SIMPLEX_TOL:
                raise ProfileError(f"class {self.category}: weights must be >= 0 and sum to 1")
            object.__setattr__(self, "layer_weights", dict(sorted(lw.items())))
        else:
            ls = {int(k): float(v) for k, v in self.layer_scores.items()}
            if not ls or not all(math.isfinite(v) for v in ls.values()):
                raise ProfileError(f"class {self.category}: scores must be finite")
            if not self.tau > 0:
                raise ProfileError("tau must be positive")
            object.__setattr__(self, "layer_scores", dict(sorted(ls.items())))

    @property
    def mode(self) -> str:
        return "weights" if self.layer_weights is not None else "scores"

    @property
    def support(self) -> tuple[int, ...]:
        return tuple((self.layer_weights or self.layer_scores).keys())

    def mixture(self, layer_ids: Sequence[int]) -> np.ndarray:
        """Mixture weights aligned to ``layer_ids`` (zeros off the support)."""
        layer_ids = [int(i) for i in layer_ids]
        missing = [l for l in self.support if l not in layer_ids]
        if missing:
            raise ProfileError(f"class {self.category} needs layers {missing} absent from the stack")
        alpha = np.zeros(len(layer_ids))
        pos = [layer_ids.index(l) for l in self.support]
        if self.layer_weights is not None:
            alpha[pos] = list(self.layer_weights.values())
        else:
            alpha[pos] = softmax_mixture(list(self.layer_scores.values()), self.tau)
        return alpha

    def to_dict(self) -> dict:
        d: dict = {"category": int(self.category), "mode": self.mode}
        if self.layer_weights is not None:
            d["layer_weights"] = {str(k): v for k, v in self.layer_weights.items()}
        else:
            d["layer_scores"] = {str(k): v for k, v in self.layer_scores.items()}
            d["tau"] = self.tau
        d["split_ratio"] = float(self.split_ratio)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassProfile":
        mode = d.get("mode", "weights" if "layer_weights" in d else "scores")
        if mode == "weights":
            return cls(int(d["category"]), float(d["split_ratio"]), layer_weights=d["layer_weights"])
        if mode == "scores":
            return cls(
                int(d["category"]),
                float(d["split_ratio"]),
                layer_scores=d["layer_scores"],
                tau=float(d.get("tau", 1.0)),
            )
        raise ProfileError(f"unknown profile mode {mode!r}")


@dataclass(frozen=True)
class ProfileTable:
    profiles: tuple[ClassProfile, ...]
    backbone: str = "custom"

    def __post_init__(self):
        profiles = tuple(sorted(self.profiles, key=lambda p: p.category))
        cats = [p.category for p in profiles]
        if cats != list(range(NUM_CATEGORIES)):
            raise ProfileError(f"profile table must cover categories 0..8 once each, got {cats}")
        object.__setattr__(self, "profiles", profiles)

    def __getitem__(self, category: int) -> ClassProfile:
        return self.profiles[int(category)]

    def layer_ids(self) -> tuple[int, ...]:
        return tuple(sorted({l for p in self.profiles for l in p.support}))

    def to_json(self) -> str:
        doc = {"backbone": self.backbone, "profiles": [p.to_dict() for p in self.profiles]}
        return json.dumps(doc, indent=2) + "\n"


def load_profiles(content: str) -> ProfileTable:
    try:
        doc = json.loads(content)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"profile file: {exc.msg} (line {exc.lineno})") from None
    try:
        profiles = tuple(ClassProfile.from_dict(p) for p in doc["profiles"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProfileError(f"malformed profile entry: {exc!r}") from None
    return ProfileTable(profiles, str(doc.get("backbone", "custom")))


def default_profiles(backbone: str = "llava") -> ProfileTable:
    """The calibrated per-category defaults shipped for ``llava`` or ``qwen2.5-vl``."""
    names = {"llava": "profiles_llava.json", "qwen2.5-vl": "profiles_qwen25vl.json"}
    if backbone not in names:
        raise ProfileError(f"no shipped profiles for backbone {backbone!r}")
    text = resources.files("adaprune").joinpath("data", names[backbone]).read_text("utf-8")
    return load_profiles(text)


def resolve_profiles(path: str | Path | None = None) -> ProfileTable:
    """Load profiles from ``path``, else ``$ADAPRUNE_PROFILE``, else the LLaVA defaults."""
    path = path or os.environ.get(PROFILE_ENV)
    if path in ("llava", "qwen2.5-vl"):
        return default_profiles(str(path))
    if path:
        return load_profiles(Path(path).read_text(encoding="utf-8"))
    return default_profiles("llava")


def fuse(stack: LayerStack, alpha: np.ndarray, keep_cls: bool = False, counter=None) -> TokenMatrix:
    """Token-wise convex combination of the stack layers (float64 accumulation)."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.size != stack.num_layers:
        raise ShapeMismatch(f"{alpha.size} weights for {stack.num_layers} layers")
    if not stack.is_aligned():
        raise UnalignedLayers("layers have different token grids; align them first")
    first = stack.layers[0]
    acc = np.zeros((first.rows, first.cols))
    for a, layer in zip(alpha, stack.layers):
        acc += a * layer.data.astype(np.float64)
    if counter is not None:
        counter.add("fusion", stack.num_layers * first.rows * first.cols)
    if keep_cls and all(l.cls is not None for l in stack.layers):
        cls = sum(a * l.cls.astype(np.float64) for a, l in zip(alpha, stack.layers))
        return TokenMatrix(np.vstack([cls[None, :], acc]))
    return TokenMatrix(acc, grid=first.grid)


@dataclass(frozen=True)
class Projection:
    """Linear map into decoder space; ``matrix=None`` is the identity."""

    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.matrix is not None:
            m = np.ascontiguousarray(self.matrix, dtype=np.float32)
            if m.ndim != 2 or not np.isfinite(m).all():
                raise ShapeMismatch("projection must be a finite 2-D matrix")
            m.setflags(write=False)
            object.__setattr__(self, "matrix", m)

    @property
    def is_identity(self) -> bool:
        return self.matrix is None


IDENTITY = Projection()


def project(m: TokenMatrix, p: Projection = IDENTITY) -> TokenMatrix:
    if p.is_identity:
        return m
    if p.matrix.shape[0] != m.cols:
        raise ShapeMismatch(f"projection expects d_v={p.matrix.shape[0]}, tokens have {m.cols}")
    out = m.data.astype(np.float64) @ p.matrix.astype(np.float64)
    return TokenMatrix(out, grid=m.grid)


def _linear_axis(n_in: int, n_out: int):
    # pixel-centre convention (align_corners=False), clamped at the low edge
    src = np.maximum((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _resample_bilinear(x: np.ndarray, h: int, w: int) -> np.ndarray:
    i0, i1, fy = _linear_axis(x.shape[0], h)
    x = x[i0] * (1 - fy)[:, None, None] + x[i1] * fy[:, None, None]
    j0, j1, fx = _linear_axis(x.shape[1], w)
    return x[:, j0] * (1 - fx)[None, :, None] + x[:, j1] * fx[None, :, None]


def _resample_nearest(x: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum(np.floor(np.arange(h) * (x.shape[0] / h)).astype(np.int64), x.shape[0] - 1)
    cols = np.minimum(np.floor(np.arange(w) * (x.shape[1] / w)).astype(np.int64), x.shape[1] - 1)
    return x[rows][:, cols]


def _area_pool(x: np.ndarray, h: int, w: int) -> np.ndarray:
    fh, fw = x.shape[0] // h, x.shape[1] // w
    return x.reshape(h, fh, w, fw, x.shape[2]).mean(axis=(1, 3))


def align_layer(m: TokenMatrix, target: tuple[int, int], mode: str = "bilinear") -> TokenMatrix:
    """Resample a grid-shaped layer onto ``target`` = (H*, W*).

    Integer-factor shrinking uses area averaging; growing uses ``mode``
    ("bilinear" or "nearest"); anything else falls back to bilinear.
    """
    if m.grid is None:
        raise MissingGrid("layer has no spatial grid")
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"invalid target grid {target}")
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown upsample mode {mode!r}")
    h, w = m.grid
    if (h, w) == (th, tw):
        return m
    x = m.data.astype(np.float64).reshape(h, w, m.cols)
    if h >= th and w >= tw and h % th == 0 and w % tw == 0:
        y = _area_pool(x, th, tw)
    elif h * w < th * tw and mode == "nearest":
        y = _resample_nearest(x, th, tw)
    else:
        y = _resample_bilinear(x, th, tw)
    return TokenMatrix(y.reshape(th * tw, m.cols), grid=(th, tw), cls=m.cls)


def align_stack(stack: LayerStack, target: tuple[int, int] | None = None, mode: str = "bilinear") -> LayerStack:
    """Bring every layer onto one grid (default: the last layer's grid)."""
    if stack.is_aligned() and target is None:
        return stack
    if any(l.grid is None for l in stack.layers):
        raise MissingGrid("cannot align layers without spatial grids")
    target = target or stack.layers[-1].grid
    layers = tuple(align_layer(l, target, mode) for l in stack.layers)
    return LayerStack(layers, stack.layer_ids, stack.has_cls)
