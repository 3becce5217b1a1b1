"""Synthetic token dumps with planted evidence tokens.

Every token sits in a smooth background region whose direction is shared by
its neighbours. Evidence tokens get their own direction, but only in the
sample's ``informative`` layers; elsewhere they look like background. Half
of the evidence also draws strong attention from the reference rows, the
other half is only recoverable through the coverage stage.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .core import LayerStack, TokenMatrix
from .fusion import Projection
from .io import Dump
from .pruner import DEFAULT_STAGE_LAYERS
from .router import NUM_CATEGORIES
from .saliency import AttentionRecord

LLAVA_LAYERS = (3, 5, 12, 14, 15, 17, 18, 19, 20, 22)
# one informative layer group per calibration prototype
PROTOTYPES = ((5, 15, 22), (5, 22), (20, 22), (14, 17, 22), (3, 12, 18))
CLASS_PROMPTS = (
    "What is this object?",
    "What breed is the dog?",
    "Who wrote this book?",
    "Describe the image.",
    "What is to the left of the lamp?",
    "How many apples are on the table?",
    "What is the man doing?",
    "What is this tool used for?",
    "Is it sunny?",
)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_dump(
    rng: np.random.Generator,
    sample_id: str,
    *,
    grid: tuple[int, int] = (24, 24),
    layer_ids: Sequence[int] = LLAVA_LAYERS,
    d_v: int = 32,
    category: int | None = None,
    prompt: str = "",
    informative: Sequence[int] | None = None,
    n_evidence: int = 12,
    n_text: int = 8,
    stage_layers: Sequence[int] = DEFAULT_STAGE_LAYERS,
    proj_dim: int | None = None,
) -> Dump:
    h, w = grid
    m = h * w
    informative = set(informative if informative is not None else layer_ids[-2:])
    n_regions = 4
    region_dirs = _unit(rng.standard_normal((n_regions, d_v)))
    # 2x2 block layout of background regions
    rr, cc = np.divmod(np.arange(m), w)
    region = (rr * 2 // h) * 2 + (cc * 2 // w)
    evidence = np.sort(rng.choice(m, size=min(n_evidence, m), replace=False))
    ev_dirs = _unit(rng.standard_normal((evidence.size, d_v)))
    layers = []
    for k, lid in enumerate(layer_ids):
        scale = 1.0 + 0.1 * k
        x = region_dirs[region] + 0.05 * rng.standard_normal((m, d_v))
        if lid in informative:
            x[evidence] = ev_dirs + 0.02 * rng.standard_normal((evidence.size, d_v))
        layers.append(TokenMatrix((scale * x).astype(np.float32), grid=grid))
    stack = LayerStack(tuple(layers), tuple(layer_ids))

    salient = evidence[: evidence.size // 2]
    distractors = rng.choice(np.setdiff1d(np.arange(m), evidence), size=max(1, m // 20), replace=False)
    n_prefix = 4
    cols = n_prefix + m + n_text
    rows = n_text + 2
    visual_cols = np.arange(n_prefix, n_prefix + m)
    records = {}
    for stage in stage_layers:
        logits = 0.5 * rng.standard_normal((rows, cols))
        logits[:, visual_cols[distractors]] += 3.0
        logits[:, visual_cols[salient]] += 2.5
        logits[:, :n_prefix] += 2.0
        A = np.exp(logits - logits.max(axis=1, keepdims=True))
        A /= A.sum(axis=1, keepdims=True)
        ref = np.arange(2, rows)
        records[stage] = AttentionRecord(A.astype(np.float32), ref, visual_cols, stage)
    projection = Projection()
    if proj_dim is not None:
        projection = Projection((rng.standard_normal((d_v, proj_dim)) / np.sqrt(d_v)).astype(np.float32))
    return Dump(sample_id, prompt, stack, records, projection, category, evidence)


def make_dataset(
    seed: int = 0,
    per_class: int = 2,
    classes: Sequence[int] = tuple(range(NUM_CATEGORIES)),
    **kwargs,
) -> list[Dump]:
    """``per_class`` dumps for each class; class ``c`` plants evidence in ``PROTOTYPES[c % 5]``."""
    rng = np.random.default_rng(seed)
    dumps = []
    for c in classes:
        for i in range(per_class):
            dumps.append(make_dump(
                rng, f"c{c}_s{i}", category=c, prompt=CLASS_PROMPTS[c],
                informative=PROTOTYPES[c % len(PROTOTYPES)], **kwargs,
            ))
    return dumps


def write_dataset(out: str | Path, dumps: Sequence[Dump]) -> list[Path]:
    out = Path(out)
    return [d.save(out / d.sample_id) for d in dumps]
