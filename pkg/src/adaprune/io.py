"""Token dumps (JSON manifest + raw little-endian float32 tensors) and result records.

Dump manifest (``manifest.json``)::

    {
      "format": "adaprune-dump/1",
      "sample_id": "s0", "prompt": "How many ...?", "category": 5,   # category optional
      "L": 3, "d_v": 64, "has_cls": false,
      "layers": [{"layer_id": 5, "tokens": 576, "grid": [24, 24], "d_v": 64, "file": "layer_05.f32"}],
      "attention": [{"stage_layer": 2, "rows": 600, "cols": 600,
                     "reference_rows": [...], "visual_cols": [...], "visual_tokens": [...],
                     "file": "attn_02.f32"}],
      "projection": {"d_v": 64, "d": 128, "file": "proj.f32"},       # optional
      "evidence": [3, 17, 40]                                          # optional
    }

Each tensor file is headerless row-major ``<f4``; a layer with ``has_cls`` set
stores the special row first (``tokens + 1`` rows).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .core import AdapruneError, LayerStack, TokenMatrix, validate_stack
from .fusion import IDENTITY, Projection
from .pruner import PruneTrace
from .saliency import AttentionRecord

DUMP_FORMAT = "adaprune-dump/1"
RESULT_FORMAT = "adaprune-result/1"
MANIFEST_NAME = "manifest.json"


class ManifestParse(AdapruneError):
    pass


class TensorSizeMismatch(AdapruneError):
    def __init__(self, file: str, expected: int, actual: int):
        super().__init__(f"{file}: expected {expected} bytes, found {actual}")
        self.file, self.expected, self.actual = file, expected, actual


class ShapeInconsistency(AdapruneError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def read_tensor(path: Path, rows: int, cols: int) -> np.ndarray:
    expected = rows * cols * 4
    try:
        actual = os.path.getsize(path)
    except FileNotFoundError:
        raise ShapeInconsistency(f"tensor file {path.name} is missing") from None
    if actual != expected:
        raise TensorSizeMismatch(path.name, expected, actual)
    return np.fromfile(path, dtype="<f4").astype(np.float32).reshape(rows, cols)


def write_tensor(path: Path, data: np.ndarray) -> None:
    np.ascontiguousarray(data, dtype="<f4").tofile(path)


@dataclass
class Dump:
    sample_id: str
    prompt: str
    stack: LayerStack
    records: dict[int, AttentionRecord]
    projection: Projection = IDENTITY
    category: int | None = None
    evidence: np.ndarray | None = None
    files: dict[str, str] = field(default_factory=dict)

    @property
    def num_tokens(self) -> int:
        return self.stack.layers[-1].rows

    def manifest(self) -> dict:
        layers = []
        for lid, layer in zip(self.stack.layer_ids, self.stack.layers):
            entry: dict[str, Any] = {
                "layer_id": lid,
                "tokens": layer.rows,
                "d_v": layer.cols,
                "file": self.files.get(f"layer:{lid}", f"layer_{lid:02d}.f32"),
            }
            if layer.grid is not None:
                entry["grid"] = list(layer.grid)
            layers.append(entry)
        attention = []
        for stage, rec in sorted(self.records.items()):
            attention.append({
                "stage_layer": stage,
                "rows": int(rec.A.shape[0]),
                "cols": int(rec.A.shape[1]),
                "reference_rows": rec.reference_rows.tolist(),
                "visual_cols": rec.visual_cols.tolist(),
                "visual_tokens": rec.visual_tokens.tolist(),
                "file": self.files.get(f"attn:{stage}", f"attn_{stage:02d}.f32"),
            })
        doc: dict[str, Any] = {
            "format": DUMP_FORMAT,
            "sample_id": self.sample_id,
            "prompt": self.prompt,
            "L": self.stack.num_layers,
            "d_v": self.stack.d_v,
            "has_cls": self.stack.has_cls,
            "layers": layers,
            "attention": attention,
        }
        if self.category is not None:
            doc["category"] = int(self.category)
        if not self.projection.is_identity:
            m = self.projection.matrix
            doc["projection"] = {"d_v": m.shape[0], "d": m.shape[1], "file": self.files.get("proj", "proj.f32")}
        if self.evidence is not None:
            doc["evidence"] = [int(i) for i in self.evidence]
        return doc

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        doc = self.manifest()
        for entry, layer in zip(doc["layers"], self.stack.layers):
            data = layer.data if layer.cls is None else np.vstack([layer.cls[None, :], layer.data])
            write_tensor(directory / entry["file"], data)
        for entry in doc["attention"]:
            write_tensor(directory / entry["file"], self.records[entry["stage_layer"]].A)
        if "projection" in doc:
            write_tensor(directory / doc["projection"]["file"], self.projection.matrix)
        path = directory / MANIFEST_NAME
        path.write_text(canonical_json(doc), encoding="utf-8")
        return path


def _manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def load_dump(path: str | Path) -> Dump:
    """Read and fully validate a dump directory (or its manifest file)."""
    mpath = _manifest_path(path)
    root = mpath.parent
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestParse(f"no manifest at {mpath}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestParse(f"{mpath}: {exc}") from None
    if not isinstance(doc, dict):
        raise ManifestParse("manifest must be a JSON object")
    files: dict[str, str] = {}
    try:
        has_cls = bool(doc.get("has_cls", False))
        d_v = int(doc["d_v"])
        layers, ids = [], []
        for e in doc["layers"]:
            lid = int(e["layer_id"])
            grid = tuple(int(g) for g in e["grid"]) if e.get("grid") is not None else None
            tokens = int(e["tokens"]) if "tokens" in e else grid[0] * grid[1]
            if grid is not None and grid[0] * grid[1] != tokens:
                raise ShapeInconsistency(f"layer {lid}: grid {grid} vs {tokens} tokens")
            if int(e.get("d_v", d_v)) != d_v:
                raise ShapeInconsistency(f"layer {lid}: d_v {e['d_v']} differs from {d_v}")
            data = read_tensor(root / e["file"], tokens + int(has_cls), d_v)
            cls = data[0] if has_cls else None
            layers.append(TokenMatrix(data[int(has_cls):], grid=grid, cls=cls))
            ids.append(lid)
            files[f"layer:{lid}"] = e["file"]
        if int(doc.get("L", len(layers))) != len(layers):
            raise ShapeInconsistency(f"manifest L={doc['L']} but {len(layers)} layer entries")
        stack = LayerStack(tuple(layers), tuple(ids), has_cls)
        problems = validate_stack(stack)
        if problems:
            raise ShapeInconsistency("; ".join(problems))
        records = {}
        for e in doc.get("attention", []):
            stage = int(e["stage_layer"])
            if stage in records:
                raise ShapeInconsistency(f"duplicate attention record for stage {stage}")
            A = read_tensor(root / e["file"], int(e["rows"]), int(e["cols"]))
            records[stage] = AttentionRecord(
                A, e["reference_rows"], e["visual_cols"], stage, e.get("visual_tokens"),
            )
            files[f"attn:{stage}"] = e["file"]
        projection = IDENTITY
        if doc.get("projection"):
            p = doc["projection"]
            if int(p["d_v"]) != d_v:
                raise ShapeInconsistency(f"projection d_v {p['d_v']} vs stack d_v {d_v}")
            projection = Projection(read_tensor(root / p["file"], int(p["d_v"]), int(p["d"])))
            files["proj"] = p["file"]
        evidence = np.asarray(doc["evidence"], dtype=np.int64) if doc.get("evidence") is not None else None
        category = int(doc["category"]) if doc.get("category") is not None else None
        return Dump(str(doc["sample_id"]), str(doc.get("prompt", "")), stack, records,
                    projection, category, evidence, files)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestParse(f"{mpath}: malformed entry ({exc!r})") from None


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def result_record(trace: PruneTrace, sample_id: str, config: dict, timestamp: bool = False) -> dict:
    stages = []
    for s in trace.stages:
        stages.append({
            "stage_layer": s.stage_layer,
            "budget": int(s.retained.size),
            "k1": s.split.k1,
            "k2": s.split.k2,
            "retained": s.retained.tolist(),
            "pivots": s.pivots.tolist(),
            "completion": s.completion.tolist(),
            "seeds": s.seeds.tolist(),
            "delta": s.delta,
            "j_trace": list(s.cluster.j_trace) if s.cluster is not None else [],
            "attn_reused": s.attn_reused,
            "flags": list(s.flags),
        })
    rec = {
        "format": RESULT_FORMAT,
        "sample_id": sample_id,
        "category": trace.category,
        "num_tokens": trace.num_tokens,
        "stages": stages,
        "final_retained": trace.retained.tolist(),
        "engine_version": __version__,
        "config_digest": config_digest(config),
        "config": config,
    }
    if timestamp:
        rec["metadata"] = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    return rec


def save_result(trace: PruneTrace, path: str | Path, sample_id: str, config: dict, timestamp: bool = False) -> dict:
    rec = result_record(trace, sample_id, config, timestamp)
    Path(path).write_text(canonical_json(rec), encoding="utf-8")
    return rec


def load_result(path: str | Path) -> dict:
    rec = json.loads(Path(path).read_text(encoding="utf-8"))
    if rec.get("format") != RESULT_FORMAT:
        raise ManifestParse(f"{path}: not a result record")
    return rec
