"""Open-set semantic annotation: region masks, compact codes, target rasters,
code-based grouping of Gaussians, and annotation providers.

Segmentation and embedding models are not run here.  ``SyntheticProvider``
derives regions from simulator instance ids; ``FileProvider`` ingests masks
and 512-d embeddings computed offline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .gaussians import GaussianMap

EMBED_DIM = 512


class SemanticsError(ValueError):
    pass


@dataclass
class SegmentMask:
    region_id: int
    bitmap: np.ndarray
    view: int = 0

    def __post_init__(self) -> None:
        self.bitmap = np.asarray(self.bitmap, dtype=bool)
        if self.bitmap.ndim != 2:
            raise SemanticsError("mask bitmap must be 2-D")
        if not self.bitmap.any():
            raise SemanticsError(f"mask for region {self.region_id} is empty")
        if self.region_id <= 0:
            raise SemanticsError("region ids must be positive (0 means unlabeled)")


@dataclass
class SemanticFrameAnnotation:
    regions: list[tuple[SegmentMask, float]]
    target: np.ndarray      # (H, W) compact code per pixel, 0 where unlabeled
    region_ids: np.ndarray  # (H, W) int, 0 = unlabeled

    @property
    def labeled(self) -> np.ndarray:
        return self.region_ids > 0


def compact_embedding(e) -> float:
    """Average-pool a region embedding to a single scalar code."""
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(e)):
        raise SemanticsError("embedding contains non-finite values")
    return float(e.mean())


def build_target_raster(masks_with_codes, height: int, width: int, overlap_policy: str = "smallest"):
    """Rasterise ``[(SegmentMask, code), ...]`` into (target, region-id) rasters.

    Overlaps: ``"smallest"`` (smallest-area mask wins; ties -> lower region id),
    ``"first"`` (earlier entries win) or ``"last"``.
    """
    target = np.zeros((height, width))
    ids = np.zeros((height, width), dtype=np.int64)
    items = list(masks_with_codes)
    for m, _ in items:
        if m.bitmap.shape != (height, width):
            raise SemanticsError(f"mask {m.region_id} has shape {m.bitmap.shape}, expected {(height, width)}")
    if overlap_policy == "smallest":
        order = sorted(range(len(items)), key=lambda i: (-int(items[i][0].bitmap.sum()), -items[i][0].region_id))
    elif overlap_policy == "first":
        order = list(range(len(items)))[::-1]
    elif overlap_policy == "last":
        order = list(range(len(items)))
    else:
        raise SemanticsError(f"unknown overlap policy {overlap_policy!r}")
    # paint in increasing priority so the winner is written last
    for i in order:
        m, code = items[i]
        target[m.bitmap] = code
        ids[m.bitmap] = m.region_id
    return target, ids


def codebook(n: int) -> np.ndarray:
    """Uniform codes (i + 0.5) / n for ``n`` instances."""
    if n < 1:
        raise SemanticsError("codebook needs at least one entry")
    return (np.arange(n) + 0.5) / n


def default_tolerance(n: int) -> float:
    return 0.25 / n


@dataclass
class Grouping:
    groups: list[np.ndarray]   # one index array per codebook entry
    unassigned: np.ndarray
    assignment: np.ndarray     # per Gaussian: codebook index or -1


def group_by_code(gmap: GaussianMap, codes, tol: float | None = None) -> Grouping:
    """Assign each Gaussian to the nearest code within ``tol``; the rest are unassigned."""
    codes = np.asarray(codes, dtype=np.float64).reshape(-1)
    if codes.size == 0:
        raise SemanticsError("codebook is empty")
    if tol is None:
        tol = default_tolerance(len(codes))
    if codes.size > 1:
        gaps = np.diff(np.sort(codes))
        if gaps.min() <= 2 * tol:
            raise SemanticsError(f"codebook spacing {gaps.min():.4g} is not > 2*tol = {2 * tol:.4g}")
    sem = np.asarray(gmap.semantic, dtype=np.float64)
    if sem.size == 0:
        return Grouping([np.zeros(0, dtype=np.int64) for _ in codes], np.zeros(0, dtype=np.int64),
                        np.zeros(0, dtype=np.int64))
    d = np.abs(sem[:, None] - codes[None, :])
    near = np.argmin(d, axis=1)
    ok = d[np.arange(len(sem)), near] <= tol
    assign = np.where(ok, near, -1)
    groups = [np.flatnonzero(assign == k) for k in range(len(codes))]
    return Grouping(groups, np.flatnonzero(assign < 0), assign)


# ----------------------------------------------------------------------------- providers

class SemanticProvider(Protocol):
    def annotate(self, rgb: np.ndarray, view: int = 0,
                 instance_ids: np.ndarray | None = None) -> SemanticFrameAnnotation:
        ...


@dataclass
class SyntheticProvider:
    """Regions from a ground-truth instance raster; instance ``i`` (1-based)
    of ``n`` gets code ``(i - 0.5) / n``, i.e. codebook entry ``i - 1``."""

    n_instances: int
    codes: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.codes = codebook(self.n_instances)

    def code_of(self, instance_id: int) -> float:
        return float(self.codes[instance_id - 1])

    def annotate(self, rgb, view: int = 0, instance_ids=None) -> SemanticFrameAnnotation:
        if instance_ids is None:
            raise SemanticsError("SyntheticProvider needs a ground-truth instance raster")
        inst = np.asarray(instance_ids, dtype=np.int64)
        regions = []
        for iid in np.unique(inst):
            if iid <= 0 or iid > self.n_instances:
                continue
            regions.append((SegmentMask(int(iid), inst == iid, view), self.code_of(int(iid))))
        target, ids = build_target_raster(regions, *inst.shape)
        return SemanticFrameAnnotation(regions, target, ids)


# RLE: row-major runs, alternating starting with a run of zeros.

def rle_encode(bitmap: np.ndarray) -> dict:
    b = np.asarray(bitmap, dtype=bool).reshape(-1)
    change = np.flatnonzero(np.diff(b.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [b.size]])
    runs = np.diff(bounds).tolist()
    if b.size and b[0]:
        runs = [0] + runs
    return {"size": list(np.asarray(bitmap).shape), "counts": [int(r) for r in runs]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise SemanticsError(f"RLE counts sum to {counts.sum()}, expected {h * w}")
    vals = np.arange(len(counts)) % 2 == 1
    return np.repeat(vals, counts).reshape(h, w)


def read_embedding(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != EMBED_DIM * 4:
        raise SemanticsError(f"{path}: expected {EMBED_DIM * 4} bytes of f32, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def write_embedding(path, e) -> None:
    e = np.asarray(e, dtype="<f4").reshape(-1)
    if e.size != EMBED_DIM:
        raise SemanticsError(f"embedding must have {EMBED_DIM} components")
    Path(path).write_bytes(e.tobytes())


class FileProvider:
    """Annotations loaded from a JSON document::

        {"views": [{"view_k": 0,
                    "regions": [{"region_id": 1, "rle_mask": {...}, "code": 0.3},
                                {"region_id": 2, "rle_mask": {...}, "embedding_path": "r2.f32"}]}]}

    Relative embedding paths resolve against the annotation file's directory.
    """

    def __init__(self, path, overlap_policy: str = "smallest"):
        self.path = Path(path)
        doc = json.loads(self.path.read_text())
        self.overlap_policy = overlap_policy
        self.views: dict[int, list[tuple[SegmentMask, float]]] = {}
        for view in doc.get("views", []):
            k = int(view["view_k"])
            regions = []
            for r in view.get("regions", []):
                mask = SegmentMask(int(r["region_id"]), rle_decode(r["rle_mask"]), k)
                if "code" in r:
                    code = float(r["code"])
                elif "embedding_path" in r:
                    code = compact_embedding(read_embedding(self.path.parent / r["embedding_path"]))
                else:
                    raise SemanticsError(f"region {r['region_id']} in view {k} has neither code nor embedding")
                regions.append((mask, code))
            self.views[k] = regions

    def annotate(self, rgb, view: int = 0, instance_ids=None) -> SemanticFrameAnnotation:
        h, w = np.asarray(rgb).shape[:2]
        regions = self.views.get(view, [])
        target, ids = build_target_raster(regions, h, w, self.overlap_policy)
        return SemanticFrameAnnotation(regions, target, ids)


def write_annotation_file(path, views: dict[int, list[tuple[SegmentMask, float]]]) -> None:
    doc = {"views": [{"view_k": k, "regions": [{"region_id": m.region_id, "rle_mask": rle_encode(m.bitmap),
                                                 "code": float(c)} for m, c in regs]}
                     for k, regs in sorted(views.items())]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
