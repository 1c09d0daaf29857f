"""Per-nucleus geometry, morphology, and co-occurrence texture.

Morphology is computed from the pixel set alone (moments, boundary length,
convex hull of pixel corners).  Texture uses a single gray-level
co-occurrence matrix per nucleus, accumulated over several offsets and their
negations, restricted to pixel pairs that both lie inside the nucleus.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.measure import perimeter_crofton

MORPH_NAMES = ("area", "perimeter", "roundness", "eccentricity", "solidity",
               "orientation", "major_axis", "minor_axis")
TEXTURE_NAMES = ("dissimilarity", "homogeneity", "asm", "energy")
N_MORPH = len(MORPH_NAMES)
N_TEXTURE = len(TEXTURE_NAMES)
N_HANDCRAFTED = N_MORPH + N_TEXTURE

DEFAULT_LEVELS = 16
DEFAULT_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))


@dataclass
class NucleusRecord:
    """One segmented nucleus.  ``pixels`` holds (row, col) pairs."""

    id: int
    pixels: np.ndarray
    morph: np.ndarray | None = None
    texture: np.ndarray | None = None
    cpc: np.ndarray | None = None

    @property
    def centroid(self) -> tuple[float, float]:
        """(x, y) = (mean column, mean row)."""
        r, c = self.pixels.mean(axis=0)
        return float(c), float(r)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(min_row, min_col, max_row + 1, max_col + 1)."""
        lo = self.pixels.min(axis=0)
        hi = self.pixels.max(axis=0) + 1
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])

    @property
    def area(self) -> int:
        return len(self.pixels)


@dataclass
class GlcmMatrix:
    p: np.ndarray
    offsets: tuple = DEFAULT_OFFSETS
    symmetric: bool = True
    counts: np.ndarray | None = field(default=None, repr=False)

    @property
    def zero_pairs(self) -> bool:
        return self.counts is not None and self.counts.sum() == 0


# ---------------------------------------------------------------- instances

_EIGHT = np.ones((3, 3), dtype=bool)


def label_components(binary: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labelling."""
    labels, n = ndimage.label(np.asarray(binary) > 0, structure=_EIGHT)
    return labels, int(n)


def extract_instances(mask: np.ndarray) -> list[NucleusRecord]:
    """Records for every instance in a label image.

    A mask whose only values are {0, 255} (8-bit) is treated as binary and
    labelled by 8-connectivity; otherwise nonzero values are instance ids.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {mask.shape}")
    values = np.unique(mask)
    if mask.dtype == np.uint8 and set(values.tolist()) <= {0, 255}:
        mask, _ = label_components(mask)
    if not mask.any():
        return []
    flat = mask.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_ids = flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    ends = np.r_[starts[1:], len(flat)]
    width = mask.shape[1]
    out = []
    for s, e in zip(starts, ends):
        label = int(sorted_ids[s])
        if label == 0:
            continue
        idx = order[s:e]
        pix = np.stack([idx // width, idx % width], axis=1).astype(np.int64)
        out.append(NucleusRecord(label, pix))
    return out


# ---------------------------------------------------------------- morphology

def _local_mask(pixels: np.ndarray, pad: int = 1) -> np.ndarray:
    lo = pixels.min(axis=0)
    shape = pixels.max(axis=0) - lo + 1 + 2 * pad
    m = np.zeros(shape, dtype=bool)
    m[pixels[:, 0] - lo[0] + pad, pixels[:, 1] - lo[1] + pad] = True
    return m


def boundary_transitions(pixels: np.ndarray) -> int:
    """Number of 4-neighbour pixel edges between the set and its complement."""
    m = _local_mask(pixels)
    return int(np.count_nonzero(m[1:, :] != m[:-1, :]) + np.count_nonzero(m[:, 1:] != m[:, :-1]))


def perimeter_length(pixels: np.ndarray) -> float:
    """Boundary length by the Crofton formula over four line directions."""
    return float(perimeter_crofton(_local_mask(pixels), directions=4))


def _hull_area(pixels: np.ndarray) -> float:
    """Area of the convex hull of the pixel squares (exact, integer corners).

    Only the outer corners of the leftmost and rightmost pixel of each row can
    be hull vertices; Andrew's monotone chain then runs on those few points.
    """
    r, c = pixels[:, 0], pixels[:, 1]
    order = np.lexsort((c, r))
    r, c = r[order], c[order]
    step = r[1:] != r[:-1]
    rows, lo, hi = r[np.r_[True, step]], c[np.r_[True, step]], c[np.r_[step, True]] + 1
    pts = sorted(set(zip(np.concatenate([rows, rows + 1, rows, rows + 1]).tolist(),
                         np.concatenate([lo, lo, hi, hi]).tolist())))
    chain = []
    for seq in (pts, pts[::-1]):
        half: list = []
        for p in seq:
            # pop while the last turn is not strictly counter-clockwise
            while len(half) >= 2 and ((half[-1][0] - half[-2][0]) * (p[1] - half[-2][1])
                                      - (half[-1][1] - half[-2][1]) * (p[0] - half[-2][0])) <= 0:
                half.pop()
            half.append(p)
        chain += half[:-1]
    twice = sum(chain[i - 1][0] * chain[i][1] - chain[i][0] * chain[i - 1][1] for i in range(len(chain)))
    return abs(twice) / 2.0


def central_moments(pixels: np.ndarray) -> tuple[float, float, float]:
    """(mu20, mu11, mu02) with x = column and y = row."""
    y = pixels[:, 0].astype(np.float64)
    x = pixels[:, 1].astype(np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    return float(dx @ dx), float(dx @ dy), float(dy @ dy)


def morphology(rec: NucleusRecord | np.ndarray) -> np.ndarray:
    """Eight shape descriptors in the fixed order of ``MORPH_NAMES``."""
    pixels = rec.pixels if isinstance(rec, NucleusRecord) else np.asarray(rec)
    if len(pixels) == 0:
        raise ValueError("empty pixel set")
    area = float(len(pixels))
    perim = perimeter_length(pixels)
    roundness = 4.0 * math.pi * area / perim ** 2 if perim > 0 else 1.0
    mu20, mu11, mu02 = central_moments(pixels)
    half_tr = 0.5 * (mu20 + mu02)
    disc = math.sqrt(max(0.25 * (mu20 - mu02) ** 2 + mu11 * mu11, 0.0))
    lam1, lam2 = half_tr + disc, max(half_tr - disc, 0.0)
    if lam1 <= 0:
        ecc, orient = 0.0, 0.0
    else:
        ecc = math.sqrt(max(0.0, 1.0 - lam2 / lam1))
        orient = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
        if orient <= -math.pi / 2:
            orient += math.pi
    solidity = 1.0 if area == 1 else min(1.0, area / _hull_area(pixels))
    major = 4.0 * math.sqrt(lam1 / area)
    minor = 4.0 * math.sqrt(lam2 / area)
    return np.array([area, perim, roundness, ecc, solidity, orient, major, minor])


# ---------------------------------------------------------------- texture

def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma, rounded and clamped to uint8."""
    rgb = np.asarray(rgb)
    if rgb.ndim == 2:
        return rgb.astype(np.uint8)
    rgb = rgb[..., :3].astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def quantize(gray: np.ndarray, levels: int) -> np.ndarray:
    return (np.asarray(gray, dtype=np.int64) * levels) // 256


def glcm_counts(gray: np.ndarray, rec: NucleusRecord, levels: int = DEFAULT_LEVELS,
                offsets=DEFAULT_OFFSETS) -> np.ndarray:
    """Integer co-occurrence counts over in-nucleus pixel pairs, both directions."""
    if levels < 2:
        raise ValueError("levels must be >= 2")
    if len(offsets) == 0:
        raise ValueError("at least one offset is required")
    r0, c0, r1, c1 = rec.bbox
    q = quantize(np.asarray(gray)[r0:r1, c0:c1], levels)
    inside = np.zeros(q.shape, dtype=bool)
    inside[rec.pixels[:, 0] - r0, rec.pixels[:, 1] - c0] = True
    h, w = q.shape
    counts = np.zeros((levels, levels), dtype=np.int64)
    for dr, dc in offsets:
        # pairs (p, p + offset) for p and p + offset both inside
        ra, rb = max(0, -dr), min(h, h - dr)
        ca, cb = max(0, -dc), min(w, w - dc)
        if ra >= rb or ca >= cb:
            continue
        a_in = inside[ra:rb, ca:cb]
        b_in = inside[ra + dr:rb + dr, ca + dc:cb + dc]
        both = a_in & b_in
        i = q[ra:rb, ca:cb][both]
        j = q[ra + dr:rb + dr, ca + dc:cb + dc][both]
        np.add.at(counts, (i, j), 1)
        np.add.at(counts, (j, i), 1)
    return counts


def glcm(gray: np.ndarray, rec: NucleusRecord, levels: int = DEFAULT_LEVELS,
         offsets=DEFAULT_OFFSETS) -> GlcmMatrix:
    counts = glcm_counts(gray, rec, levels, offsets)
    total = counts.sum()
    p = counts / total if total else np.zeros(counts.shape)
    return GlcmMatrix(p, tuple(tuple(o) for o in offsets), True, counts)


def glcm_features(m: GlcmMatrix | np.ndarray) -> np.ndarray:
    """(dissimilarity, homogeneity, ASM, energy)."""
    if isinstance(m, GlcmMatrix):
        if m.zero_pairs:
            return np.array([0.0, 1.0, 1.0, 1.0])
        p = m.p
    else:
        p = np.asarray(m, dtype=np.float64)
    if p.sum() == 0:
        return np.array([0.0, 1.0, 1.0, 1.0])
    i, j = np.indices(p.shape)
    diff = np.abs(i - j)
    asm = float((p * p).sum())
    return np.array([float((p * diff).sum()), float((p / (1.0 + diff * diff)).sum()),
                     asm, math.sqrt(asm)])


# ---------------------------------------------------------------- assembly

def assemble_node_features(morph, texture, cpc=None, cpc_dim: int | None = None) -> np.ndarray:
    """Concatenate morph (8) | texture (4) | cpc (D) into one row."""
    morph = np.asarray(morph, dtype=np.float64).reshape(-1)
    texture = np.asarray(texture, dtype=np.float64).reshape(-1)
    cpc = np.zeros(0) if cpc is None else np.asarray(cpc, dtype=np.float64).reshape(-1)
    if morph.size != N_MORPH or texture.size != N_TEXTURE:
        raise ValueError(f"expected {N_MORPH} morph and {N_TEXTURE} texture values, "
                         f"got {morph.size} and {texture.size}")
    if cpc_dim is not None and cpc.size != cpc_dim:
        raise ValueError(f"CPC feature width {cpc.size} does not match configured {cpc_dim}")
    return np.concatenate([morph, texture, cpc])


@dataclass
class FeatureScaler:
    """Per-dimension z-score fitted on training rows only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "FeatureScaler":
        rows = np.asarray(rows, dtype=np.float64)
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        return cls(mean, std)

    def transform(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[-1] != self.mean.size:
            raise ValueError(f"feature width {rows.shape[-1]} != scaler width {self.mean.size}")
        safe = np.where(self.std > 0, self.std, 1.0)
        out = (rows - self.mean) / safe
        out[..., self.std == 0] = 0.0
        return out

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def handcrafted_features(gray: np.ndarray, records: list[NucleusRecord],
                         levels: int = DEFAULT_LEVELS, offsets=DEFAULT_OFFSETS) -> np.ndarray:
    """(N, 12) morph|texture matrix; fills ``rec.morph``/``rec.texture`` too."""
    rows = np.zeros((len(records), N_HANDCRAFTED))
    for i, rec in enumerate(records):
        rec.morph = morphology(rec)
        rec.texture = glcm_features(glcm(gray, rec, levels, offsets))
        rows[i, :N_MORPH] = rec.morph
        rows[i, N_MORPH:] = rec.texture
    return rows


def write_feature_csv(path, records: list[NucleusRecord]) -> None:
    header = ["id"] + [f"morph{i + 1}" for i in range(N_MORPH)] + [f"tex{i + 1}" for i in range(N_TEXTURE)]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for rec in records:
            w.writerow([rec.id] + [format(v, ".17g") for v in np.r_[rec.morph, rec.texture]])
