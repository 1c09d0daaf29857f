"""Sample labelling, crop augmentation, fold assignment, synthetic tissue, graph I/O."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .gnn import HIGH_RISK, LOW_RISK, CellGraph
from .graph import EdgeList
from .serialization import FORMAT_VERSION, FormatError, read_json, write_json

HIGH_RISK_SCORE = 6
REFERENCE_CROP = 1550
GROUP_SEP = "#"


# ---------------------------------------------------------------- labels

@dataclass(frozen=True)
class GradeLabel:
    primary: int
    secondary: int
    score: int
    label: int


def label_from_mask(mask: np.ndarray) -> GradeLabel:
    """Primary/secondary grade by pixel area; high risk iff their sum >= 6.

    Area ties go to the higher grade.  A mask without graded pixels is benign
    (score 0, low risk).
    """
    m = np.asarray(mask)
    if m.size and m.max() > 5:
        raise ValueError(f"grade mask values must be <= 5, found {int(m.max())}")
    areas = np.bincount(m.ravel().astype(np.int64), minlength=6)[1:6]
    present = [g for g in range(1, 6) if areas[g - 1] > 0]
    if not present:
        return GradeLabel(0, 0, 0, LOW_RISK)
    ranked = sorted(present, key=lambda g: (-areas[g - 1], -g))
    primary = ranked[0]
    secondary = ranked[1] if len(ranked) > 1 else primary
    score = primary + secondary
    return GradeLabel(primary, secondary, score, HIGH_RISK if score >= HIGH_RISK_SCORE else LOW_RISK)


# ---------------------------------------------------------------- crops

@dataclass
class Crop:
    name: str
    origin: tuple[int, int]
    image: np.ndarray
    instances: np.ndarray
    grades: np.ndarray | None
    grade_label: GradeLabel | None


def crop_origins(h: int, w: int, size: int) -> list[tuple[str, tuple[int, int]]]:
    """Four corners then the centre; identical windows are listed once."""
    if h < size or w < size:
        return [("full", (0, 0))]
    cands = [("tl", (0, 0)), ("tr", (0, w - size)), ("bl", (h - size, 0)),
             ("br", (h - size, w - size)), ("c", ((h - size) // 2, (w - size) // 2))]
    seen, out = set(), []
    for name, origin in cands:
        if origin not in seen:
            seen.add(origin)
            out.append((name, origin))
    return out


def crop_augment(image: np.ndarray, instances: np.ndarray, grades: np.ndarray | None = None,
                 size: int = REFERENCE_CROP, tissue_fraction: float = 0.01) -> list[Crop]:
    """Corner and centre crops that contain tissue (nucleus pixels >= ``tissue_fraction``)."""
    h, w = instances.shape
    out = []
    for name, (r, c) in crop_origins(h, w, size):
        rs, cs = slice(r, r + min(size, h)), slice(c, c + min(size, w))
        inst = instances[rs, cs]
        if np.count_nonzero(inst) < tissue_fraction * inst.size:
            continue
        gr = None if grades is None else grades[rs, cs]
        out.append(Crop(name, (r, c), image[rs, cs], inst, gr,
                        None if gr is None else label_from_mask(gr)))
    return out


# ---------------------------------------------------------------- folds

@dataclass
class FoldSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def make_folds(labels, groups=None, folds: int = 5, seed: int = 0, val_fraction: float = 0.1,
               group_split: bool = True) -> tuple[np.ndarray, list[FoldSplit]]:
    """Class-balanced k-fold assignment.

    Returns the test fold of every sample and, per fold, index arrays for
    train / validation / test.  With ``group_split`` all samples sharing a
    group id land in the same partition of every fold.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if groups is None or not group_split:
        groups = np.arange(n)
    groups = np.asarray(groups)
    for cls in np.unique(labels):
        if np.count_nonzero(labels == cls) < folds:
            raise ValueError(f"class {int(cls)} has fewer than {folds} samples")
    rng = np.random.default_rng(seed)
    uniq, inv = np.unique(groups, return_inverse=True)
    members = [np.flatnonzero(inv == g) for g in range(len(uniq))]
    # a group's class is its majority label (ties -> high risk)
    glabel = np.array([int(labels[m].mean() >= 0.5) for m in members])
    assign = np.full(len(uniq), -1)
    for cls in (LOW_RISK, HIGH_RISK):
        gs = np.flatnonzero(glabel == cls)
        gs = gs[rng.permutation(len(gs))]
        gs = sorted(gs, key=lambda g: -len(members[g]))  # stable: shuffled order within size
        load = np.zeros(folds, dtype=np.int64)
        for g in gs:
            f = int(np.argmin(load))
            assign[g] = f
            load[f] += len(members[g])
    fold_of = assign[inv]
    splits = []
    for f in range(folds):
        test_g = np.flatnonzero(assign == f)
        rest = np.flatnonzero(assign != f)
        val_g = []
        for cls in (LOW_RISK, HIGH_RISK):
            cg = rest[glabel[rest] == cls]
            cg = cg[rng.permutation(len(cg))]
            val_g.extend(cg[:int(round(val_fraction * len(cg)))].tolist())
        val_g = np.array(sorted(val_g), dtype=np.int64)
        train_g = np.setdiff1d(rest, val_g)
        splits.append(FoldSplit(*(np.flatnonzero(np.isin(inv, part)) for part in (train_g, val_g, test_g))))
    return fold_of, splits


def train_val_split(labels, groups=None, val_fraction: float = 0.1, seed: int = 0,
                    group_split: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Hold out about ``val_fraction`` of each class as validation, whole groups at a time."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if groups is None or not group_split:
        groups = np.arange(n)
    uniq, inv = np.unique(np.asarray(groups), return_inverse=True)
    glabel = np.array([int(labels[inv == g].mean() >= 0.5) for g in range(len(uniq))])
    rng = np.random.default_rng(seed)
    val_g = []
    for cls in (LOW_RISK, HIGH_RISK):
        cg = np.flatnonzero(glabel == cls)
        cg = cg[rng.permutation(len(cg))]
        val_g.extend(cg[:int(round(val_fraction * len(cg)))].tolist())
    is_val = np.isin(inv, val_g)
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def group_of(source_id: str) -> str:
    return source_id.split(GROUP_SEP, 1)[0]


# ---------------------------------------------------------------- synthetic tissue

@dataclass
class SynthSample:
    image: np.ndarray  # (side, side, 3) uint8
    instances: np.ndarray  # (side, side) uint16
    grades: np.ndarray  # (side, side) uint8
    label: int
    centers: list[tuple[float, float]] = field(default_factory=list)  # placement log (x, y)


def _ellipse_pixels(cx, cy, a, b, theta, side):
    ext = int(math.ceil(a)) + 1
    r0, r1 = max(0, int(cy) - ext), min(side, int(cy) + ext + 2)
    c0, c1 = max(0, int(cx) - ext), min(side, int(cx) + ext + 2)
    if r0 >= r1 or c0 >= c1:
        return None
    rr, cc = np.ogrid[r0:r1, c0:c1]
    dx, dy = cc - cx, rr - cy
    ct, st = math.cos(theta), math.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    inside = u * u + v * v <= 1.0
    r_idx, c_idx = np.nonzero(inside)
    if len(r_idx) == 0:
        return None
    return r_idx + r0, c_idx + c0


class _Canvas:
    def __init__(self, side: int):
        self.side = side
        self.instances = np.zeros((side, side), dtype=np.uint16)
        self.guard = np.zeros((side, side), dtype=bool)  # nuclei dilated by one pixel
        self.centers: list[tuple[float, float]] = []

    def place(self, cx, cy, a, b, theta) -> bool:
        cx, cy, a, b, theta = float(cx), float(cy), float(a), float(b), float(theta)
        ci, cj = int(round(cy)), int(round(cx))
        if 0 <= ci < self.side and 0 <= cj < self.side and self.guard[ci, cj]:
            return False
        # cheap rejection: probe a few pixels that lie inside the ellipse
        ct, st = math.cos(theta), math.sin(theta)
        for s, t in ((0.7, 0.0), (-0.7, 0.0), (0.0, 0.7), (0.0, -0.7)):
            pi = int(round(cy + s * a * st + t * b * ct))
            pj = int(round(cx + s * a * ct - t * b * st))
            if not (0 <= pi < self.side and 0 <= pj < self.side) or not self.guard[pi, pj]:
                continue
            du, dv = pj - cx, pi - cy
            u, v = (du * ct + dv * st) / a, (-du * st + dv * ct) / b
            if u * u + v * v <= 1.0:
                return False
        pix = _ellipse_pixels(cx, cy, a, b, theta, self.side)
        if pix is None:
            return False
        rr, cc = pix
        if self.guard[rr, cc].any():
            return False
        label = len(self.centers) + 1
        self.instances[rr, cc] = label
        r0, r1 = max(rr.min() - 1, 0), rr.max() + 2
        c0, c1 = max(cc.min() - 1, 0), cc.max() + 2
        local = self.instances[r0:r1, c0:c1] == label
        self.guard[r0:r1, c0:c1] |= ndimage.binary_dilation(local, structure=np.ones((3, 3), bool))
        self.centers.append((float(cx), float(cy)))
        return True


def _noise(rng, side, sigma, amp):
    n = rng.standard_normal((side, side))
    if sigma > 0:
        n = ndimage.gaussian_filter(n, sigma)
    n /= n.std() + 1e-12
    return amp * n


def synth_low_risk(rng: np.random.Generator, side: int) -> SynthSample:
    """Gland mimics: round nuclei spaced along rings with empty lumens."""
    canvas = _Canvas(side)
    grades = np.zeros((side, side), dtype=np.uint8)
    lumen = np.zeros((side, side), dtype=bool)
    rings: list[tuple[float, float, float]] = []
    yy, xx = np.mgrid[0:side, 0:side]
    for _ in range(60):
        if len(rings) >= 7:
            break
        rad = rng.uniform(40, 80)
        cx, cy = rng.uniform(rad * 0.6, side - rad * 0.6, size=2)
        if any(math.hypot(cx - x, cy - y) < rad + r + 16 for x, y, r in rings):
            continue
        rings.append((cx, cy, rad))
    for i, (cx, cy, rad) in enumerate(rings):
        d = np.hypot(xx - cx, yy - cy)
        grades[(d <= rad + 12) & (d >= rad - 12)] = 2 if i % 2 == 0 else 3
        lumen |= d < rad - 12
        count = int(2 * math.pi * rad / rng.uniform(22, 26))
        phase = rng.uniform(0, 2 * math.pi)
        for j in range(count):
            ang = phase + 2 * math.pi * j / count + rng.normal(0, 0.03)
            rr = rad + rng.normal(0, 1.5)
            r = rng.uniform(4, 7)
            canvas.place(cx + rr * math.cos(ang), cy + rr * math.sin(ang),
                         r * rng.uniform(1.0, 1.05), r, rng.uniform(0, math.pi))
    # sparse stromal nuclei between glands
    for _ in range(int(rng.integers(5, 12))):
        cx, cy = rng.uniform(8, side - 8, size=2)
        if lumen[int(cy), int(cx)]:
            continue
        r = rng.uniform(4, 6)
        canvas.place(cx, cy, r * rng.uniform(1.0, 1.05), r, rng.uniform(0, math.pi))
    bg = np.array([236.0, 196.0, 214.0])
    tex = _noise(rng, side, 4.0, 8.0)
    img = bg[None, None, :] + tex[..., None]
    img[lumen] = [248.0, 242.0, 246.0]
    nuc = canvas.instances > 0
    chrom = _noise(rng, side, 1.5, 6.0)
    img[nuc] = np.array([96.0, 64.0, 150.0]) + chrom[nuc][:, None]
    return SynthSample(np.clip(img + 0.5, 0, 255).astype(np.uint8), canvas.instances, grades,
                       LOW_RISK, canvas.centers)


def synth_high_risk(rng: np.random.Generator, side: int) -> SynthSample:
    """Dense irregular clusters of elongated, heterogeneous nuclei."""
    canvas = _Canvas(side)
    grades = np.zeros((side, side), dtype=np.uint8)
    region = np.zeros((side, side), dtype=bool)
    yy, xx = np.mgrid[0:side, 0:side]
    for _ in range(int(rng.integers(2, 4))):
        bx, by = rng.uniform(0.2 * side, 0.8 * side, size=2)
        for _ in range(int(rng.integers(2, 5))):
            ox, oy = rng.normal(0, 35, size=2)
            rad = rng.uniform(45, 90)
            region |= np.hypot(xx - bx - ox, yy - by - oy) <= rad
    grades[region] = 4
    core = region & (ndimage.distance_transform_edt(region) > 25)
    grades[core] = 5
    cand = np.argwhere(region)
    target = int(region.sum() / 80)
    tries = min(len(cand), target * 8)
    pick = cand[rng.permutation(len(cand))[:tries]] + rng.uniform(-0.5, 0.5, size=(tries, 2))
    minor = rng.uniform(2.0, 2.8, size=tries)
    major = minor * rng.uniform(2.0, 3.5, size=tries)
    theta = rng.uniform(0, math.pi, size=tries)
    for (cy, cx), a, b, th in zip(pick, major, minor, theta):
        if len(canvas.centers) >= target:
            break
        canvas.place(cx, cy, a, b, th)
    bg = np.array([226.0, 178.0, 204.0])
    tex = _noise(rng, side, 0.8, 18.0)
    img = bg[None, None, :] + tex[..., None]
    nuc = canvas.instances > 0
    chrom = _noise(rng, side, 0.0, 38.0)
    img[nuc] = np.array([78.0, 44.0, 128.0]) + chrom[nuc][:, None]
    return SynthSample(np.clip(img + 0.5, 0, 255).astype(np.uint8), canvas.instances, grades,
                       HIGH_RISK, canvas.centers)


def synth_sample(index: int, seed: int = 0, side: int = 512) -> SynthSample:
    """Sample ``index`` of a cohort: even indices are low risk, odd high risk."""
    if side < 256:
        raise ValueError("synthetic images need side >= 256")
    i, cls = divmod(index, 2)
    fn = synth_low_risk if cls == LOW_RISK else synth_high_risk
    return fn(np.random.default_rng([seed, i, cls]), side)


def synth_generate(n_per_class: int, seed: int = 0, side: int = 512) -> list[SynthSample]:
    """Alternating low/high-risk samples; sample i uses its own seeded stream."""
    return [synth_sample(k, seed, side) for k in range(2 * n_per_class)]


# ---------------------------------------------------------------- image files

def write_png(path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # light compression: several times faster to write, pixels are identical
    Image.fromarray(np.ascontiguousarray(array)).save(path, compress_level=1)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.dtype == np.int32:
        arr = arr.astype(np.uint16)
    return arr


# ---------------------------------------------------------------- manifest

MANIFEST_FIELDS = ("source_id", "image", "instance_mask", "grade_mask", "label", "fold")


@dataclass
class ManifestRow:
    source_id: str
    image: str
    instance_mask: str
    grade_mask: str = ""
    label: int | None = None
    fold: int | None = None


def write_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.source_id, r.image, r.instance_mask, r.grade_mask,
                        "" if r.label is None else r.label, "" if r.fold is None else r.fold])


def read_manifest(path, root=None, check_paths: bool = True) -> list[ManifestRow]:
    """Rows of a manifest CSV; relative paths resolve against ``root``."""
    path = Path(path)
    root = path.parent if root is None else Path(root)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise FormatError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
        for rec in reader:
            row = ManifestRow(rec["source_id"], rec["image"], rec["instance_mask"], rec["grade_mask"],
                              int(rec["label"]) if rec["label"] != "" else None,
                              int(rec["fold"]) if rec["fold"] != "" else None)
            if check_paths:
                for p in (row.image, row.instance_mask, row.grade_mask):
                    if p and not (root / p).exists():
                        raise FileNotFoundError(f"{root / p} (listed for {row.source_id}) does not exist")
            rows.append(row)
    return rows


# ---------------------------------------------------------------- graphs

class GraphFormatError(FormatError):
    pass


def graph_to_doc(g: CellGraph) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "source_id": g.source_id,
        "label": g.label,
        "f_dim": g.f_dim,
        "nodes": [{"id": int(i), "x": float(x), "y": float(y), "feat": row.tolist()}
                  for i, (x, y), row in zip(g.node_ids, g.positions, g.features)],
        "edges": g.edges.pairs.tolist(),
    }


def save_graph(g: CellGraph, path) -> None:
    write_json(path, graph_to_doc(g))


def graph_from_doc(doc: dict, where: str = "graph") -> CellGraph:
    if doc.get("format_version") != FORMAT_VERSION:
        raise GraphFormatError(f"{where}: unsupported format_version {doc.get('format_version')!r}")
    nodes = doc.get("nodes") or []
    if not nodes:
        raise GraphFormatError(f"{where}: a graph needs at least one node")
    f_dim = doc.get("f_dim")
    feats = []
    for k, node in enumerate(nodes):
        if len(node["feat"]) != f_dim:
            raise GraphFormatError(f"{where}: node {k} has {len(node['feat'])} features, f_dim is {f_dim}")
        feats.append(node["feat"])
    feats = np.asarray(feats, dtype=np.float64)
    if not np.all(np.isfinite(feats)):
        raise GraphFormatError(f"{where}: non-finite feature values")
    n = len(nodes)
    raw = doc.get("edges") or []
    prev = None
    for e in raw:
        if len(e) != 2:
            raise GraphFormatError(f"{where}: malformed edge {e!r}")
        u, v = int(e[0]), int(e[1])
        if not (0 <= u < v < n):
            raise GraphFormatError(f"{where}: invalid edge [{u}, {v}] for {n} nodes (need 0 <= u < v < N)")
        if prev is not None and (u, v) <= prev:
            raise GraphFormatError(f"{where}: edge [{u}, {v}] is out of order or duplicated")
        prev = (u, v)
    label = doc.get("label")
    if label not in (None, LOW_RISK, HIGH_RISK):
        raise GraphFormatError(f"{where}: label must be 0, 1 or null, got {label!r}")
    ids = np.array([int(node["id"]) for node in nodes], dtype=np.int64)
    if len(np.unique(ids)) != n:
        raise GraphFormatError(f"{where}: duplicate node ids")
    pos = np.array([[float(node["x"]), float(node["y"])] for node in nodes])
    return CellGraph(feats, EdgeList(np.asarray(raw, dtype=np.int64).reshape(-1, 2), n), label,
                     str(doc.get("source_id", "")), pos, ids)


def load_graph(path) -> CellGraph:
    return graph_from_doc(read_json(path), str(path))


def graphs_equal(a: CellGraph, b: CellGraph) -> bool:
    return (a.source_id == b.source_id and a.label == b.label
            and np.array_equal(a.features, b.features)
            and np.array_equal(a.edges.pairs, b.edges.pairs) and a.edges.n == b.edges.n
            and np.array_equal(a.positions, b.positions) and np.array_equal(a.node_ids, b.node_ids))
