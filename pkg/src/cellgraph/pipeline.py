"""End-to-end orchestration: synthetic data, CPC pretraining, graphs, GNN folds."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .cpc import CpcModel, evaluate_loss, nucleus_cpc_features, sample_patches, train_cpc
from .data import (GROUP_SEP, ManifestRow, crop_augment, group_of, load_graph,
                   make_folds, read_manifest, read_png, save_graph, synth_sample, train_val_split,
                   write_manifest,
                   write_png)
from .features import FeatureScaler, extract_instances, handcrafted_features, to_grayscale
from .gnn import CellGraph, ModelParams, batch_loss, predict_proba
from .graph import knn_graph
from .metrics import RunMetrics, auc, fold_metrics, roc_export
from .serialization import FORMAT_VERSION, write_json

log = logging.getLogger(__name__)

MANIFEST = "manifest.csv"


# ---------------------------------------------------------------- data

def write_synthetic_dataset(root, n_per_class: int, side: int = 512, seed: int = 0,
                            workers: int = 1) -> list[ManifestRow]:
    """Render a synthetic cohort under ``root`` with a manifest."""
    root = Path(root)
    jobs = [(root, k, seed, side) for k in range(2 * n_per_class)]
    rows = _map(_write_synth_one, jobs, workers)
    write_manifest(root / MANIFEST, rows)
    return rows


def _write_synth_one(args) -> ManifestRow:
    root, k, seed, side = args
    s = synth_sample(k, seed, side)
    sid = f"s{k:05d}"
    paths = (f"images/{sid}.png", f"masks/{sid}.png", f"grades/{sid}.png")
    write_png(root / paths[0], s.image)
    write_png(root / paths[1], s.instances.astype(np.uint16))
    write_png(root / paths[2], s.grades)
    return ManifestRow(sid, *paths, label=s.label)


def resolve_workers(workers: int) -> int:
    """0 means one worker per CPU core."""
    return workers if workers > 0 else (os.cpu_count() or 1)


def _map(fn, jobs: list, workers: int) -> list:
    # results come back in job order whatever the worker count
    workers = min(resolve_workers(workers), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def load_sample(root: Path, row: ManifestRow):
    image = read_png(root / row.image)
    inst = read_png(root / row.instance_mask)
    grades = read_png(root / row.grade_mask) if row.grade_mask else None
    return image, inst, grades


def gray_of(image: np.ndarray) -> np.ndarray:
    return to_grayscale(image) if image.ndim == 3 else image.astype(np.uint8)


# ---------------------------------------------------------------- CPC stage

def cpc_training_patches(cfg: RunConfig, root: Path, rows: list[ManifestRow]) -> np.ndarray:
    images = []
    for row in rows:
        img = read_png(root / row.image)
        images.append(img[..., :3] if cfg.cpc_rgb else gray_of(img))
    return sample_patches(images, cfg.cpc_patch, cfg.cpc_patches, cfg.seed)


def train_cpc_stage(cfg: RunConfig, root: Path, rows: list[ManifestRow], out: Path,
                    name: str = "cpc.json") -> CpcModel:
    """Self-supervised; uses every image (no labels) and saves ``out / name``."""
    patches = cpc_training_patches(cfg, root, rows)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(patches))
    n_hold = max(2, len(patches) // 10)
    held, train = patches[perm[:n_hold]], patches[perm[n_hold:]]
    history: list = []
    model = train_cpc(train, cfg.cpc_config(), history)
    held_loss = evaluate_loss(held, model)
    model.save(out / name, extra={"log": history, "heldout_loss": held_loss,
                                        "n_candidates": cfg.cpc_negatives + 1, "run": cfg.to_dict()})
    log.info("CPC held-out InfoNCE %.4f (uniform baseline %.4f)", held_loss, np.log(cfg.cpc_negatives + 1))
    return model


# ---------------------------------------------------------------- graph building

def build_crop_graph(image, instances, cfg: RunConfig, cpc_model: CpcModel | None,
                     source_id: str, label: int | None) -> CellGraph | None:
    """Features and KNN edges for one crop; ``None`` if it holds no nuclei."""
    records = extract_instances(instances)
    if not records:
        return None
    gray = gray_of(image)
    offsets = [tuple(o) for o in cfg.glcm_offsets]
    hand = handcrafted_features(gray, records, cfg.glcm_levels, offsets)
    pos = np.array([r.centroid for r in records])
    feats = hand
    if cfg.use_cpc:
        if cpc_model is None:
            raise ValueError("CPC features enabled but no CPC model was provided")
        src = image[..., :3] if cfg.cpc_rgb else gray
        feats = np.concatenate([hand, nucleus_cpc_features(src, pos, cpc_model, cfg.cpc_window)], axis=1)
    ids = np.array([r.id for r in records], dtype=np.int64)
    edges = knn_graph(pos, cfg.k, cfg.radius, ids=ids)
    return CellGraph(feats, edges, label, source_id, pos, ids)


def _build_one(args):
    cfg, root, row, cpc_path = args
    cpc_model = CpcModel.load(cpc_path) if cpc_path else None
    image, inst, grades = load_sample(root, row)
    out = []
    for crop in crop_augment(image, inst, grades, cfg.crop_size, cfg.tissue_fraction):
        label = crop.grade_label.label if crop.grade_label is not None else row.label
        g = build_crop_graph(crop.image, crop.instances, cfg, cpc_model,
                             f"{row.source_id}{GROUP_SEP}{crop.name}", label)
        if g is not None:
            out.append(g)
    return out


def build_graphs(cfg: RunConfig, root: Path, rows: list[ManifestRow], cpc_path: Path | None,
                 out_dir: Path | None = None) -> list[CellGraph]:
    """Graphs for every kept crop, in manifest order; optionally written as JSON."""
    jobs = [(cfg, root, row, str(cpc_path) if cpc_path else None) for row in rows]
    parts = _map(_build_one, jobs, cfg.workers)
    graphs = [g for part in parts for g in part]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        for g in graphs:
            save_graph(g, out_dir / f"{g.source_id.replace(GROUP_SEP, '__')}.json")
    return graphs


def load_graph_dir(path: Path) -> list[CellGraph]:
    files = sorted(Path(path).glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no graph files in {path}")
    return [load_graph(f) for f in files]


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: ModelParams
    scaler: FeatureScaler
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float | None = None


def fit_scaler(graphs: list[CellGraph]) -> FeatureScaler:
    return FeatureScaler.fit(np.concatenate([g.features for g in graphs], axis=0))


def _val_score(params, graphs, feats):
    probs = predict_proba(graphs, params, feats)
    labels = np.array([g.label for g in graphs])
    loss = float(np.mean([-np.log(max(p if y == 1 else 1 - p, 1e-300)) for p, y in zip(probs, labels)]))
    return probs, labels, loss


def train_gnn(train: list[CellGraph], val: list[CellGraph], cfg: RunConfig) -> TrainResult:
    """Mini-batch Adam/SGD with early stopping on validation AUC.

    The kept state is the best (val AUC, then lower val loss) seen so far;
    with ``epochs == 0`` it is the initialization.
    """
    if not train:
        raise ValueError("empty training set")
    scaler = fit_scaler(train)
    tr_feats = [scaler.transform(g.features) for g in train]
    va_feats = [scaler.transform(g.features) for g in val]
    params = ModelParams.init(cfg.gnn_config(train[0].f_dim))
    opt = (ad.Adam(params.parameters(), lr=cfg.lr) if cfg.optimizer == "adam"
           else ad.SGD(params.parameters(), lr=cfg.lr))
    rng = np.random.default_rng(cfg.seed + 101)
    result = TrainResult(params, scaler)
    best_key, best_state, wait = None, params.state(), 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            loss = batch_loss([train[i] for i in idx], params, [tr_feats[i] for i in idx],
                              training=True, rng=rng)
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        entry = {"epoch": epoch, "train_loss": total / len(train),
                 "val_accuracy": None, "val_auc": None}
        if val:
            probs, labels, vloss = _val_score(params, val, va_feats)
            entry["val_accuracy"] = float(np.mean((probs > 0.5) == labels))
            entry["val_auc"] = auc(probs, labels)
            key = (-1.0 if entry["val_auc"] is None else entry["val_auc"], -vloss)
        else:
            key = (0.0, -entry["train_loss"])
        result.log.append(entry)
        if best_key is None or key > best_key:
            best_key, best_state, wait = key, params.state(), 0
            result.best_epoch, result.best_val_auc = epoch, entry["val_auc"]
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    params.load_state(best_state)
    return result


def train_single(cfg: RunConfig, graphs: list[CellGraph], out: Path) -> TrainResult:
    """One training run with a grouped validation hold-out; writes model and log."""
    labels = [g.label for g in graphs]
    tr, va = train_val_split(labels, [group_of(g.source_id) for g in graphs], cfg.val_fraction,
                             cfg.seed, cfg.group_split)
    res = train_gnn([graphs[i] for i in tr], [graphs[i] for i in va], cfg)
    save_model(out / "model.json", res, cfg)
    write_json(out / "train_log.json", {"format_version": FORMAT_VERSION, "config": cfg.to_dict(),
                                        "log": res.log, "best_epoch": res.best_epoch})
    return res


def save_model(path: Path, result: TrainResult, cfg: RunConfig) -> None:
    result.params.save(path, extra={"scaler": result.scaler.to_dict(), "best_epoch": result.best_epoch,
                                    "best_val_auc": result.best_val_auc},
                       run_config=cfg.to_dict())


def load_model(path: Path) -> tuple[ModelParams, FeatureScaler, dict]:
    params, extra, cfg = ModelParams.load(path)
    return params, FeatureScaler.from_dict(extra["scaler"]), cfg


def predict(params: ModelParams, scaler: FeatureScaler, graphs: list[CellGraph]) -> np.ndarray:
    for g in graphs:
        if g.f_dim != params.config.in_dim:
            raise ValueError(f"graph {g.source_id!r} has {g.f_dim} features; "
                             f"checkpoint expects {params.config.in_dim}")
    return predict_proba(graphs, params, [scaler.transform(g.features) for g in graphs])


def evaluate(params: ModelParams, scaler: FeatureScaler, graphs: list[CellGraph], fold: int = 0):
    probs = predict(params, scaler, graphs)
    labels = np.array([g.label for g in graphs])
    return fold_metrics(fold, probs, labels), probs


# ---------------------------------------------------------------- cross-validation

def metrics_document(cfg: RunConfig, metrics: RunMetrics, extra: dict | None = None) -> dict:
    doc = {"format_version": FORMAT_VERSION, "config": cfg.to_dict()}
    doc.update(metrics.to_dict())
    if extra:
        doc.update(extra)
    return doc


def _fold_job(args):
    cfg, f, train, val, test = args
    res = train_gnn(train, val, cfg)
    fm, probs = evaluate(res.params, res.scaler, test, fold=f)
    return res, fm, probs


def cross_validate(cfg: RunConfig, graphs: list[CellGraph], out: Path | None = None) -> RunMetrics:
    """k-fold training and testing; folds run in parallel when ``cfg.workers`` allows."""
    labels = np.array([g.label for g in graphs])
    groups = [group_of(g.source_id) for g in graphs]
    _, splits = make_folds(labels, groups, cfg.folds, cfg.seed, cfg.val_fraction, cfg.group_split)
    jobs = [(cfg, f, [graphs[i] for i in s.train], [graphs[i] for i in s.val], [graphs[i] for i in s.test])
            for f, s in enumerate(splits)]
    metrics = RunMetrics()
    for (_, f, _, _, test), (res, fm, probs) in zip(jobs, _map(_fold_job, jobs, cfg.workers)):
        metrics.folds.append(fm)
        log.info("fold %d: acc %.4f auc %s (best epoch %d)", f, fm.accuracy, fm.auc, res.best_epoch)
        if out is not None:
            fdir = out / f"fold{f}"
            save_model(fdir / "model.json", res, cfg)
            write_json(fdir / "train_log.json", {"format_version": FORMAT_VERSION, "config": cfg.to_dict(),
                                                 "log": res.log, "best_epoch": res.best_epoch})
            if fm.roc is not None:
                roc_export(probs, [g.label for g in test], fdir / "roc.tsv")
    return metrics


def run_cv(cfg: RunConfig) -> RunMetrics:
    """synthetic-or-real manifest -> CPC -> graphs -> k-fold GNN -> metrics files."""
    root = cfg.resolved_data_root()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = read_manifest(root / MANIFEST, root)
    cpc_path = None
    if cfg.use_cpc:
        train_cpc_stage(cfg, root, rows, out)
        cpc_path = out / "cpc.json"
    graphs = build_graphs(cfg, root, rows, cpc_path, out / "graphs")
    metrics = cross_validate(cfg, graphs, out)
    write_json(out / "metrics.json", metrics_document(cfg, metrics))
    (out / "metrics.txt").write_text(metrics.table() + "\n")
    return metrics


__all__ = [
    "write_synthetic_dataset", "train_cpc_stage", "build_crop_graph", "build_graphs",
    "load_graph_dir", "train_gnn", "train_single", "save_model", "load_model", "predict", "evaluate",
    "cross_validate", "run_cv", "metrics_document",
]
