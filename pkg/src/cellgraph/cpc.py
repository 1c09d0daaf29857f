"""Contrastive predictive coding over rows of image cells.

A patch is cut into an overlapping grid of cells.  An MLP encoder maps each
cell to a latent vector; latents are mean-pooled along each row, and a GRU
runs over the pooled rows top to bottom to produce a context per row.  The
context at row t predicts the pooled latent of row t + k through a linear map
per step k, and the InfoNCE objective scores the prediction against one
positive and sampled negatives by dot product.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .serialization import load_checkpoint, save_checkpoint


@dataclass
class CpcConfig:
    patch: int = 64
    cell: int = 16
    stride: int = 8
    hidden: int = 64
    dz: int = 32
    dc: int = 32
    kmax: int = 3
    negatives: int = 15
    epochs: int = 10
    batch: int = 16
    lr: float = 1e-3
    seed: int = 0
    rgb: bool = False
    window: int = 64

    def __post_init__(self):
        grid_side(self.patch, self.cell, self.stride)
        if self.kmax < 1:
            raise ValueError("kmax must be >= 1")

    @property
    def in_dim(self) -> int:
        return self.cell * self.cell * (3 if self.rgb else 1)

    @property
    def n_candidates(self) -> int:
        return self.negatives + 1


def grid_side(side: int, cell: int, stride: int) -> int:
    if cell > side or (side - cell) % stride:
        raise ValueError(f"cells of {cell} px at stride {stride} do not tile a {side} px patch")
    return (side - cell) // stride + 1


@dataclass
class PatchGrid:
    """Cells of one or more patches, shape (B, R, C, cell_pixels)."""

    cells: np.ndarray
    cell: int
    stride: int

    @property
    def rows(self) -> int:
        return self.cells.shape[1]

    @property
    def cols(self) -> int:
        return self.cells.shape[2]


def make_grid(patches: np.ndarray, cell: int, stride: int, rgb: bool = False) -> PatchGrid:
    """Row-major cell grid; pixels scaled to [0, 1] and mean-subtracted per cell.

    Accepts one patch (S, S[, 3]) or a stack (B, S, S[, 3]).
    """
    p = np.asarray(patches, dtype=np.float64) / 255.0
    if p.ndim == (3 if rgb else 2):
        p = p[None]
    if not rgb:
        p = p[..., None]
    if p.ndim != 4:
        raise ValueError(f"unexpected patch array shape {np.shape(patches)}")
    b, h, w, ch = p.shape
    if h != w:
        raise ValueError(f"patches must be square, got {h}x{w}")
    n = grid_side(h, cell, stride)
    win = sliding_window_view(p, (cell, cell), axis=(1, 2))[:, ::stride, ::stride]
    # (B, R, C, ch, cell, cell) -> (B, R, C, cell, cell, ch)
    cells = np.moveaxis(win, 3, -1).reshape(b, n, n, cell * cell * ch)
    cells = cells - cells.mean(axis=-1, keepdims=True)
    return PatchGrid(np.ascontiguousarray(cells), cell, stride)


def _glorot(rng, fan_in, fan_out, shape=None):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


@dataclass
class CpcModel:
    config: CpcConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: CpcConfig) -> "CpcModel":
        rng = np.random.default_rng(config.seed)
        d_in, h, dz, dc = config.in_dim, config.hidden, config.dz, config.dc
        p = {
            "enc.W1": _glorot(rng, d_in, h), "enc.b1": np.zeros(h),
            "enc.W2": _glorot(rng, h, dz), "enc.b2": np.zeros(dz),
        }
        for gate in ("z", "r", "h"):
            p[f"gru.W_{gate}"] = _glorot(rng, dz, dc)
            p[f"gru.U_{gate}"] = _glorot(rng, dc, dc)
            p[f"gru.b_{gate}"] = np.zeros(dc)
        # small prediction weights: scores start near zero, loss near ln(candidates)
        for k in range(1, config.kmax + 1):
            p[f"pred.W{k}"] = rng.normal(0.0, 0.01 / math.sqrt(dc), size=(dc, dz))
        return cls(config, {n: Tensor(v, requires_grad=True, name=n) for n, v in p.items()})

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, "cpc", asdict(self.config), self.state(), extra)

    @classmethod
    def load(cls, path) -> "CpcModel":
        cfg, params, _ = load_checkpoint(path, kind="cpc")
        model = cls.init(CpcConfig(**cfg))
        if set(params) != set(model.params):
            raise ValueError(f"{path}: parameter names do not match the CPC configuration")
        for name, value in params.items():
            if value.shape != model.params[name].shape:
                raise ValueError(f"{path}: {name} has shape {value.shape}, "
                                 f"expected {model.params[name].shape}")
            model.params[name].data = value
        return model


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(x, w) + ad.broadcast_to(b, (x.shape[0], w.shape[1]))


def encode_cells(cells, model: CpcModel) -> Tensor:
    """Latents for a (M, cell_pixels) matrix of cells."""
    p = model.params
    x = cells if isinstance(cells, Tensor) else Tensor(cells)
    if x.ndim != 2 or x.shape[1] != p["enc.W1"].shape[0]:
        raise ad.ShapeError(f"encoder expects (M, {p['enc.W1'].shape[0]}) cells, got {x.shape}")
    return _affine(ad.relu(_affine(x, p["enc.W1"], p["enc.b1"])), p["enc.W2"], p["enc.b2"])


def encode_rows(grid: PatchGrid | np.ndarray, model: CpcModel) -> Tensor:
    """Cell latents, shape (B, R, C, dz)."""
    cells = grid.cells if isinstance(grid, PatchGrid) else np.asarray(grid)
    b, r, c, d = cells.shape
    z = encode_cells(cells.reshape(b * r * c, d), model)
    return ad.reshape(z, (b, r, c, model.config.dz))


def pool_rows(z: Tensor) -> Tensor:
    """(B, R, C, dz) -> (B, R, dz) by mean over columns."""
    return ad.mean(z, axis=2)


def gru_step(x: Tensor, h: Tensor, model: CpcModel) -> Tensor:
    p = model.params
    z = ad.sigmoid(_affine(x, p["gru.W_z"], p["gru.b_z"]) + ad.matmul(h, p["gru.U_z"]))
    r = ad.sigmoid(_affine(x, p["gru.W_r"], p["gru.b_r"]) + ad.matmul(h, p["gru.U_r"]))
    cand = ad.tanh(_affine(x, p["gru.W_h"], p["gru.b_h"]) + ad.matmul(r * h, p["gru.U_h"]))
    return (1.0 - z) * h + z * cand


def context(pooled: Tensor, model: CpcModel) -> list[Tensor]:
    """Per-row contexts c_t (each (B, dc)) from pooled latents (B, R, dz).

    c_t depends only on rows 0..t.
    """
    b, r, dz = pooled.shape
    flat = ad.reshape(pooled, (b * r, dz))
    h = Tensor(np.zeros((b, model.config.dc)))
    out = []
    for t in range(r):
        x_t = ad.take_rows(flat, np.arange(b) * r + t)
        h = gru_step(x_t, h, model)
        out.append(h)
    return out


@dataclass
class InfoNceBatch:
    """Prediction tasks for one batch.

    ``tasks`` rows are (patch, t, k); ``candidates`` index the flattened
    (patch, row) pooled latents, column 0 being the positive.
    """

    tasks: np.ndarray
    candidates: np.ndarray


def make_tasks(batch: int, rows: int, kmax: int, negatives: int, rng: np.random.Generator) -> InfoNceBatch:
    tasks = np.array([(b, t, k) for b in range(batch) for k in range(1, kmax + 1)
                      for t in range(rows - k)], dtype=np.int64).reshape(-1, 3)
    pool = batch * rows
    if len(tasks) == 0:
        raise ValueError(f"no prediction task fits a grid of {rows} rows")
    if pool - 1 < negatives:
        raise ValueError(f"only {pool - 1} negatives available, {negatives} requested")
    pos = tasks[:, 0] * rows + tasks[:, 1] + tasks[:, 2]
    # uniform over the other pool entries: draw from pool-1 slots and skip the positive
    draw = np.stack([rng.choice(pool - 1, size=negatives, replace=False) for _ in range(len(tasks))])
    draw = draw + (draw >= pos[:, None])
    return InfoNceBatch(tasks, np.concatenate([pos[:, None], draw], axis=1))


def check_batch(batch: InfoNceBatch, rows: int) -> None:
    """Every candidate set must lead with its own positive and not repeat it."""
    if batch.candidates.ndim != 2 or batch.candidates.shape[0] != len(batch.tasks):
        raise ValueError("one candidate set per task is required")
    pos = batch.tasks[:, 0] * rows + batch.tasks[:, 1] + batch.tasks[:, 2]
    if np.any(batch.candidates[:, 0] != pos):
        raise ValueError("candidate set does not contain its positive target")
    if np.any(batch.candidates[:, 1:] == pos[:, None]):
        raise ValueError("positive target repeated among the negatives")


def info_nce_loss(pooled: Tensor, contexts: list[Tensor], batch: InfoNceBatch,
                  model: CpcModel) -> Tensor:
    """Mean cross-entropy of the positive among each task's candidates."""
    b, r, dz = pooled.shape
    check_batch(batch, r)
    targets = ad.reshape(pooled, (b * r, dz))
    ctx = ad.concat(contexts, axis=0)  # ordered by row, then patch
    preds = []
    for k in range(1, model.config.kmax + 1):
        sel = batch.tasks[:, 2] == k
        if not sel.any():
            continue
        idx = batch.tasks[sel, 1] * b + batch.tasks[sel, 0]
        preds.append((np.flatnonzero(sel), ad.matmul(ad.take_rows(ctx, idx), model.params[f"pred.W{k}"])))
    order = np.concatenate([ix for ix, _ in preds])
    pred = ad.concat([p for _, p in preds], axis=0)
    cand = batch.candidates[order]
    scores = ad.take_along_rows(ad.matmul(pred, ad.transpose(targets)), cand)
    return ad.softmax_cross_entropy(scores, np.zeros(len(order), dtype=np.intp))


def batch_loss(patches: np.ndarray, model: CpcModel, rng: np.random.Generator) -> Tensor:
    cfg = model.config
    grid = make_grid(patches, cfg.cell, cfg.stride, cfg.rgb)
    pooled = pool_rows(encode_rows(grid, model))
    ctx = context(pooled, model)
    tasks = make_tasks(grid.cells.shape[0], grid.rows, cfg.kmax, cfg.negatives, rng)
    return info_nce_loss(pooled, ctx, tasks, model)


def evaluate_loss(patches: np.ndarray, model: CpcModel, seed: int = 12345) -> float:
    """Held-out InfoNCE loss with fixed negatives, averaged over batches."""
    rng = np.random.default_rng(seed)
    bs = model.config.batch
    losses, weights = [], []
    with ad.no_grad():
        for s in range(0, len(patches), bs):
            chunk = patches[s:s + bs]
            if len(chunk) < 2:
                continue
            losses.append(batch_loss(chunk, model, rng).item())
            weights.append(len(chunk))
    return float(np.average(losses, weights=weights))


def train_cpc(patches: np.ndarray, config: CpcConfig, log: list | None = None) -> CpcModel:
    """Fit a CPC model with Adam; deterministic given ``config.seed``."""
    patches = np.asarray(patches)
    if len(patches) == 0:
        raise ValueError("no training patches")
    model = CpcModel.init(config)
    opt = ad.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    for epoch in range(config.epochs):
        order = rng.permutation(len(patches))
        total, count = 0.0, 0
        for s in range(0, len(order), config.batch):
            idx = order[s:s + config.batch]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            loss = batch_loss(patches[idx], model, rng)
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        if log is not None:
            log.append({"epoch": epoch, "loss": total / max(count, 1)})
    return model


def sample_patches(images: list[np.ndarray], size: int, count: int, seed: int) -> np.ndarray:
    """Random patches on a half-size stride lattice (deterministic in ``seed``)."""
    rng = np.random.default_rng(seed)
    step = max(1, size // 2)
    slots = []
    for i, img in enumerate(images):
        h, w = img.shape[:2]
        for r in range(0, h - size + 1, step):
            for c in range(0, w - size + 1, step):
                slots.append((i, r, c))
    if not slots:
        raise ValueError(f"no image fits a {size} px patch")
    pick = rng.choice(len(slots), size=min(count, len(slots)), replace=False)
    return np.stack([images[i][r:r + size, c:c + size] for i, r, c in (slots[j] for j in sorted(pick))])


def window_origin(center: float, window: int, limit: int) -> int:
    """Top/left index of a window centred on ``center``, shifted inside [0, limit)."""
    return int(min(max(int(math.floor(center - window / 2 + 0.5)), 0), limit - window))


def nucleus_cpc_features(image: np.ndarray, centroids, model: CpcModel,
                         window: int | None = None, chunk: int = 256) -> np.ndarray:
    """Mean cell latent of the window around each (x, y) centroid, (N, dz)."""
    cfg = model.config
    w = cfg.window if window is None else window
    img = np.asarray(image)
    h, wd = img.shape[:2]
    if h < w or wd < w:
        raise ValueError(f"image {h}x{wd} is smaller than the {w} px feature window")
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((len(pts), cfg.dz))
    with ad.no_grad():
        for s in range(0, len(pts), chunk):
            wins = []
            for x, y in pts[s:s + chunk]:
                r0 = window_origin(y, w, h)
                c0 = window_origin(x, w, wd)
                wins.append(img[r0:r0 + w, c0:c0 + w])
            grid = make_grid(np.stack(wins), cfg.cell, cfg.stride, cfg.rgb)
            z = encode_rows(grid, model).data
            out[s:s + chunk] = z.mean(axis=(1, 2))
    return out
