"""GraphSAGE (max aggregator) with self-attention graph pooling.

Weights act on row vectors: a layer computes ``H @ W`` rather than ``W h``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import EdgeList
from .serialization import load_checkpoint, save_checkpoint

LOW_RISK, HIGH_RISK = 0, 1


@dataclass
class CellGraph:
    """Node features (N, F), undirected edges, binary label, node positions."""

    features: np.ndarray
    edges: EdgeList
    label: int | None = None
    source_id: str = ""
    positions: np.ndarray | None = None  # (N, 2) x, y
    node_ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"graph {self.source_id!r}: need a (N>=1, F) feature matrix, "
                             f"got {self.features.shape}")
        if self.edges.n != self.features.shape[0]:
            raise ValueError(f"graph {self.source_id!r}: edge list covers {self.edges.n} nodes, "
                             f"features have {self.features.shape[0]}")
        if self.label is not None and self.label not in (LOW_RISK, HIGH_RISK):
            raise ValueError(f"graph {self.source_id!r}: label must be 0 or 1, got {self.label!r}")
        if self.positions is None:
            self.positions = np.zeros((self.n, 2))
        if self.node_ids is None:
            self.node_ids = np.arange(self.n)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def f_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class GnnConfig:
    in_dim: int = 44
    layers: int = 3
    hidden: int = 64
    pool_ratio: float = 0.5
    head_hidden: int = 64
    dropout: float = 0.0
    score_activation: str = "sigmoid"
    readout: str = "mean_max"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.pool_ratio <= 1:
            raise ValueError("pool_ratio must lie in (0, 1]")
        if self.score_activation not in ("sigmoid", "tanh"):
            raise ValueError("score_activation must be 'sigmoid' or 'tanh'")
        if self.readout != "mean_max":
            raise ValueError("only the 'mean_max' readout is implemented")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


@dataclass
class ModelParams:
    config: GnnConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: GnnConfig) -> "ModelParams":
        rng = np.random.default_rng(config.seed)
        p: dict[str, np.ndarray] = {}
        d = config.in_dim
        for i in range(config.layers):
            p[f"conv{i}.W_agg"] = _glorot(rng, d, d)
            p[f"conv{i}.W_upd"] = _glorot(rng, 2 * d, config.hidden)
            d = config.hidden
            p[f"pool{i}.W_agg"] = _glorot(rng, d, d)
            p[f"pool{i}.W_upd"] = _glorot(rng, 2 * d, 1)
        p["head.W1"] = _glorot(rng, 2 * d, config.head_hidden)
        p["head.b1"] = np.zeros(config.head_hidden)
        p["head.W2"] = _glorot(rng, config.head_hidden, 2)
        p["head.b2"] = np.zeros(2)
        return cls(config, {n: Tensor(v, requires_grad=True, name=n) for n, v in p.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.tensors):
            missing = sorted(set(self.tensors) ^ set(state))
            raise ValueError(f"parameter names differ from the configuration: {missing}")
        for name, value in state.items():
            if value.shape != self.tensors[name].shape:
                raise ValueError(f"{name}: shape {value.shape}, expected {self.tensors[name].shape}")
            self.tensors[name].data = np.array(value, dtype=np.float64)

    def save(self, path, extra: dict | None = None, run_config: dict | None = None) -> None:
        cfg = {"gnn": asdict(self.config)}
        if run_config is not None:
            cfg["run"] = run_config
        save_checkpoint(path, "gnn", cfg, self.state(), extra)

    @classmethod
    def load(cls, path) -> tuple["ModelParams", dict, dict]:
        """Returns (params, extra, full config echo)."""
        cfg, state, extra = load_checkpoint(path, kind="gnn")
        params = cls.init(GnnConfig(**cfg["gnn"]))
        params.load_state(state)
        return params, extra, cfg


# ---------------------------------------------------------------- layers

def sage_conv_directed(h: Tensor, src: np.ndarray, dst: np.ndarray,
                       w_agg: Tensor, w_upd: Tensor) -> Tensor:
    """``[h_v | max_{u -> v} relu(h_u W_agg)] @ W_upd``; empty neighbourhoods give 0.

    ``src``/``dst`` should be sorted by (dst, src) so max ties resolve to the
    lowest neighbour id.
    """
    n = h.shape[0]
    if h.ndim != 2 or w_agg.shape[0] != h.shape[1] or w_upd.shape[0] != h.shape[1] + w_agg.shape[1]:
        raise ad.ShapeError(f"sage_conv: features {h.shape}, W_agg {w_agg.shape}, W_upd {w_upd.shape}")
    if len(src) and (max(src.max(), dst.max()) >= n):
        raise ValueError(f"edge endpoint outside [0, {n})")
    msg = ad.relu(ad.matmul(h, w_agg))
    agg = ad.gather_segment_max(msg, src, dst, n)
    return ad.matmul(ad.concat([h, agg], axis=1), w_upd)


def sage_conv(h: Tensor, edges: EdgeList, w_agg: Tensor, w_upd: Tensor) -> Tensor:
    src, dst = edges.directed()
    return sage_conv_directed(h, src, dst, w_agg, w_upd)


@dataclass
class PoolResult:
    features: Tensor
    edges: EdgeList
    kept: np.ndarray  # indices into the input nodes, in output order
    scores: np.ndarray  # attention score of every input node


def sag_pool(x: Tensor, edges: EdgeList, ratio: float, w_agg: Tensor, w_upd: Tensor,
             activation: str = "sigmoid") -> PoolResult:
    """Keep the ceil(ratio * N) highest-scoring nodes, gated by their scores.

    Scores come from a one-output SAGE convolution over A + A^2.  Kept nodes
    are ordered by descending score, ties by lower index.
    """
    n, d = x.shape
    src, dst = edges.two_hop()
    raw = sage_conv_directed(x, src, dst, w_agg, w_upd)
    z = ad.sigmoid(raw) if activation == "sigmoid" else ad.tanh(raw)
    k = max(1, math.ceil(ratio * n - 1e-9))
    score = z.data[:, 0]
    kept = np.lexsort((np.arange(n), -score))[:k]
    gate = ad.broadcast_to(ad.take_rows(z, kept), (k, d))
    out = ad.take_rows(x, kept) * gate
    return PoolResult(out, induced_subgraph(edges, kept), kept, score.copy())


def induced_subgraph(edges: EdgeList, kept: np.ndarray) -> EdgeList:
    remap = np.full(edges.n, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    pairs = remap[edges.pairs] if len(edges) else np.zeros((0, 2), dtype=np.int64)
    pairs = pairs[(pairs >= 0).all(axis=1)] if len(pairs) else pairs
    return EdgeList.from_pairs(pairs, len(kept))


def readout(x: Tensor) -> Tensor:
    """Column mean concatenated with column max, shape (2d,)."""
    return ad.concat([ad.mean(x, axis=0), ad.max(x, axis=0)], axis=0)


@dataclass
class ForwardTrace:
    """Pooling bookkeeping from one forward pass, for inspection and tests."""

    levels: list[PoolResult] = field(default_factory=list)

    def scores_distinct(self) -> bool:
        return all(len(np.unique(lv.scores)) == len(lv.scores) for lv in self.levels)


def forward(g: CellGraph, params: ModelParams, training: bool = False,
            rng: np.random.Generator | None = None, trace: ForwardTrace | None = None,
            features: np.ndarray | None = None) -> Tensor:
    """Two logits (low-risk, high-risk) for one graph.

    ``features`` overrides ``g.features`` (e.g. normalized copies).
    """
    cfg = params.config
    feats = g.features if features is None else features
    if feats.shape[1] != cfg.in_dim:
        raise ValueError(f"graph {g.source_id!r} has {feats.shape[1]} features, "
                         f"model expects {cfg.in_dim}")
    h = Tensor(feats)
    edges = g.edges
    total = None
    for i in range(cfg.layers):
        h = ad.relu(sage_conv(h, edges, params[f"conv{i}.W_agg"], params[f"conv{i}.W_upd"]))
        pooled = sag_pool(h, edges, cfg.pool_ratio, params[f"pool{i}.W_agg"],
                          params[f"pool{i}.W_upd"], cfg.score_activation)
        if trace is not None:
            trace.levels.append(pooled)
        h, edges = pooled.features, pooled.edges
        r = readout(h)
        total = r if total is None else total + r
    x = ad.reshape(total, (1, total.shape[0]))
    hid = ad.relu(ad.matmul(x, params["head.W1"]) + ad.reshape(params["head.b1"], (1, cfg.head_hidden)))
    if training and cfg.dropout > 0:
        if rng is None:
            raise ValueError("dropout during training needs an rng")
        keep = (rng.random(hid.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
        hid = hid * Tensor(keep)
    logits = ad.matmul(hid, params["head.W2"]) + ad.reshape(params["head.b2"], (1, 2))
    return ad.reshape(logits, (2,))


def predict_proba(graphs: list[CellGraph], params: ModelParams,
                  features: list[np.ndarray] | None = None) -> np.ndarray:
    """High-risk probability per graph."""
    out = np.zeros(len(graphs))
    with ad.no_grad():
        for i, g in enumerate(graphs):
            z = forward(g, params, features=None if features is None else features[i]).data
            m = z.max()
            e = np.exp(z - m)
            out[i] = e[1] / e.sum()
    return out


def batch_loss(graphs: list[CellGraph], params: ModelParams, features: list[np.ndarray] | None = None,
               training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Mean cross-entropy over a list of labelled graphs."""
    logits = [ad.reshape(forward(g, params, training, rng,
                                 features=None if features is None else features[i]), (1, 2))
              for i, g in enumerate(graphs)]
    labels = np.array([g.label for g in graphs], dtype=np.intp)
    return ad.softmax_cross_entropy(ad.concat(logits, axis=0), labels)
