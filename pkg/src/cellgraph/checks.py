"""Finite-difference gradient suite over the autodiff ops and both models.

Each check builds a small random problem from a seed and compares
``backward`` against central differences.  Inputs are drawn away from the
kinks of relu/max so the finite differences are well defined.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck
from .cpc import CpcConfig, CpcModel, context, encode_rows, info_nce_loss, make_grid, make_tasks, pool_rows
from .gnn import CellGraph, GnnConfig, ModelParams, forward
from .graph import knn_graph

OP_TOL = 1e-5
GNN_TOL = 1e-5
CPC_RECURRENT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    seeds: int
    max_rel_error: float
    tol: float
    passed: bool
    n_checked: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} seeds={self.seeds:<3} coords={self.n_checked:<6} "
                f"max_rel_err={self.max_rel_error:.3e}  tol={self.tol:.0e}")


# ---------------------------------------------------------------- inputs

def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _spread(rng, shape):
    """Distinct values with gaps far larger than the difference step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def _t(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


# Each builder maps an rng to (fn, inputs).
def _op_builders() -> dict[str, Callable]:
    b: dict[str, Callable] = {}

    def binary(op):
        return lambda r: (op, [_t(r.normal(size=(3, 4))), _t(r.normal(size=(3, 4)))])

    b["add"] = binary(ad.add)
    b["sub"] = binary(ad.sub)
    b["mul"] = binary(ad.mul)
    b["mul_scalar"] = lambda r: (lambda a: a * 2.5, [_t(r.normal(size=(4,)))])
    b["div_scalar"] = lambda r: (lambda a: a / 3.0, [_t(r.normal(size=(4,)))])
    b["neg"] = lambda r: (ad.neg, [_t(r.normal(size=(5,)))])
    b["relu"] = lambda r: (ad.relu, [_t(_away_from_zero(r, (4, 3)))])
    b["sigmoid"] = lambda r: (ad.sigmoid, [_t(r.normal(scale=3, size=(4, 3)))])
    b["tanh"] = lambda r: (ad.tanh, [_t(r.normal(size=(4, 3)))])
    b["exp"] = lambda r: (ad.exp, [_t(r.normal(size=(4, 3)))])
    b["log"] = lambda r: (ad.log, [_t(r.uniform(0.2, 3.0, size=(4, 3)))])
    b["matmul"] = lambda r: (ad.matmul, [_t(r.normal(size=(3, 4))), _t(r.normal(size=(4, 2)))])
    b["transpose"] = lambda r: (ad.transpose, [_t(r.normal(size=(3, 5)))])
    b["reshape"] = lambda r: (lambda a: ad.reshape(a, (2, 6)), [_t(r.normal(size=(3, 4)))])
    b["broadcast_to"] = lambda r: (lambda a: ad.broadcast_to(a, (4, 3)), [_t(r.normal(size=(3,)))])
    b["sum"] = lambda r: (lambda a: ad.sum(a), [_t(r.normal(size=(3, 4)))])
    b["sum_axis"] = lambda r: (lambda a: ad.sum(a, axis=1), [_t(r.normal(size=(3, 4)))])
    b["mean_axis"] = lambda r: (lambda a: ad.mean(a, axis=0), [_t(r.normal(size=(3, 4)))])
    b["max"] = lambda r: (lambda a: ad.max(a), [_t(_spread(r, (3, 4)))])
    b["max_axis"] = lambda r: (lambda a: ad.max(a, axis=0), [_t(_spread(r, (3, 4)))])
    b["concat"] = lambda r: (lambda a, c: ad.concat([a, c], axis=1),
                             [_t(r.normal(size=(3, 2))), _t(r.normal(size=(3, 4)))])
    b["split"] = lambda r: (lambda a: ad.concat([p * (i + 1.0) for i, p in enumerate(ad.split(a, [1, 3], 0))]),
                            [_t(r.normal(size=(4, 2)))])

    def take(r):
        idx = r.integers(0, 4, size=7)
        return (lambda a: ad.take_rows(a, idx)), [_t(r.normal(size=(4, 3)))]

    def take_along(r):
        idx = r.integers(0, 5, size=(3, 4))
        return (lambda a: ad.take_along_rows(a, idx)), [_t(r.normal(size=(3, 5)))]

    def seg(r):
        ids = r.integers(0, 4, size=9)
        return (lambda a: ad.segment_max(a, ids, 5)), [_t(_spread(r, (9, 3)))]

    def gseg(r):
        src = r.integers(0, 6, size=12)
        dst = r.integers(0, 4, size=12)
        return (lambda a: ad.gather_segment_max(a, src, dst, 4)), [_t(_spread(r, (6, 3)))]

    def xent(r):
        tgt = r.integers(0, 3, size=5)
        return (lambda a: ad.softmax_cross_entropy(a, tgt)), [_t(r.normal(size=(5, 3)))]

    b["take_rows"] = take
    b["take_along_rows"] = take_along
    b["segment_max"] = seg
    b["gather_segment_max"] = gseg
    b["softmax_cross_entropy"] = xent
    b["elementwise"] = lambda r: (lambda a, c: ad.elementwise("mul", a, ad.elementwise("tanh", c)),
                                  [_t(r.normal(size=(3,))), _t(r.normal(size=(3,)))])
    b["reduce"] = lambda r: (lambda a: ad.reduce("mean", a, 1), [_t(r.normal(size=(3, 4)))])
    return b


# ---------------------------------------------------------------- model problems

def tiny_cpc_config(seed: int = 0) -> CpcConfig:
    return CpcConfig(patch=16, cell=8, stride=4, hidden=6, dz=4, dc=4, kmax=2, negatives=4,
                     batch=3, seed=seed, window=16)


def _cpc_encoder_problem(rng, seed):
    model = CpcModel.init(tiny_cpc_config(seed))
    grid = make_grid(rng.integers(0, 256, size=(2, 16, 16)).astype(np.uint8), 8, 4)
    params = [model.params[n] for n in ("enc.W1", "enc.b1", "enc.W2", "enc.b2")]
    for p in params:  # move pre-activations off the relu kink at zero bias
        p.data = p.data + rng.normal(scale=0.05, size=p.shape)
    return (lambda *_: pool_rows(encode_rows(grid, model))), params


def _cpc_stack_problem(rng, seed):
    cfg = tiny_cpc_config(seed)
    model = CpcModel.init(cfg)
    for p in model.parameters():
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    grid = make_grid(rng.integers(0, 256, size=(3, 16, 16)).astype(np.uint8), cfg.cell, cfg.stride)
    tasks = make_tasks(3, grid.rows, cfg.kmax, cfg.negatives, rng)

    def fn(*_):
        pooled = pool_rows(encode_rows(grid, model))
        return info_nce_loss(pooled, context(pooled, model), tasks, model)

    return fn, model.parameters()


def random_cell_graph(rng, n: int, f_dim: int, label: int = 0) -> CellGraph:
    pts = rng.uniform(0, 60, size=(n, 2))
    return CellGraph(rng.normal(size=(n, f_dim)), knn_graph(pts, k=3, radius=30.0), label)


def _gnn_problem(rng, seed):
    cfg = GnnConfig(in_dim=5, layers=3, hidden=6, head_hidden=4, seed=seed)
    params = ModelParams.init(cfg)
    g = random_cell_graph(rng, int(rng.integers(10, 16)), 5)
    return (lambda *_: forward(g, params)), params.parameters()


def _wrong_vjp_problem(rng, seed):
    # square with a backward that forgets the factor 2
    def bad_square(a):
        return ad._record("bad_square", a.data ** 2, (a,), lambda g: (g * a.data,))

    return bad_square, [_t(r) for r in [rng.uniform(0.5, 2.0, size=(4,))]]


# ---------------------------------------------------------------- suite

def _run(name, builder, seeds, tol) -> CheckResult:
    worst, n_checked, ok = 0.0, 0, True
    for s in range(seeds):
        rng = np.random.default_rng([s, 7919])
        fn, inputs = builder(rng, s)
        rep = gradcheck(fn, inputs, tol=tol, seed=s)
        worst = max(worst, rep.max_rel_error)
        n_checked += rep.n_checked
        ok = ok and rep.passed
    return CheckResult(name, seeds, worst, tol, ok, n_checked)


def check_names() -> list[str]:
    return ([f"op.{n}" for n in _op_builders()]
            + ["cpc.encoder", "cpc.recurrent_infonce", "gnn.forward", "control.wrong_backward"])


def run_suite(seeds: int = 20, only: list[str] | None = None, log=None) -> list[CheckResult]:
    """Run the checks (optionally a subset by name); ``log`` gets one line per check."""
    plan = [(f"op.{n}", (lambda b: lambda rng, s: b(rng))(b), OP_TOL) for n, b in _op_builders().items()]
    plan += [("cpc.encoder", _cpc_encoder_problem, OP_TOL),
             ("cpc.recurrent_infonce", _cpc_stack_problem, CPC_RECURRENT_TOL),
             ("gnn.forward", _gnn_problem, GNN_TOL)]
    results = []
    for name, builder, tol in plan:
        if only and name not in only:
            continue
        res = _run(name, builder, seeds, tol)
        results.append(res)
        if log:
            log(res.line())
    if not only or "control.wrong_backward" in only:
        # the checker itself must catch a broken backward on every seed
        caught = [not gradcheck(*_wrong_vjp_problem(np.random.default_rng(s), s)).passed
                  for s in range(seeds)]
        res = CheckResult("control.wrong_backward", seeds, float("nan"), OP_TOL, all(caught), 4 * seeds)
        results.append(res)
        if log:
            log(res.line().replace("max_rel_err=nan", "detected=" + str(sum(caught))))
    return results
