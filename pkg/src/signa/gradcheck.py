"""Finite-difference suites for every differentiable piece of the pipeline."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .attention import SignaConfig, SignaParams, signa_block
from .model import BackboneConfig, build_model, bce_loss
from .semantics import GNN_KINDS, LabelGraph, gat_layer, gcn_layer, sage_layer, synthetic_embeddings
from .tensor import Tensor, finite_diff_check

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<40s} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.0e}"


def param_rel_error(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-6) -> float:
    """Compare backward gradients of ``loss_fn`` with central differences, perturbing params in place."""
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in params.values():
        ana = p.grad.copy()
        flat = p.data.reshape(-1)
        num = np.zeros(flat.size)
        with T.no_grad():
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = loss_fn().item()
                flat[i] = old - h
                fm = loss_fn().item()
                flat[i] = old
                num[i] = (fp - fm) / (2 * h)
        num = num.reshape(ana.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(ana), np.abs(num)))
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)) if ana.size else 0.0)
    return worst


def _off_kink(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1e-3, 0.1, x)


def _primitive_case(name: str, r: np.random.Generator):
    n = r.standard_normal
    if name == "matmul":
        B, w = Tensor(n((3, 2))), n((4, 2))
        return (lambda t: T.weighted_sum(T.matmul(t, B), w)), n((4, 3))
    if name == "matmul_batched":
        B, w = Tensor(n((3, 2))), n((2, 4, 2))
        return (lambda t: T.weighted_sum(T.matmul(t, B), w)), n((2, 4, 3))
    if name == "matmul_ordered":
        B, w = Tensor(n((3, 2))), n((2, 4, 2))
        return (lambda t: T.weighted_sum(T.matmul_ordered(t, B), w)), n((2, 4, 3))
    if name == "matmul_ordered_right":
        A, w = Tensor(n((2, 4, 3))), n((2, 4, 2))
        return (lambda t: T.weighted_sum(T.matmul_ordered(A, t), w)), n((3, 2))
    if name == "softmax_rows":
        w = n((3, 5))
        return (lambda t: T.weighted_sum(T.softmax_rows(t), w)), n((3, 5))
    if name == "leaky_relu":
        w = n(7)
        return (lambda t: T.weighted_sum(T.leaky_relu(t), w)), _off_kink(n(7))
    if name == "sigmoid":
        w = n(7)
        return (lambda t: T.weighted_sum(T.sigmoid(t), w)), n(7)
    if name == "global_avg_pool":
        w = n(3)
        return (lambda t: T.weighted_sum(T.global_avg_pool(t), w)), n((3, 4, 2))
    if name == "conv2d_input":
        k, b, w = Tensor(n((2, 2, 3, 3))), Tensor(n(2)), n((2, 3, 3))
        return (lambda t: T.weighted_sum(T.conv2d(t, k, b, stride=2, pad=1), w)), n((2, 5, 5))
    if name == "conv2d_kernel":
        x, w = Tensor(n((2, 2, 5, 5))), n((2, 2, 3, 3))
        return (lambda t: T.weighted_sum(T.conv2d(x, t, stride=2, pad=1), w)), n((2, 2, 3, 3))
    if name == "affine":
        A, b, w = Tensor(n((3, 4))), Tensor(n(3)), n(3)
        return (lambda t: T.weighted_sum(T.affine(t, A, b), w)), n(4)
    if name == "affine_weight":
        x, b, w = Tensor(n((2, 4))), Tensor(n(3)), n((2, 3))
        return (lambda t: T.weighted_sum(T.affine(x, t, b), w)), n((3, 4))
    if name == "channel_scale":
        f, w = Tensor(n((3, 2, 2))), n((3, 2, 2))
        return (lambda t: T.weighted_sum(T.channel_scale(f, t), w)), n(3)
    if name == "bce_with_logits":
        y = (r.random((3, 4)) < 0.5).astype(float)
        return (lambda t: T.bce_with_logits(t, y)), n((3, 4))
    raise KeyError(name)


PRIMITIVES = ("matmul", "matmul_batched", "matmul_ordered", "matmul_ordered_right", "softmax_rows", "leaky_relu", "sigmoid", "global_avg_pool",
              "conv2d_input", "conv2d_kernel", "affine", "affine_weight", "channel_scale", "bce_with_logits")


def primitive_suite(instances: int = 20) -> Iterator[CheckResult]:
    for name in PRIMITIVES:
        worst = 0.0
        for i in range(instances):
            f, x = _primitive_case(name, np.random.default_rng(7919 * i + 1))
            worst = max(worst, finite_diff_check(f, Tensor(x)))
        yield CheckResult(f"primitive/{name}", worst, PRIMITIVE_TOL)


def gnn_suite(instances: int = 5) -> Iterator[CheckResult]:
    for kind in GNN_KINDS:
        worst = 0.0
        for i in range(instances):
            r = np.random.default_rng(100 + i)
            n = 5
            G = np.where(r.random((n, n)) < 0.5, r.uniform(0.4, 1.0, (n, n)), 0.0)
            np.fill_diagonal(G, 1.0)
            graph = LabelGraph("abcde", np.zeros((n, n)), G, G, _normalize(G), 0.4)
            H = r.standard_normal((n, 3))
            w = r.standard_normal((n, 4))
            params = {"W": Tensor(r.standard_normal((3, 4)), requires_grad=True)}
            if kind == "sage":
                params["W_neigh"] = Tensor(r.standard_normal((3, 4)), requires_grad=True)
            if kind == "gat":
                params["a_src"] = Tensor(r.standard_normal(4), requires_grad=True)
                params["a_dst"] = Tensor(r.standard_normal(4), requires_grad=True)
            Ht = Tensor(H, requires_grad=True)
            params["H"] = Ht

            def loss(kind=kind, params=params, graph=graph, w=w):
                p = params
                if kind == "gcn":
                    out = gcn_layer(p["H"], graph.G_hat, p["W"])
                elif kind == "sage":
                    out = sage_layer(p["H"], graph.G, p["W"], p["W_neigh"])
                else:
                    out = gat_layer(p["H"], graph.G, p["W"], p["a_src"], p["a_dst"])
                return T.weighted_sum(out, w)

            worst = max(worst, param_rel_error(loss, params))
        yield CheckResult(f"gnn/{kind}", worst, PRIMITIVE_TOL)


def _normalize(G):
    from .semantics import normalize_adjacency

    return normalize_adjacency(G)


def signa_block_suite() -> Iterator[CheckResult]:
    for gate in ("sigmoid", "linear"):
        for residual in (True, False):
            r = np.random.default_rng(42)
            config = SignaConfig(heads=2, D=8, C=3, gate_mode=gate, residual=residual)
            params = SignaParams.init(config, r)
            f = Tensor(r.standard_normal((8, 4, 4)), requires_grad=True)
            L = Tensor(r.standard_normal((3, 8)), requires_grad=True)
            w = r.standard_normal((8, 4, 4))
            named = dict(params.named(), f=f, L_s=L)
            err = param_rel_error(lambda: T.weighted_sum(signa_block(f, L, params, config), w), named)
            yield CheckResult(f"signa_block/{gate}{'+residual' if residual else ''}", err, PRIMITIVE_TOL)


def tiny_model(gnn: str = "sage", seed: int = 0):
    labels = ["a", "b", "c"]
    Y = np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1], [1, 0, 0]])
    graph = LabelGraph.from_label_matrix(labels, Y)
    emb = synthetic_embeddings(labels, 4, seed)
    backbone = BackboneConfig(stage_channels=(4, 8, 8, 8), input_shape=(3, 8, 8), num_classes=3)
    signa = SignaConfig(heads=2, insertion_layer=2, gnn=gnn, D=8, C=3)
    return build_model(backbone, signa, graph, emb, seed=seed)


def end_to_end_suite() -> Iterator[CheckResult]:
    r = np.random.default_rng(3)
    x = r.standard_normal((2, 3, 8, 8))
    y = np.array([[1, 0, 1], [0, 1, 1]])
    for gnn in GNN_KINDS:
        model = tiny_model(gnn)
        params = {k: v for k, v in model.params.items() if k.startswith(("signa.", "classifier."))}
        err = param_rel_error(lambda: bce_loss(model.forward(x), y), params)
        yield CheckResult(f"end_to_end/{gnn}", err, END_TO_END_TOL)
    model = tiny_model("sage")
    stage = {k: v for k, v in model.params.items() if k.startswith("stage")}
    yield CheckResult("end_to_end/backbone", param_rel_error(lambda: bce_loss(model.forward(x), y), stage), END_TO_END_TOL)


def run_all(full: bool = True, report: Callable[[str], None] | None = print) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    suites = [primitive_suite(20 if full else 3), gnn_suite(5 if full else 1), signa_block_suite()]
    if full:
        suites.append(end_to_end_suite())
    results = []
    for suite in suites:
        for res in suite:
            results.append(res)
            if report is not None:
                report(res.line())
    return results, time.perf_counter() - start
