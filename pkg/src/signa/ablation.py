"""Single-run orchestration, the one-axis ablation grid and the planted-signal comparison."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attention import SignaConfig
from .data import MultiLabelDataset, default_spec, synthesize_dataset
from .metrics import MetricReport, evaluate
from .model import BackboneConfig, TrainConfig, TrainResult, build_model, predict, train
from .semantics import DEFAULT_Q, EmbeddingMatrix, LabelGraph, synthetic_embeddings

AXES = {"heads": (1, 2, 4, 6, 8), "layer": (1, 2, 3, 4), "gnn": ("gcn", "sage", "gat")}
EMBEDDING_DIM = 300


def width_at(backbone: BackboneConfig, layer: int) -> int:
    """Channel width after stage ``layer`` (1-based), i.e. the D a block inserted there must use."""
    if not 1 <= layer <= len(backbone.stage_channels):
        raise ValueError(f"insertion layer {layer} outside 1..{len(backbone.stage_channels)}")
    return backbone.stage_channels[layer - 1]


def signa_for(backbone: BackboneConfig, num_classes: int, **overrides) -> SignaConfig:
    """SignaConfig with D matched to the chosen insertion layer."""
    layer = overrides.get("insertion_layer", SignaConfig.insertion_layer)
    overrides.setdefault("D", width_at(backbone, layer))
    return SignaConfig(C=num_classes, **overrides)


def graph_from_training(ds: MultiLabelDataset, Q: float = DEFAULT_Q) -> LabelGraph:
    """Co-occurrence graph from training labels only, so test labels never leak into the model."""
    return LabelGraph.from_label_matrix(ds.vocabulary, ds.part("train")[1], Q)


@dataclass
class RunOutcome:
    result: TrainResult
    report: MetricReport
    seconds: float


def train_and_evaluate(ds: MultiLabelDataset, signa: SignaConfig | None, tc: TrainConfig,
                       backbone: BackboneConfig | None = None, embeddings: EmbeddingMatrix | None = None,
                       split: str = "test", progress=None) -> RunOutcome:
    """Train on ``train``, select on ``val``, report on ``split``; model and data order seeded by ``tc.seed``."""
    start = time.perf_counter()
    backbone = backbone or BackboneConfig(input_shape=ds.images.shape[1:], num_classes=len(ds.vocabulary))
    graph = None
    if signa is not None:
        graph = graph_from_training(ds, signa.Q)
        if embeddings is None:
            embeddings = synthetic_embeddings(ds.vocabulary, EMBEDDING_DIM, tc.seed)
    model = build_model(backbone, signa, graph, embeddings, seed=tc.seed)
    tx, ty = ds.part("train")
    vx, vy = ds.part("val")
    res = train(model, tx, ty, vx, vy, tc, progress=progress)
    sx, sy = ds.part(split)
    report = evaluate(predict(res.model, sx), sy, ds.vocabulary)
    return RunOutcome(res, report, time.perf_counter() - start)


@dataclass
class CellResult:
    value: object
    per_seed: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed)) if self.per_seed else float("nan")


@dataclass
class AblationGrid:
    """One axis swept with every other setting at its default."""

    axis: str
    values: tuple = ()
    seeds: tuple[int, ...] = (0, 1, 2)
    results: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {sorted(AXES)}, got {self.axis!r}")
        if not self.values:
            self.values = AXES[self.axis]
        self.values = tuple(self.values)
        self.seeds = tuple(self.seeds)

    def overrides(self, value) -> dict:
        key = {"heads": "heads", "layer": "insertion_layer", "gnn": "gnn"}[self.axis]
        return {key: value}

    def rows(self) -> list[CellResult]:
        return [self.results[v] for v in self.values if v in self.results]


def run_ablation(grid: AblationGrid, ds: MultiLabelDataset, tc: TrainConfig, base: dict | None = None,
                 backbone: BackboneConfig | None = None, report: Callable[[str], None] | None = None) -> AblationGrid:
    """Train one model per (cell, seed) and store test F1_e; a bad cell records its error and the grid moves on."""
    backbone = backbone or BackboneConfig(input_shape=ds.images.shape[1:], num_classes=len(ds.vocabulary))
    base = dict(base or {})
    for value in grid.values:
        cell = CellResult(value)
        grid.results[value] = cell
        try:
            kw = {**base, **grid.overrides(value)}
            if grid.axis == "layer":
                kw.pop("D", None)
            signa = signa_for(backbone, len(ds.vocabulary), **kw)
            for seed in grid.seeds:
                out = train_and_evaluate(ds, signa, dataclasses.replace(tc, seed=seed), backbone)
                cell.per_seed.append(out.report.F1_e)
                if report is not None:
                    report(f"{grid.axis}={value} seed={seed} F1_e={out.report.F1_e:.4f}")
        except (ValueError, RuntimeError) as exc:
            cell.error = str(exc)
            if report is not None:
                report(f"{grid.axis}={value} failed: {exc}")
    return grid


def ablation_table(grid: AblationGrid) -> str:
    """Markdown table: one row per cell, F1_e in percent with per-seed values."""
    lines = [f"| {grid.axis} | mean F1_e | per seed |", "|---|---|---|"]
    for cell in grid.rows():
        if cell.error is not None:
            lines.append(f"| {cell.value} | error | {cell.error} |")
            continue
        seeds = ", ".join(f"{100 * v:.2f}" for v in cell.per_seed)
        lines.append(f"| {cell.value} | {100 * cell.mean:.2f} | {seeds} |")
    return "\n".join(lines) + "\n"


@dataclass
class PlantedOutcome:
    seeds: tuple[int, ...]
    baseline: list[float]
    signa: list[float]
    seconds: float

    @property
    def gain_points(self) -> float:
        return 100 * (float(np.mean(self.signa)) - float(np.mean(self.baseline)))


PLANTED_EPOCHS = 30


def planted_signal_experiment(seeds: Sequence[int] = (0, 1, 2), epochs: int = PLANTED_EPOCHS,
                              report: Callable[[str], None] | None = None) -> PlantedOutcome:
    """Baseline mini-CNN against the default SIGNA model on the default synthetic corpus, per seed."""
    start = time.perf_counter()
    base_f1, signa_f1 = [], []
    for seed in seeds:
        ds = synthesize_dataset(default_spec(seed))
        tc = TrainConfig(epochs=epochs, seed=seed)
        backbone = BackboneConfig(input_shape=ds.images.shape[1:], num_classes=len(ds.vocabulary))
        for name, signa, sink in (("baseline", None, base_f1),
                                  ("signa", signa_for(backbone, len(ds.vocabulary)), signa_f1)):
            out = train_and_evaluate(ds, signa, tc, backbone)
            sink.append(out.report.F1_e)
            if report is not None:
                report(f"seed={seed} {name} F1_e={out.report.F1_e:.4f} ({out.seconds:.0f}s)")
    return PlantedOutcome(tuple(seeds), base_f1, signa_f1, time.perf_counter() - start)
