"""Mini CNN backbone with an optional SIGNA block, training and checkpoints."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import SignaConfig, SignaParams, signa_block
from .metrics import example_based_scores
from .semantics import EmbeddingMatrix, LabelGraph, SemanticEncoder
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SIGNA1"


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 8
    slope: float = T.DEFAULT_SLOPE

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ValueError("stage_channels needs four positive entries")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")


@dataclass
class TrainConfig:
    lr: float = 0.001
    decay: float = 0.1
    decay_every: int = 25
    batch_size: int = 16
    epochs: int = 80
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    bce_epsilon: float = 1e-7
    hflip: float = 0.5
    vflip: float = 0.5

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.decay_every < 1:
            raise ValueError("lr, batch_size, epochs and decay_every must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        k = epoch // self.decay_every
        # divide by the integral inverse when there is one: 0.001 / 10 == 0.0001 exactly
        inv = 1.0 / self.decay
        if inv == round(inv):
            return self.lr / inv**k
        return self.lr * self.decay**k


class Model:
    """Four conv stages, SIGNA spliced after ``signa.insertion_layer``, GAP + affine head."""

    def __init__(self, backbone: BackboneConfig, signa: SignaConfig | None = None,
                 graph: LabelGraph | None = None, embeddings: EmbeddingMatrix | None = None):
        self.backbone = backbone
        self.signa = signa
        self.graph = graph
        self.embeddings = embeddings
        self.params: dict[str, Tensor] = {}
        self.encoder: SemanticEncoder | None = None
        self.signa_params: SignaParams | None = None

    # parameters are registered in a fixed order so checkpoints and optimizers line up
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def semantic_features(self) -> Tensor:
        return self.encoder(self.embeddings.matrix, self.graph)

    def forward(self, batch) -> Tensor:
        x = T.as_tensor(batch)
        cfg = self.backbone
        if x.data.ndim != 4 or tuple(x.shape[1:]) != cfg.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match (B, {cfg.input_shape})")
        L_s = self.semantic_features() if self.signa is not None else None
        for i in range(4):
            p = f"stage{i + 1}."
            x = T.conv2d(x, self.params[p + "weight"], self.params[p + "bias"], stride=2, pad=1)
            x = T.leaky_relu(x, cfg.slope)
            if self.signa is not None and self.signa.insertion_layer == i + 1:
                x = signa_block(x, L_s, self.signa_params, self.signa)
        z = T.global_avg_pool(x)
        return T.affine(z, self.params["classifier.weight"], self.params["classifier.bias"])

    __call__ = forward

    def logits(self, images: np.ndarray, chunk: int = 64) -> np.ndarray:
        out = []
        with T.no_grad():
            for s in range(0, len(images), chunk):
                out.append(self.forward(images[s : s + chunk]).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.backbone.num_classes))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)

    def config_dict(self) -> dict:
        return {
            "backbone": asdict(self.backbone),
            "signa": self.signa.to_dict() if self.signa is not None else None,
        }


def build_model(backbone: BackboneConfig, signa: SignaConfig | None = None, graph: LabelGraph | None = None,
                embeddings: EmbeddingMatrix | None = None, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    model = Model(backbone, signa, graph, embeddings)
    cin = backbone.input_shape[0]
    for i, cout in enumerate(backbone.stage_channels):
        fan_in = cin * 9
        bound = math.sqrt(6.0 / fan_in)
        model.params[f"stage{i + 1}.weight"] = Tensor(rng.uniform(-bound, bound, (cout, cin, 3, 3)), requires_grad=True)
        model.params[f"stage{i + 1}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    if signa is not None:
        if graph is None or embeddings is None:
            raise ValueError("a SIGNA model needs a label graph and embeddings")
        D = backbone.stage_channels[signa.insertion_layer - 1]
        if signa.D != D:
            raise ValueError(f"SIGNA width D={signa.D} does not match stage {signa.insertion_layer} channels ({D})")
        if signa.C != graph.C or backbone.num_classes != graph.C:
            raise ValueError(f"label count mismatch: signa C={signa.C}, graph C={graph.C}, classes={backbone.num_classes}")
        if tuple(embeddings.vocabulary) != tuple(graph.labels):
            raise ValueError("embedding vocabulary order differs from the graph's labels")
        model.encoder = SemanticEncoder.init(signa.gnn, embeddings.dim, D, rng, backbone.slope)
        model.signa_params = SignaParams.init(signa, rng)
        for k, v in model.encoder.params.items():
            model.params[f"signa.encoder.{k}"] = v
        for k, v in model.signa_params.named().items():
            model.params[f"signa.{k}"] = v
    bound = math.sqrt(1.0 / cin)
    model.params["classifier.weight"] = Tensor(rng.uniform(-bound, bound, (backbone.num_classes, cin)), requires_grad=True)
    model.params["classifier.bias"] = Tensor(np.zeros(backbone.num_classes), requires_grad=True)
    return model


def forward(model: Model, batch) -> Tensor:
    return model.forward(batch)


def bce_loss(logits: Tensor, targets, eps: float = 1e-7) -> Tensor:
    return T.bce_with_logits(logits, targets, eps)


def predict(model: Model, batch, threshold: float = 0.5) -> np.ndarray:
    """Binary predictions; a probability exactly at the threshold counts as positive."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    z = model.logits(np.asarray(batch, dtype=np.float64))
    return (T._stable_sigmoid(z) >= threshold).astype(np.int64)


# ------------------------------------------------------------------ Adam


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# --------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_f1_example: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    best_epoch: int
    best_state: dict[str, np.ndarray]
    last_state: dict[str, np.ndarray]
    rng_state: dict = field(default_factory=dict)


class TrainingError(RuntimeError):
    pass


def augment(images: np.ndarray, rng: np.random.Generator, hflip: float, vflip: float) -> np.ndarray:
    out = images.copy()
    for i in range(len(out)):
        if rng.random() < hflip:
            out[i] = out[i][:, :, ::-1]
        if rng.random() < vflip:
            out[i] = out[i][:, ::-1, :]
    return out


def train(model: Model, train_x: np.ndarray, train_y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
          tc: TrainConfig, max_steps: int | None = None, progress=None) -> TrainResult:
    """Adam on clamped BCE with step decay; keeps the parameters of the best validation epoch.

    ``max_steps`` caps the number of optimizer updates (the sanity overfit uses it).
    """
    if len(train_x) == 0 or len(val_x) == 0:
        raise TrainingError("training and validation splits must be non-empty")
    rng = np.random.default_rng(tc.seed)
    opt = Adam(model.params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
    history: list[EpochRecord] = []
    best_f1, best_epoch, best_state = -1.0, 0, model.state_dict()
    steps = 0
    for epoch in range(tc.epochs):
        opt.lr = tc.lr_at(epoch)
        order = rng.permutation(len(train_x))
        total, count = 0.0, 0
        for s in range(0, len(order), tc.batch_size):
            idx = order[s : s + tc.batch_size]
            xb = augment(train_x[idx], rng, tc.hflip, tc.vflip)
            loss = bce_loss(model.forward(xb), train_y[idx], tc.bce_epsilon)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch starting {s}")
            model.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        pred = predict(model, val_x)
        f1 = example_based_scores(pred, val_y, 1)[2]
        rec = EpochRecord(epoch, opt.lr, total / count, f1)
        history.append(rec)
        if progress is not None:
            progress(rec)
        log.info("epoch %d lr %.6g loss %.6f val F1_e %.4f", epoch, rec.lr, rec.train_loss, f1)
        if f1 > best_f1:
            best_f1, best_epoch, best_state = f1, epoch, model.state_dict()
        if max_steps is not None and steps >= max_steps:
            break
    last_state = model.state_dict()
    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, best_state, last_state, rng.bit_generator.state)


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_f1_example"])
        for r in history:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_f1_example)])


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]), float(r["val_f1_example"]))
                for r in csv.DictReader(fh)]


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: Model, epoch: int = 0, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """SIGNA1 container: magic, u64 header length, JSON header, little-endian f64 payloads."""
    tensors = dict(model.state_dict())
    if model.signa is not None:
        tensors["const.graph.N"] = model.graph.N.astype(np.float64)
        tensors["const.embeddings"] = model.embeddings.matrix
    index, offset = [], 0
    for name, arr in tensors.items():
        nbytes = arr.size * 8
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "version": 1,
        "config": model.config_dict(),
        "epoch": epoch,
        "rng_state": rng_state or {},
        "tensors": index,
    }
    if model.signa is not None:
        header["graph"] = {"labels": list(model.graph.labels), "Q": model.graph.Q}
        header["embeddings_source"] = model.embeddings.source
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in tensors.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a SIGNA1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + hlen])
    base = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start : start + e["nbytes"]], dtype="<f8").astype(np.float64)
        tensors[e["name"]] = arr.reshape(e["shape"])
    return header, tensors


def load_checkpoint(path) -> tuple[Model, dict]:
    header, tensors = read_checkpoint(path)
    cfg = header["config"]
    backbone = BackboneConfig(**cfg["backbone"])
    signa = SignaConfig(**cfg["signa"]) if cfg["signa"] is not None else None
    graph = embeddings = None
    if signa is not None:
        labels = header["graph"]["labels"]
        graph = LabelGraph.from_counts(labels, tensors.pop("const.graph.N").astype(np.int64), header["graph"]["Q"])
        embeddings = EmbeddingMatrix(tensors.pop("const.embeddings"), tuple(labels), header["embeddings_source"])
    model = build_model(backbone, signa, graph, embeddings)
    model.load_state_dict(tensors)
    return model, header


def clone_model(model: Model) -> Model:
    other = build_model(copy.deepcopy(model.backbone), copy.deepcopy(model.signa), model.graph, model.embeddings)
    other.load_state_dict(model.state_dict())
    return other
