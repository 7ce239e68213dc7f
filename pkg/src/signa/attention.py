"""Semantic interleaving channel attention.

A feature map f (D x w x h, optionally batched) is squeezed to Z, each head
interleaves Z with the label features L_s into a D x D mixing matrix M_s,
mixes an affine copy of Z through it, and the heads are fused into one
weighting vector that rescales the channels of f.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .semantics import DEFAULT_Q, GNN_KINDS
from .tensor import ShapeError, Tensor

GATE_MODES = ("sigmoid", "linear")


@dataclass
class SignaConfig:
    heads: int = 6
    insertion_layer: int = 2
    gnn: str = "sage"
    Q: float = DEFAULT_Q
    D: int = 32
    C: int = 8
    gate_mode: str = "sigmoid"
    residual: bool = True

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be positive")
        if not 1 <= self.insertion_layer <= 4:
            raise ValueError("insertion_layer must be in 1..4")
        if self.gnn not in GNN_KINDS:
            raise ValueError(f"gnn must be one of {GNN_KINDS}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}")
        if self.D < 2 or self.C < 1:
            raise ValueError("need D >= 2 and C >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SignaHeadParams:
    A: Tensor  # (D*C, D)
    b: Tensor  # (D*C,)
    V: Tensor  # (D, D)
    c: Tensor  # (D,)

    @classmethod
    def init(cls, C: int, D: int, rng: np.random.Generator) -> "SignaHeadParams":
        bound = np.sqrt(1.0 / D)
        u = lambda *s: Tensor(rng.uniform(-bound, bound, size=s), requires_grad=True)  # noqa: E731
        return cls(u(D * C, D), u(D * C), u(D, D), u(D))

    def check(self, C: int, D: int) -> None:
        want = {"A": (D * C, D), "b": (D * C,), "V": (D, D), "c": (D,)}
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"head parameter {name} has shape {getattr(self, name).shape}, expected {shape}")


@dataclass
class FuseParams:
    F: Tensor  # (D, N*D)
    g: Tensor  # (D,)

    @classmethod
    def init(cls, N: int, D: int, rng: np.random.Generator) -> "FuseParams":
        bound = np.sqrt(1.0 / (N * D))
        return cls(
            Tensor(rng.uniform(-bound, bound, size=(D, N * D)), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, size=D), requires_grad=True),
        )


@dataclass
class SignaParams:
    heads: list[SignaHeadParams]
    fuse: FuseParams

    @classmethod
    def init(cls, config: SignaConfig, rng: np.random.Generator) -> "SignaParams":
        heads = [SignaHeadParams.init(config.C, config.D, rng) for _ in range(config.heads)]
        return cls(heads, FuseParams.init(config.heads, config.D, rng))

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, h in enumerate(self.heads):
            for k in ("A", "b", "V", "c"):
                out[f"head{i}.{k}"] = getattr(h, k)
        out["fuse.F"] = self.fuse.F
        out["fuse.g"] = self.fuse.g
        return out


def squeeze_channels(f: Tensor) -> Tensor:
    return T.global_avg_pool(f)


def interleave_logits(Z: Tensor, L_s: Tensor, params: SignaHeadParams) -> Tensor:
    """Z_s @ L_s where Z_s is the row-major D x C reshape of A Z + b; label order cannot change a bit."""
    Z, L_s = T.as_tensor(Z), T.as_tensor(L_s)
    C, D = L_s.shape
    if Z.shape[-1] != D:
        raise ShapeError(f"squeezed features {Z.shape} do not match L_s {L_s.shape}")
    params.check(C, D)
    Zs = T.reshape(T.affine(Z, params.A, params.b), Z.shape[:-1] + (D, C))
    return T.matmul_ordered(Zs, L_s)


def interleave(Z: Tensor, L_s: Tensor, params: SignaHeadParams) -> Tensor:
    """M_s = softmax_rows(reshape(A Z + b) @ L_s), shape (D, D) or (B, D, D)."""
    return T.softmax_rows(interleave_logits(Z, L_s, params))


def attention_head(Z: Tensor, L_s: Tensor, params: SignaHeadParams) -> Tensor:
    """Z_w = M_s @ (V Z + c)."""
    Z = T.as_tensor(Z)
    M = interleave(Z, L_s, params)
    Zv = T.affine(Z, params.V, params.c)
    D = Z.shape[-1]
    Zw = T.matmul(M, T.reshape(Zv, Z.shape[:-1] + (D, 1)))
    return T.reshape(Zw, Z.shape)


def multi_head_fuse(head_outputs: list[Tensor], fuse: FuseParams) -> Tensor:
    if not head_outputs:
        raise ShapeError("need at least one head output")
    D = fuse.F.shape[0]
    if fuse.F.shape[1] != len(head_outputs) * D:
        raise ShapeError(f"fusion expects {fuse.F.shape[1] // D} heads, got {len(head_outputs)}")
    if any(h.shape[-1] != D for h in head_outputs):
        raise ShapeError(f"head outputs must have length {D}")
    return T.affine(T.concat(head_outputs), fuse.F, fuse.g)


def apply_weighting(f: Tensor, w_logits: Tensor, config: SignaConfig) -> Tensor:
    f, w_logits = T.as_tensor(f), T.as_tensor(w_logits)
    if f.shape[:-2] != w_logits.shape:
        raise ShapeError(f"weights {w_logits.shape} do not match map {f.shape}")
    gate = T.sigmoid(w_logits) if config.gate_mode == "sigmoid" else w_logits
    out = T.channel_scale(f, gate)
    return T.add(out, f) if config.residual else out


def signa_block(f: Tensor, L_s: Tensor, params: SignaParams, config: SignaConfig) -> Tensor:
    Z = squeeze_channels(f)
    heads = [attention_head(Z, L_s, h) for h in params.heads]
    return apply_weighting(f, multi_head_fuse(heads, params.fuse), config)
