"""Vision-to-language projection: the baseline two-layer MLP and the
adaptive multi-projection that adds one low-rank adapter per sampled layer."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Iterator, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError


@dataclass
class FeatureHierarchy:
    """Per-layer visual token maps, keyed by 1-indexed vision layer."""

    layers: list[tuple[int, Tensor]]

    def __post_init__(self):
        idx = [k for k, _ in self.layers]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError(f"hierarchy layer indices must be strictly ascending, got {idx}")
        shapes = {tuple(v.shape[-2:]) for _, v in self.layers}
        if len(shapes) > 1:
            raise ConfigError(f"hierarchy layers disagree on (N_i, D_i): {sorted(shapes)}")

    @property
    def indices(self) -> list[int]:
        return [k for k, _ in self.layers]

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[tuple[int, Tensor]]:
        return iter(self.layers)

    def get(self, k: int) -> Tensor:
        for idx, v in self.layers:
            if idx == k:
                return v
        raise ConfigError(f"vision layer {k} not present (have {self.indices})")

    def select(self, indices) -> "FeatureHierarchy":
        return type(self)([(k, self.get(k)) for k in indices])


class ProjectedFeatureSet(FeatureHierarchy):
    """Language-space token maps, same indices and order as the source hierarchy."""


class BaselineProjector(nn.Module):
    """Two-layer GELU MLP from vision width to decoder width."""

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int | None = None):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim or out_dim)
        self.fc2 = nn.Linear(hidden_dim or out_dim, out_dim)

    def forward(self, v: Tensor) -> Tensor:
        if v.shape[-1] != self.in_dim:
            raise ConfigError(f"projector expects {self.in_dim} input features, got {v.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(v)))


def project_baseline(p: BaselineProjector, v: Tensor) -> Tensor:
    return p(v)


class LoraAdapter(nn.Module):
    """Low-rank delta ``(alpha / rank) * (v @ A) @ B`` for one vision layer.

    ``B`` starts at zero, so a fresh adapter contributes nothing.
    """

    def __init__(self, vision_layer: int, in_dim: int, out_dim: int, rank: int = 4, alpha: float | None = None):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
        self.vision_layer = vision_layer
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        bound = 1.0 / math.sqrt(in_dim)
        self.A = nn.Parameter(torch.empty(in_dim, rank).uniform_(-bound, bound))
        self.B = nn.Parameter(torch.zeros(rank, out_dim))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, v: Tensor) -> Tensor:
        return lora_delta(self, v)


def lora_delta(adapter: LoraAdapter, v: Tensor) -> Tensor:
    if v.shape[-1] != adapter.A.shape[0]:
        raise ConfigError(
            f"adapter for layer {adapter.vision_layer} expects {adapter.A.shape[0]} features, got {v.shape[-1]}"
        )
    if adapter.A.shape[1] != adapter.B.shape[0]:
        raise ConfigError("adapter A/B inner dimensions disagree")
    return adapter.scale * ((v @ adapter.A) @ adapter.B)


def project_adaptive(
    p: BaselineProjector,
    adapters: Mapping[int, LoraAdapter] | list[LoraAdapter],
    h: FeatureHierarchy,
) -> ProjectedFeatureSet:
    """V_hat_k = MLP(V_k) + LoRA_k(V_k) for every layer k in ``h``."""
    if not isinstance(adapters, Mapping):
        adapters = {a.vision_layer: a for a in adapters}
    missing = [k for k in h.indices if k not in adapters]
    if missing:
        raise ConfigError(f"no adapter for sampled vision layers {missing}")
    out = []
    for k, v in h:
        if p.out_dim != adapters[k].B.shape[1]:
            raise ConfigError(f"adapter for layer {k} emits {adapters[k].B.shape[1]} features, projector {p.out_dim}")
        out.append((k, project_baseline(p, v) + lora_delta(adapters[k], v)))
    return ProjectedFeatureSet(out)


class AdaptiveMultiProjection(nn.Module):
    """One adapter per sampled vision layer; the base projector is passed in, not owned."""

    def __init__(self, vision_layers, in_dim: int, out_dim: int, rank: int = 4, alpha: float | None = None):
        super().__init__()
        self.adapters = nn.ModuleDict(
            {str(k): LoraAdapter(k, in_dim, out_dim, rank, alpha) for k in vision_layers}
        )

    def by_layer(self) -> dict[int, LoraAdapter]:
        return {int(k): a for k, a in self.adapters.items()}

    def forward(self, base: BaselineProjector, h: FeatureHierarchy) -> ProjectedFeatureSet:
        return project_adaptive(base, self.by_layer(), h)


class DedicatedProjectors(nn.Module):
    """Full fine-tuning variant: an independent copy of the base MLP per sampled layer."""

    def __init__(self, vision_layers, base: BaselineProjector):
        super().__init__()
        self.projectors = nn.ModuleDict({str(k): copy.deepcopy(base) for k in vision_layers})

    def forward(self, h: FeatureHierarchy) -> ProjectedFeatureSet:
        missing = [k for k in h.indices if str(k) not in self.projectors]
        if missing:
            raise ConfigError(f"no dedicated projector for vision layers {missing}")
        return ProjectedFeatureSet([(k, self.projectors[str(k)](v)) for k, v in h])
