"""Comparator fusion strategies: DeepStack-style additive stacking and
static shallow-layer injection (SLI)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .backbone import DecoderState
from .errors import ConfigError, InjectionShapeError
from .fusion import VisualMask
from .projection import ProjectedFeatureSet


@dataclass(frozen=True)
class DeepStackConfig:
    injection_layers: tuple[int, ...]


@dataclass(frozen=True)
class SliConfig:
    n: int


def deepstack_inject(cfg: DeepStackConfig, h: DecoderState, final_features: Tensor, mask: VisualMask) -> DecoderState:
    """Add the final-layer tokens to the visual rows, ungated.

    The same final-layer map is replicated at every injection point (no
    high-resolution partitioning at this scale).
    """
    if h.layer_index not in cfg.injection_layers:
        return h
    n_vis = mask.popcount
    if final_features.shape[-2] != n_vis:
        raise InjectionShapeError(f"{final_features.shape[-2]} final-layer rows for {n_vis} masked positions")
    hidden = h.hidden
    n = mask.prefix_length
    if n is not None:
        out = torch.cat([hidden[:, :n] + final_features, hidden[:, n:]], dim=1)
    else:
        pos = mask.positions
        out = hidden.clone()
        out[:, pos] = hidden[:, pos] + final_features
    return h.with_hidden(out)


def sli_inject(
    cfg: SliConfig,
    decoder_layer: int,
    h: DecoderState,
    projected: ProjectedFeatureSet,
    mask: VisualMask,
) -> DecoderState:
    """Decoder layer l <= n receives vision layer l only; deeper layers receive nothing."""
    if decoder_layer > cfg.n:
        return h
    if decoder_layer not in projected.indices:
        raise ConfigError(f"SLI needs vision layer {decoder_layer}, projected set has {projected.indices}")
    return deepstack_inject(DeepStackConfig((h.layer_index,)), h, projected.get(decoder_layer), mask)
