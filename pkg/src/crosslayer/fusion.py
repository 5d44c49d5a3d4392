"""Adaptive gating fusion and the many-to-many injection plan."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import torch
from torch import Tensor, nn

from .backbone import DecoderState
from .errors import ConfigError, EmptyTokensError, InjectionShapeError
from .projection import ProjectedFeatureSet


@dataclass(frozen=True)
class VisualMask:
    flags: Tensor  # bool, one entry per sequence position

    @classmethod
    def prefix(cls, n_visual: int, n_text: int) -> "VisualMask":
        flags = torch.zeros(n_visual + n_text, dtype=torch.bool)
        flags[:n_visual] = True
        return cls(flags)

    @property
    def popcount(self) -> int:
        return int(self.flags.sum())

    @property
    def positions(self) -> Tensor:
        return self.flags.nonzero().flatten()

    @property
    def prefix_length(self) -> int | None:
        """Number of visual positions if they form a leading block, else None."""
        n = self.popcount
        return n if bool(self.flags[:n].all()) else None


class ProbeAttention(nn.Module):
    """Multi-head attention with a single query row and no positional terms."""

    def __init__(self, dim: int, num_heads: int = 2):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"probe width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)


def attend_probe(query: Tensor, tokens: Tensor, params: ProbeAttention) -> Tensor:
    """Attend from one query vector over ``tokens`` (batch, M, D); returns (batch, D)."""
    if tokens.dim() == 2:
        tokens = tokens.unsqueeze(0)
    B, M, D = tokens.shape
    if M == 0:
        raise EmptyTokensError("probe attention over zero tokens")
    H = params.num_heads
    dh = D // H
    q = params.wq(query).reshape(-1, H, dh)  # (1 or B, H, dh)
    k = params.wk(tokens).view(B, M, H, dh)
    v = params.wv(tokens).view(B, M, H, dh)
    scores = torch.einsum("bhd,bmhd->bhm", q.expand(B, H, dh), k) / math.sqrt(dh)
    att = scores.softmax(dim=-1)
    out = torch.einsum("bhm,bmhd->bhd", att, v).reshape(B, D)
    return params.wo(out)


class AgfModule(nn.Module):
    """Gate for one injection point: two probes plus a linear+sigmoid controller."""

    def __init__(self, decoder_layer: int, dim: int, probe_heads: int = 2, vector_gate: bool = False):
        super().__init__()
        self.decoder_layer = decoder_layer
        self.vector_gate = vector_gate
        self.q_v = nn.Parameter(torch.empty(dim).uniform_(-1.0, 1.0))
        self.q_h = nn.Parameter(torch.empty(dim).uniform_(-1.0, 1.0))
        self.visual_probe = ProbeAttention(dim, probe_heads)
        self.hidden_probe = ProbeAttention(dim, probe_heads)
        self.gate = nn.Linear(2 * dim, dim if vector_gate else 1)

    @property
    def gate_w(self) -> Tensor:
        return self.gate.weight

    @property
    def gate_b(self) -> Tensor:
        return self.gate.bias


def gate_weight(agf: AgfModule, v_att: Tensor, h_att: Tensor) -> Tensor:
    """sigmoid(gate_w . [v_att; h_att] + gate_b); shape (batch,) for the scalar gate."""
    if v_att.shape[-1] != h_att.shape[-1] or 2 * v_att.shape[-1] != agf.gate.in_features:
        raise ConfigError(f"gate inputs of width {v_att.shape[-1]}/{h_att.shape[-1]} do not match controller")
    w = torch.sigmoid(agf.gate(torch.cat([v_att, h_att], dim=-1)))
    return w if agf.vector_gate else w.squeeze(-1)


def gated_update(h, v_hat: Tensor, W, mask: VisualMask):
    """h' = h * (1 - mask) + (h * mask + W * v_hat), v_hat scattered onto the visual rows.

    Accepts a DecoderState or a raw (batch, S, D) tensor and returns the same kind.
    """
    hidden = h.hidden if isinstance(h, DecoderState) else h
    n_vis = mask.popcount
    if v_hat.shape[-2] != n_vis:
        raise InjectionShapeError(f"{v_hat.shape[-2]} visual feature rows for {n_vis} masked positions")
    if mask.flags.numel() != hidden.shape[-2]:
        raise InjectionShapeError(f"mask length {mask.flags.numel()} != sequence length {hidden.shape[-2]}")
    if not torch.is_tensor(W):
        W = torch.tensor(float(W), dtype=hidden.dtype)
    if W.dim() == 0:
        Wb = W
    elif W.dim() == 1:
        Wb = W.view(-1, 1, 1)
    else:
        Wb = W.unsqueeze(-2)

    n_prefix = mask.prefix_length
    if n_prefix is not None:
        out = torch.cat([hidden[:, :n_prefix] + Wb * v_hat, hidden[:, n_prefix:]], dim=1)
    else:
        pos = mask.positions
        out = hidden.clone()
        out[:, pos] = hidden[:, pos] + Wb * v_hat
    return h.with_hidden(out) if isinstance(h, DecoderState) else out


class GateTrace:
    """Append-only record of gate weights."""

    def __init__(self):
        self._chunks: list[tuple[int, int, int, int, Tensor]] = []

    def record(self, decoder_layer: int, vision_layer: int, W: Tensor, step: int = 0, batch_offset: int = 0) -> None:
        w = W.detach()
        if w.dim() == 2:  # vector gate: summarise by its mean over channels
            w = w.mean(dim=-1)
        self._chunks.append((decoder_layer, vision_layer, step, batch_offset, w.reshape(-1).double().cpu()))

    def __len__(self) -> int:
        return sum(c[4].numel() for c in self._chunks)

    def __iter__(self):
        for dl, vl, step, off, w in self._chunks:
            for i, value in enumerate(w.tolist()):
                yield GateRecord(dl, vl, off + i, step, value)

    @property
    def entries(self) -> list["GateRecord"]:
        return list(self)

    def weights(self) -> Tensor:
        if not self._chunks:
            return torch.empty(0, dtype=torch.float64)
        return torch.cat([c[4] for c in self._chunks])

    def means(self) -> dict[tuple[int, int], float]:
        sums: dict[tuple[int, int], list[float]] = {}
        for dl, vl, _, _, w in self._chunks:
            acc = sums.setdefault((dl, vl), [0.0, 0])
            acc[0] += float(w.sum())
            acc[1] += w.numel()
        return {key: s / n for key, (s, n) in sorted(sums.items())}


@dataclass(frozen=True)
class GateRecord:
    decoder_layer: int
    vision_layer: int
    batch_index: int
    step: int
    weight: float


def apply_injection_point(
    agf: AgfModule,
    h: DecoderState,
    projected: ProjectedFeatureSet,
    mask: VisualMask,
    trace: GateTrace | None = None,
    step: int = 0,
    batch_offset: int = 0,
    gate_override: float | None = None,
    reverse: bool = False,
) -> DecoderState:
    """Fold every projected layer into the hidden state, one gated update at a time.

    Layers are visited in ascending vision-layer order, so the gate for layer
    k sees a hidden state already updated by the layers before it.
    ``reverse`` flips the visiting order (used to check sequential semantics).
    """
    if len(projected) == 0:
        raise ConfigError("injection point received an empty projected feature set")
    items = list(projected)
    if reverse:
        items.reverse()
    state = h
    for k, v_hat in items:
        if gate_override is None:
            v_att = attend_probe(agf.q_v, v_hat, agf.visual_probe)
            h_att = attend_probe(agf.q_h, state.hidden, agf.hidden_probe)
            W = gate_weight(agf, v_att, h_att)
        else:
            W = torch.full((state.hidden.shape[0],), float(gate_override), dtype=state.hidden.dtype)
        if trace is not None:
            trace.record(agf.decoder_layer, k, W, step, batch_offset)
        state = gated_update(state, v_hat, W, mask)
    return state


def ungated_injection(h: DecoderState, projected: ProjectedFeatureSet, mask: VisualMask) -> DecoderState:
    """Plain addition of every projected layer at the visual rows (no gate)."""
    state = h
    for _, v_hat in projected:
        state = gated_update(state, v_hat, 1.0, mask)
    return state


MODES = ("cli", "deepstack", "sli", "none", "single_k")


@dataclass(frozen=True)
class InjectionPlan:
    mode: str
    decoder_stride: int
    vision_stride: int
    injection_layers: tuple[int, ...]
    sampled_vision_layers: tuple[int, ...]

    @property
    def cells(self) -> int:
        """Gate evaluations per batch item in one forward pass."""
        if self.mode == "sli":
            return len(self.injection_layers)
        return len(self.injection_layers) * len(self.sampled_vision_layers)


def _multiples(stride: int, depth: int) -> tuple[int, ...]:
    return tuple(range(stride, depth + 1, stride))


def build_injection_plan(
    mode: str,
    vision_layers: int,
    decoder_layers: int,
    vision_stride: int = 4,
    decoder_stride: int = 4,
    single_k: int | None = None,
    sli_n: int | None = None,
) -> InjectionPlan:
    """Layers are 1-indexed from the input side; stride s picks s, 2s, ...."""
    if mode not in MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {MODES}")
    if vision_stride < 1 or decoder_stride < 1:
        raise ConfigError("strides must be >= 1")
    injection = _multiples(decoder_stride, decoder_layers)
    if mode == "none":
        return InjectionPlan(mode, decoder_stride, vision_stride, (), ())
    if mode == "sli":
        n = 0 if sli_n is None else sli_n
        if not 0 <= n <= min(vision_layers, decoder_layers):
            raise ConfigError(f"SLI n={n} exceeds min(vision, decoder) depth")
        wired = tuple(range(1, n + 1))
        return InjectionPlan(mode, 1, 1, wired, wired)
    if mode == "deepstack":
        sampled = (vision_layers,)
    elif mode == "single_k":
        if single_k is None or not 1 <= single_k <= vision_layers:
            raise ConfigError(f"single_k={single_k} outside [1, {vision_layers}]")
        sampled = (single_k,)
    else:
        sampled = _multiples(vision_stride, vision_layers)
    if not sampled:
        raise ConfigError(f"vision stride {vision_stride} samples no layer of a {vision_layers}-layer encoder")
    if not injection:
        raise ConfigError(f"decoder stride {decoder_stride} selects no layer of a {decoder_layers}-layer decoder")
    return InjectionPlan(mode, decoder_stride, vision_stride, injection, sampled)


# Density presets named "vision_stride/decoder_stride" at reference depths
# of a 28-layer encoder and a 24-layer decoder.
REFERENCE_VISION_DEPTH = 28
REFERENCE_DECODER_DEPTH = 24
REFERENCE_DECODER_STRIDE = 4
DENSITY_PRESETS: dict[str, tuple[int, int]] = {
    "2/2": (2, 2),
    "4/4": (4, 4),
    "8/7": (8, 7),
    "12/14": (12, 14),
}
SINGLE_PRESETS: dict[str, int] = {"single-14": 14}


def scale_stride(stride: int, reference_depth: int, depth: int) -> int:
    """Stride giving a shallower stack the same fraction of sampled layers."""
    if depth == reference_depth:
        return stride
    count = reference_depth // stride
    scaled = max(1, math.floor(count * depth / reference_depth + 0.5))
    return max(1, depth // scaled)


def density_plan(name: str, vision_layers: int, decoder_layers: int) -> InjectionPlan:
    if name in DENSITY_PRESETS:
        vs, ds = DENSITY_PRESETS[name]
        return build_injection_plan(
            "cli",
            vision_layers,
            decoder_layers,
            vision_stride=scale_stride(vs, REFERENCE_VISION_DEPTH, vision_layers),
            decoder_stride=scale_stride(ds, REFERENCE_DECODER_DEPTH, decoder_layers),
        )
    if name in SINGLE_PRESETS:
        k = SINGLE_PRESETS[name]
        if vision_layers != REFERENCE_VISION_DEPTH:
            k = max(1, min(vision_layers, math.floor(k * vision_layers / REFERENCE_VISION_DEPTH + 0.5)))
        return build_injection_plan(
            "single_k",
            vision_layers,
            decoder_layers,
            decoder_stride=scale_stride(REFERENCE_DECODER_STRIDE, REFERENCE_DECODER_DEPTH, decoder_layers),
            single_k=k,
        )
    raise ConfigError(f"unknown density preset {name!r}")


def iter_presets() -> Iterable[str]:
    yield from DENSITY_PRESETS
    yield from SINGLE_PRESETS
