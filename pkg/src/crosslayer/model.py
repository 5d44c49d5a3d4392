"""Full vision-language model: frozen vision encoder, projector, decoder, and
whichever injection strategy the fusion config selects."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .backbone import DecoderLM, DecoderState, InjectionHook, VisionEncoder
from .baselines import DeepStackConfig, SliConfig, deepstack_inject, sli_inject
from .errors import ConfigError
from .fusion import (
    AgfModule,
    GateTrace,
    InjectionPlan,
    VisualMask,
    apply_injection_point,
    build_injection_plan,
    density_plan,
    ungated_injection,
)
from .projection import (
    AdaptiveMultiProjection,
    BaselineProjector,
    DedicatedProjectors,
    FeatureHierarchy,
    ProjectedFeatureSet,
)
from .synth import TaskSpec, Vocab


@dataclass
class ModelConfig:
    vision_layers: int = 8
    vision_dim: int = 32
    vision_heads: int = 4
    grid_rows: int = 4
    grid_cols: int = 4
    num_shapes: int = 4
    num_textures: int = 4
    num_colors: int = 4
    texture_skew: int = 2
    bottleneck_layer: int | None = 4
    decoder_layers: int = 8
    decoder_dim: int = 64
    decoder_heads: int = 4
    vocab_size: int = 64
    question_length: int = 4

    @property
    def task_spec(self) -> TaskSpec:
        return TaskSpec(
            (self.grid_rows, self.grid_cols), self.num_shapes, self.num_textures, self.num_colors, self.texture_skew
        )

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size, self.task_spec)

    @property
    def num_visual_tokens(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class FusionConfig:
    mode: str = "cli"
    vision_stride: int = 4
    decoder_stride: int = 4
    density: str = ""  # named preset; overrides mode and strides when set
    single_k: int | None = None
    sli_n: int | None = None
    amp: bool = True
    agf: bool = True
    full_projector_finetune: bool = False
    lora_rank: int = 4
    lora_alpha: float = 4.0
    probe_heads: int = 2
    vector_gate: bool = False

    def plan(self, model: ModelConfig) -> InjectionPlan:
        if self.density:
            return density_plan(self.density, model.vision_layers, model.decoder_layers)
        return build_injection_plan(
            self.mode,
            model.vision_layers,
            model.decoder_layers,
            vision_stride=self.vision_stride,
            decoder_stride=self.decoder_stride,
            single_k=self.single_k,
            sli_n=self.sli_n,
        )


class CrossLayerVLM(nn.Module):
    """Vision encoder -> projector prefix -> decoder, with injection hooks.

    Trainable groups: the decoder always; the base projector unless an
    adapted (AMP) or dedicated projection is in use; adapters, dedicated
    projectors and gate modules when present. The vision encoder is frozen.
    """

    def __init__(self, model_cfg: ModelConfig | None = None, fusion_cfg: FusionConfig | None = None):
        super().__init__()
        self.model_cfg = mc = model_cfg or ModelConfig()
        self.fusion_cfg = fc = fusion_cfg or FusionConfig()
        mc.vocab.validate()
        if fc.amp and fc.full_projector_finetune:
            raise ConfigError("amp and full_projector_finetune are alternative projections; enable one")
        self.plan = fc.plan(mc)

        self.vision = VisionEncoder(
            num_layers=mc.vision_layers,
            embed_dim=mc.vision_dim,
            num_heads=mc.vision_heads,
            patch_grid=(mc.grid_rows, mc.grid_cols),
            num_shapes=mc.num_shapes,
            num_textures=mc.num_textures,
            num_colors=mc.num_colors,
            detail_bottleneck_layer=mc.bottleneck_layer,
        )
        self.projector = BaselineProjector(mc.vision_dim, mc.decoder_dim)
        self.decoder = DecoderLM(
            num_layers=mc.decoder_layers,
            embed_dim=mc.decoder_dim,
            num_heads=mc.decoder_heads,
            vocab_size=mc.vocab_size,
            max_len=mc.num_visual_tokens + mc.question_length,
        )

        mode = self.plan.mode
        uses_sampled = mode in ("cli", "single_k", "sli") and bool(self.plan.sampled_vision_layers)
        self.amp = None
        self.dedicated = None
        if uses_sampled and fc.full_projector_finetune:
            self.dedicated = DedicatedProjectors(self.plan.sampled_vision_layers, self.projector)
        elif uses_sampled and fc.amp:
            self.amp = AdaptiveMultiProjection(
                self.plan.sampled_vision_layers, mc.vision_dim, mc.decoder_dim, fc.lora_rank, fc.lora_alpha
            )
        self.agf = None
        if mode in ("cli", "single_k") and fc.agf:
            self.agf = nn.ModuleDict(
                {
                    str(layer): AgfModule(layer, mc.decoder_dim, fc.probe_heads, fc.vector_gate)
                    for layer in self.plan.injection_layers
                }
            )

        self.vision.requires_grad_(False)
        if self.amp is not None or self.dedicated is not None:
            self.projector.requires_grad_(False)

        self.mask = VisualMask.prefix(mc.num_visual_tokens, mc.question_length)
        # test/diagnostic switches
        self.gate_override: float | None = None
        self.reverse_injection_order = False

    # -- pieces -----------------------------------------------------------

    def encode(self, patches: Tensor) -> FeatureHierarchy:
        with torch.set_grad_enabled(torch.is_grad_enabled() and any(p.requires_grad for p in self.vision.parameters())):
            return self.vision(patches)

    def project_sampled(self, hier: FeatureHierarchy) -> ProjectedFeatureSet | None:
        sampled = self.plan.sampled_vision_layers
        if not sampled or self.plan.mode in ("none", "deepstack"):
            return None
        sub = hier.select(sampled)
        if self.dedicated is not None:
            return self.dedicated(sub)
        if self.amp is not None:
            return self.amp(self.projector, sub)
        return ProjectedFeatureSet([(k, self.projector(v)) for k, v in sub])

    def hooks(self, prefix: Tensor, projected, trace: GateTrace | None, step: int, batch_offset: int):
        plan, mode = self.plan, self.plan.mode
        mask = self.mask
        hooks = []
        for layer in plan.injection_layers:
            if mode == "deepstack":
                cfg = DeepStackConfig(plan.injection_layers)
                fn = lambda s, cfg=cfg: deepstack_inject(cfg, s, prefix, mask)
            elif mode == "sli":
                cfg = SliConfig(len(plan.injection_layers))
                fn = lambda s, cfg=cfg: sli_inject(cfg, s.layer_index, s, projected, mask)
            elif self.agf is not None:
                agf = self.agf[str(layer)]
                fn = lambda s, agf=agf: apply_injection_point(
                    agf,
                    s,
                    projected,
                    mask,
                    trace,
                    step,
                    batch_offset,
                    gate_override=self.gate_override,
                    reverse=self.reverse_injection_order,
                )
            else:
                fn = lambda s: ungated_injection(s, projected, mask)
            hooks.append(InjectionHook(layer, fn))
        return hooks

    def forward(
        self,
        patches: Tensor,
        text: Tensor,
        trace: GateTrace | None = None,
        step: int = 0,
        batch_offset: int = 0,
    ) -> Tensor:
        hier = self.encode(patches)
        final = hier.get(self.model_cfg.vision_layers)
        prefix = self.projector(final)
        projected = self.project_sampled(hier)
        hooks = self.hooks(prefix, projected, trace, step, batch_offset)
        return self.decoder(prefix, text, hooks, self.mask)

    # -- bookkeeping ------------------------------------------------------

    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names grouped by role (used by gradient checks and reports)."""
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            if name.startswith("amp.") and name.endswith(".A"):
                key = "lora_A"
            elif name.startswith("amp.") and name.endswith(".B"):
                key = "lora_B"
            elif name.startswith("agf.") and name.endswith(".q_v"):
                key = "q_v"
            elif name.startswith("agf.") and name.endswith(".q_h"):
                key = "q_h"
            elif name.startswith("agf.") and "_probe." in name:
                key = "probe_attention"
            elif name.startswith("agf.") and ".gate." in name:
                key = "gate"
            else:
                key = name.split(".", 1)[0]
            groups.setdefault(key, []).append(name)
        return groups


def count_parameters(model: CrossLayerVLM) -> int:
    """Parameters of the model outside the (shared, frozen) vision encoder."""
    return sum(p.numel() for n, p in model.named_parameters() if not n.startswith("vision."))


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
