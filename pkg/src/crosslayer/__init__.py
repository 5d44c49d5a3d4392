"""Cross-layer injection of hierarchical vision features into a toy decoder."""

from .backbone import DecoderLM, DecoderState, InjectionHook, VisionEncoder, decoder_forward, vision_encode
from .baselines import DeepStackConfig, SliConfig, deepstack_inject, sli_inject
from .fusion import (
    AgfModule,
    GateTrace,
    InjectionPlan,
    VisualMask,
    apply_injection_point,
    attend_probe,
    build_injection_plan,
    density_plan,
    gate_weight,
    gated_update,
)
from .gradcheck import grad_check
from .losses import cross_entropy_loss
from .model import CrossLayerVLM, FusionConfig, ModelConfig
from .projection import (
    BaselineProjector,
    FeatureHierarchy,
    LoraAdapter,
    ProjectedFeatureSet,
    lora_delta,
    project_adaptive,
    project_baseline,
)
from .synth import QuerySample, SyntheticImage, TaskSpec, Vocab, generate_sample, theoretical_floor

__version__ = "0.1.0"
