"""Component and density sweeps over a shared base config."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from ..errors import ConfigError, CrossLayerError
from ..fusion import iter_presets
from ..model import count_parameters, count_trainable
from ..synth import TASK_KINDS
from .config import RunConfig
from .trainer import build_model, evaluate, train

# name -> fusion overrides applied on top of the base config
COMPONENT_VARIANTS: dict[str, dict] = {
    "baseline": {"mode": "none", "density": ""},
    "AMP-only": {"mode": "cli", "density": "", "amp": True, "agf": False, "full_projector_finetune": False},
    "AGF-only": {"mode": "cli", "density": "", "amp": False, "agf": True, "full_projector_finetune": False},
    "AMP+AGF": {"mode": "cli", "density": "", "amp": True, "agf": True, "full_projector_finetune": False},
    "FullProj": {"mode": "cli", "density": "", "amp": False, "agf": False, "full_projector_finetune": True},
    "FullProj+AGF": {"mode": "cli", "density": "", "amp": False, "agf": True, "full_projector_finetune": True},
}
DENSITY_VARIANTS: dict[str, dict] = {
    name: {"density": name, "amp": True, "agf": True, "full_projector_finetune": False} for name in iter_presets()
}
SWEEPS = {"components": COMPONENT_VARIANTS, "density": DENSITY_VARIANTS}


def variant_config(base: RunConfig, overrides: dict, seed: int | None = None) -> RunConfig:
    cfg = base.copy()
    for key, value in overrides.items():
        setattr(cfg.fusion, key, value)
    if seed is not None:
        cfg.train.seed = seed
    return cfg.validate()


@dataclass
class VariantRow:
    name: str
    accuracy: dict[str, float]  # mean over seeds
    per_seed: list[dict[str, float]]
    parameters: int
    trainable: int
    parameter_ratio: float  # percent of the baseline row
    wall_clock: float
    gate_mean: float | None = None
    gate_std: float | None = None


@dataclass
class AblationReport:
    sweep: str
    seeds: list[int]
    rows: list[VariantRow] = field(default_factory=list)

    def row(self, name: str) -> VariantRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def check_complete(self) -> None:
        names = [r.name for r in self.rows]
        expected = list(SWEEPS[self.sweep])
        if sorted(names) != sorted(expected) or len(set(names)) != len(names):
            raise CrossLayerError(f"incomplete {self.sweep} sweep: have {names}, need {expected}")

    def format(self) -> str:
        head = f"{'variant':<14}" + "".join(f"{k:>15}" for k in TASK_KINDS) + f"{'params':>10}{'ratio':>10}{'gate':>8}{'secs':>8}"
        lines = [head]
        for r in self.rows:
            gate = "-" if r.gate_mean is None else f"{r.gate_mean:.3f}"
            lines.append(
                f"{r.name:<14}"
                + "".join(f"{100 * r.accuracy[k]:>15.2f}" for k in TASK_KINDS)
                + f"{r.parameters:>10}{r.parameter_ratio:>9.2f}%{gate:>8}{r.wall_clock:>8.1f}"
            )
        return "\n".join(lines)


TrainFn = Callable[[RunConfig], object]


def run_ablation(
    base: RunConfig,
    sweep: str = "components",
    seeds: list[int] | tuple[int, ...] = (0,),
    eval_samples: int = 2048,
    eval_seed_start: int | None = None,
    stream: TextIO | None = sys.stderr,
    train_fn: TrainFn | None = None,
) -> AblationReport:
    """Train every variant of ``sweep`` for each seed and evaluate on held-out seeds.

    Variants share the data stream (same seeds) and differ only in fusion
    settings. Parameter ratios are relative to the mode-none baseline built
    from the same model config.
    """
    if sweep not in SWEEPS:
        raise ConfigError(f"sweep must be one of {sorted(SWEEPS)}, got {sweep!r}")
    train_fn = train_fn or (lambda cfg: train(cfg, stream=None))
    start = base.train.test_seed_start if eval_seed_start is None else eval_seed_start
    reference = count_parameters(build_model(variant_config(base, COMPONENT_VARIANTS["baseline"])))

    report = AblationReport(sweep, list(seeds))
    for name, overrides in SWEEPS[sweep].items():
        per_seed, gates, wall = [], [], 0.0
        for seed in seeds:
            cfg = variant_config(base, overrides, seed)
            result = train_fn(cfg)
            wall += result.wall_clock
            accs = {}
            for kind in TASK_KINDS:
                ev = evaluate(result.checkpoint, cfg, kind, eval_samples, start)
                accs[kind] = ev.accuracy
                if ev.trace is not None and len(ev.trace):
                    gates.append(ev.trace.weights())
            per_seed.append(accs)
            if stream is not None:
                print(f"[{sweep}] {name} seed={seed} " + " ".join(f"{k}={v:.4f}" for k, v in accs.items()), file=stream)
        model = build_model(variant_config(base, overrides))
        n = count_parameters(model)
        g = np.concatenate([w.numpy() for w in gates]) if gates else None
        report.rows.append(
            VariantRow(
                name=name,
                accuracy={k: float(np.mean([a[k] for a in per_seed])) for k in TASK_KINDS},
                per_seed=per_seed,
                parameters=n,
                trainable=count_trainable(model),
                parameter_ratio=100.0 * n / reference,
                wall_clock=wall,
                gate_mean=None if g is None else float(g.mean()),
                gate_std=None if g is None else float(g.std()),
            )
        )
    report.check_complete()
    return report
