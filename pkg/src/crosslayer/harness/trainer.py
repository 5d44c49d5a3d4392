"""Deterministic trainer and evaluator."""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np
import torch

from ..errors import ConfigError, LeakageError, NumericalError
from ..fusion import GateTrace
from ..losses import cross_entropy_loss
from ..model import CrossLayerVLM
from ..synth import TASK_KINDS, Batch, make_batch
from .checkpoint import Checkpoint
from .config import RunConfig

METRIC_KEYS = {"detail": "acc_detail", "semantic": "acc_semantic", "compositional": "acc_comp"}


def dtype_of(config: RunConfig) -> torch.dtype:
    return torch.float64 if config.train.precision == "float64" else torch.float32


def build_model(config: RunConfig) -> CrossLayerVLM:
    torch.manual_seed(config.train.seed)
    model = CrossLayerVLM(config.model, config.fusion)
    return model.to(dtype_of(config))


def training_batch(config: RunConfig, step: int) -> Batch:
    t = config.train
    kinds_rng = np.random.default_rng([t.seed, step])
    weights = np.array(list(t.mixture.values()), dtype=np.float64)
    kinds = kinds_rng.choice(len(TASK_KINDS), size=t.batch_size, p=weights / weights.sum())
    start = t.train_seed_start + step * t.batch_size
    return make_batch(range(start, start + t.batch_size), [TASK_KINDS[k] for k in kinds], config.model.vocab)


def check_disjoint(config: RunConfig, eval_range: range) -> None:
    train = config.train.train_seed_range
    if len(train) and len(eval_range) and eval_range.start < train.stop and train.start < eval_range.stop:
        raise LeakageError(
            f"evaluation seeds [{eval_range.start}, {eval_range.stop}) overlap training seeds "
            f"[{train.start}, {train.stop})"
        )


@dataclass
class EvalResult:
    task_kind: str
    accuracy: float
    n_samples: int
    trace: GateTrace | None = None


def evaluate(
    model: CrossLayerVLM | Checkpoint,
    config: RunConfig | None,
    task_kind: str,
    n_samples: int,
    seed_start: int,
    batch_size: int = 512,
    record_gates: bool = True,
    check_leakage: bool = True,
) -> EvalResult:
    """Exact-match accuracy of greedy decoding restricted to the task's answer tokens."""
    if isinstance(model, Checkpoint):
        config = config or model.config
        model = model.build_model()
    if config is None:
        raise ConfigError("evaluate needs a run config")
    if task_kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {task_kind!r}")
    if check_leakage:
        check_disjoint(config, range(seed_start, seed_start + n_samples))
    vocab = config.model.vocab
    candidates = torch.tensor(list(vocab.answer_tokens(task_kind)))
    n_vis = config.model.num_visual_tokens
    trace = GateTrace() if (record_gates and model.agf is not None) else None
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for bi, start in enumerate(range(0, n_samples, batch_size)):
            stop = min(start + batch_size, n_samples)
            batch = make_batch(range(seed_start + start, seed_start + stop), [task_kind] * (stop - start), vocab)
            logits = model(batch.patches, batch.text, trace=trace, step=bi, batch_offset=start)
            last = logits[:, n_vis:][batch.answer_mask]  # one answer position per sample
            pred = candidates[last[:, candidates].argmax(-1)]
            correct += int((pred == batch.answers).sum())
    model.train(was_training)
    return EvalResult(task_kind, correct / n_samples, n_samples, trace)


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best validation score
    final: Checkpoint
    metrics: list[dict] = field(default_factory=list)
    lines: list[str] = field(default_factory=list)
    wall_clock: float = 0.0


def format_metrics(step: int, loss: float, accs: dict[str, float]) -> str:
    parts = [f"step={step}", f"loss={loss:.6f}"]
    parts += [f"{METRIC_KEYS[k]}={accs[k]:.4f}" for k in TASK_KINDS]
    return " ".join(parts)


def _make_optimizer(config: RunConfig, params):
    t = config.train
    if t.optimizer == "sgd":
        return torch.optim.SGD(params, lr=t.lr, momentum=t.momentum)
    return torch.optim.Adam(params, lr=t.lr)


def train(config: RunConfig, stream: TextIO | None = sys.stdout, init: Checkpoint | None = None) -> TrainResult:
    """Train with a fixed step budget, logging validation accuracy every ``eval_every`` steps.

    Given the same config and seed the metric lines are identical run to run.
    """
    config = config.copy().validate()
    t = config.train
    val_range = range(t.val_seed_start, t.val_seed_start + t.eval_samples)
    check_disjoint(config, val_range)
    torch.use_deterministic_algorithms(True)
    started = time.perf_counter()

    model = build_model(config)
    if init is not None:
        model.load_state_dict(init.state, strict=False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = _make_optimizer(config, params)
    n_vis = config.model.num_visual_tokens

    result_lines: list[str] = []
    metrics: list[dict] = []
    best: tuple[float, Checkpoint] | None = None
    last_good = Checkpoint.from_model(model, config, 0)
    losses: list[float] = []

    def log(step: int) -> None:
        nonlocal best, last_good
        accs = {
            k: evaluate(model, config, k, t.eval_samples, t.val_seed_start, record_gates=False).accuracy
            for k in TASK_KINDS
        }
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        losses.clear()
        line = format_metrics(step, mean_loss, accs)
        result_lines.append(line)
        metrics.append({"step": step, "loss": mean_loss, **accs})
        if stream is not None:
            print(line, file=stream, flush=True)
        ckpt = Checkpoint.from_model(model, config, step)
        last_good = ckpt
        score = float(np.mean(list(accs.values())))
        if best is None or score > best[0]:
            best = (score, ckpt)

    if t.steps == 0:
        log(0)
    model.train()
    for step in range(1, t.steps + 1):
        batch = training_batch(config, step - 1)
        try:
            logits = model(batch.patches, batch.text)
        except NumericalError as exc:
            raise NumericalError(f"step {step}: {exc}", checkpoint=last_good) from exc
        loss = cross_entropy_loss(logits[:, n_vis:], batch.targets, batch.answer_mask)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericalError(f"step {step}: loss is {value}", checkpoint=last_good)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if t.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, t.grad_clip)
        opt.step()
        losses.append(value)
        if step % t.eval_every == 0 or step == t.steps:
            log(step)

    final = Checkpoint.from_model(model, config, t.steps)
    return TrainResult(best[1], final, metrics, result_lines, time.perf_counter() - started)
