"""Central finite-difference check of analytic (autograd) gradients."""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
from torch import Tensor

from .errors import ConfigError, DeterminismError


@dataclass
class CoordinateCheck:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float
    trainable: bool


@dataclass
class GradCheckReport:
    tolerance: float
    epsilon: float
    checks: list[CoordinateCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        errs = [c.rel_error for c in self.checks if c.trainable]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def summary(self) -> str:
        n = sum(c.trainable for c in self.checks)
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:.1e} coords={n}"


# Central differences at eps=1e-5 on an O(1) float64 loss resolve gradients to
# a few ulps / (2 eps) ~ 1e-10. Below the floor the check is effectively
# absolute, so exactly-zero gradients do not fail on rounding noise.
REL_FLOOR = 1e-5


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def perturb_parameters(model: torch.nn.Module, scale: float = 0.3, seed: int = 0, skip: str = "vision.") -> None:
    """Add N(0, scale^2 / fan_in) noise in place so zero-initialised tensors get generic values.

    Scaling by fan-in keeps sigmoid gates and softmaxes out of saturation,
    where gradients would shrink below what finite differences can resolve.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if skip and name.startswith(skip):
                continue
            std = scale / math.sqrt(p.shape[-1]) if p.dim() > 1 else scale
            p.add_(std * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def sample_coordinates(
    params: Mapping[str, Tensor],
    n: int,
    groups: Mapping[str, Sequence[str]] | None = None,
    seed: int = 0,
) -> list[tuple[str, int]]:
    """Pick ``n`` (name, flat index) coordinates, round-robin over groups so every group is covered."""
    gen = torch.Generator().manual_seed(seed)
    if groups is None:
        groups = {name: [name] for name in params}
    pools = [list(names) for names in groups.values() if names]
    if not pools:
        raise ConfigError("no parameters to sample")
    coords: list[tuple[str, int]] = []
    seen: set[tuple[str, int]] = set()
    i = 0
    attempts = 0
    while len(coords) < n and attempts < 100 * n:
        pool = pools[i % len(pools)]
        name = pool[int(torch.randint(len(pool), (1,), generator=gen))]
        idx = int(torch.randint(params[name].numel(), (1,), generator=gen))
        if (name, idx) not in seen:
            seen.add((name, idx))
            coords.append((name, idx))
        i += 1
        attempts += 1
    return coords


def grad_check(
    params: Mapping[str, Tensor],
    loss_fn: Callable[[], Tensor],
    coords: Sequence[tuple[str, int]],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = REL_FLOOR,
) -> GradCheckReport:
    """Compare autograd gradients with central differences at ``coords``.

    Parameters with ``requires_grad=False`` are reported with an analytic
    gradient of exactly 0 and do not count toward pass/fail.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ConfigError(f"epsilon {epsilon} outside [1e-6, 1e-4]")
    for name, _ in coords:
        if params[name].dtype != torch.float64:
            raise ConfigError(f"gradient checks need float64 parameters; {name} is {params[name].dtype}")

    for p in params.values():
        p.grad = None
    loss = loss_fn()
    again = loss_fn()
    if not torch.equal(loss.detach(), again.detach()):
        raise DeterminismError(f"loss_fn is not deterministic: {loss.detach().item()} vs {again.detach().item()}")
    loss.backward()

    report = GradCheckReport(tolerance, epsilon)
    with torch.no_grad():
        for name, idx in coords:
            p = params[name]
            flat = p.view(-1)
            trainable = p.requires_grad
            analytic = float(p.grad.view(-1)[idx]) if (trainable and p.grad is not None) else 0.0
            orig = flat[idx].item()
            flat[idx] = orig + epsilon
            f_plus = float(loss_fn())
            flat[idx] = orig - epsilon
            f_minus = float(loss_fn())
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            report.checks.append(
                CoordinateCheck(name, idx, analytic, numeric, relative_error(analytic, numeric, floor), trainable)
            )
    return report
