"""Masked next-token cross entropy."""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import ConfigError, EmptySupervisionError


def cross_entropy_loss(logits: Tensor, targets: Tensor, answer_mask: Tensor) -> Tensor:
    """Mean negative log-likelihood over the positions flagged in ``answer_mask``.

    ``logits`` is (..., S, V); ``targets`` and ``answer_mask`` are (..., S).
    Gradients with respect to ``logits`` come from autograd.
    """
    if targets.shape != logits.shape[:-1] or answer_mask.shape != targets.shape:
        raise ConfigError(
            f"targets {tuple(targets.shape)} / mask {tuple(answer_mask.shape)} do not match logits {tuple(logits.shape)}"
        )
    mask = answer_mask.bool()
    count = int(mask.sum())
    if count == 0:
        raise EmptySupervisionError("answer_mask selects no positions")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll[mask].sum() / count
