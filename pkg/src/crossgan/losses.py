"""Adversarial and cycle-consistency objectives."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 20.0
    d_slowdown: float = 0.5
    gan_mode: str = "lsgan"  # or "bce"
    identity_weight: float = 0.0

    def __post_init__(self):
        if not self.lambda_cycle > 0:
            raise ValueError("lambda_cycle must be > 0")
        if not 0 < self.d_slowdown <= 1:
            raise ValueError("d_slowdown must lie in (0, 1]")
        if self.gan_mode not in ("lsgan", "bce"):
            raise ValueError(f"unknown gan_mode {self.gan_mode!r}")
        if self.identity_weight < 0:
            raise ValueError("identity_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _scores(scores) -> torch.Tensor:
    if isinstance(scores, torch.Tensor):
        s = scores.reshape(-1)
    else:
        scores = list(scores)
        if not scores:
            raise ValueError("empty score list")
        s = torch.cat([torch.as_tensor(v, dtype=torch.float64 if not isinstance(v, torch.Tensor) else None).reshape(-1)
                       for v in scores])
    if s.numel() == 0:
        raise ValueError("empty score list")
    return s


def _against(s: torch.Tensor, target: float, mode: str) -> torch.Tensor:
    t = torch.full_like(s, target)
    if mode == "bce":
        return F.binary_cross_entropy_with_logits(s, t)
    return ((s - t) ** 2).mean()


def adv_loss_generator(fake_scores, mode: str = "lsgan") -> torch.Tensor:
    """Generator side: push discriminator scores on fakes toward 1."""
    return _against(_scores(fake_scores), 1.0, mode)


def adv_loss_discriminator(real_scores, fake_scores, w: LossWeights = LossWeights()) -> torch.Tensor:
    """``d_slowdown * (MSE(real, 1) + MSE(fake, 0))``."""
    real = _against(_scores(real_scores), 1.0, w.gan_mode)
    fake = _against(_scores(fake_scores), 0.0, w.gan_mode)
    return w.d_slowdown * (real + fake)


def cycle_loss(original: torch.Tensor, reconstructed: torch.Tensor, w: LossWeights = LossWeights()) -> torch.Tensor:
    original = torch.as_tensor(original)
    reconstructed = torch.as_tensor(reconstructed)
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    return w.lambda_cycle * (original - reconstructed).abs().mean()


@dataclass
class LossBreakdown:
    total: float
    terms: dict[str, float] = field(default_factory=dict)


def _item(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_generator_loss(adv_terms: Sequence, cycle_terms: Sequence, names: Sequence[str] | None = None):
    """Sum adversarial and (already weighted) cycle terms.

    Returns ``(total, breakdown)``; ``total`` keeps autograd history when
    the terms are tensors.
    """
    terms = list(adv_terms) + list(cycle_terms)
    if names is None:
        names = [f"adv_{i}" for i in range(len(adv_terms))] + [f"cycle_{i}" for i in range(len(cycle_terms))]
    total = 0.0
    for t in terms:
        total = total + t
    breakdown = LossBreakdown(total=_item(total), terms={n: _item(t) for n, t in zip(names, terms)})
    return total, breakdown
