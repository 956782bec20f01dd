"""Segmentation and adversarial losses.

The generator objective mixes cross-entropy and soft Dice twice over: once
against expert masks (individual-domain term) and once against pseudo masks
transferred from other modalities (domain-transfer term), then blends the
two with ``lam`` so the pseudo supervision stays weak. The discriminator
objective is the four-term binary cross-entropy over expert pairs, pseudo
pairs (treated as real), and generated pairs from both sets.

All losses take probability tensors and plain ndarray targets, and are
differentiable through the tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, clamp, log, select_channel, take_batch
from .errors import NumericalError

EXPERT = "EXPERT"
PSEUDO = "PSEUDO"

PROB_EPS = 1e-7  # probability clamp for logs


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights: beta1/beta2 blend CE with Dice inside the expert and
    pseudo terms, lam blends the two terms."""

    beta1: float = 0.9
    beta2: float = 0.9
    lam: float = 0.9
    dice_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("beta1", "beta2", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def alpha(self) -> float:
        """Alias: the CE/Dice mixing weight under its alternative name."""
        return self.beta1


def _validate_onehot(target: np.ndarray, probs_shape) -> None:
    if target.shape != tuple(probs_shape):
        raise ValueError(f"target shape {target.shape} != probs shape {probs_shape}")
    binary = (target == 0) | (target == 1)
    if not binary.all() or not (target.sum(axis=1) == 1).all():
        raise ValueError("target is not one-hot along the channel axis")


def cross_entropy(probs: Tensor, target_onehot: np.ndarray) -> Tensor:
    """Mean over batch and pixels of -sum_c t_c * log(p_c)."""
    _validate_onehot(target_onehot, probs.shape)
    b, _, h, w = probs.shape
    t = Tensor(target_onehot.astype(probs.data.dtype, copy=False))
    return (log(clamp(probs, PROB_EPS, None)) * t).sum() * (-1.0 / (b * h * w))


def dice_loss(probs: Tensor, target_onehot: np.ndarray,
              epsilon: float = 1e-5) -> Tensor:
    """1 - mean soft Dice over the foreground classes (background excluded).

    Per class: (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), summed over the
    batch and all pixels.
    """
    if target_onehot.shape != tuple(probs.shape):
        raise ValueError(
            f"target shape {target_onehot.shape} != probs shape {probs.shape}")
    n_classes = probs.shape[1]
    fg = range(1, n_classes)
    total = None
    for c in fg:
        p = select_channel(probs, c)
        g = Tensor(target_onehot[:, c].astype(probs.data.dtype, copy=False))
        num = (p * g).sum() * 2.0 + epsilon
        den = p.sum() + float(target_onehot[:, c].sum()) + epsilon
        d = num / den
        total = d if total is None else total + d
    return 1.0 - total * (1.0 / len(fg))


def loss_ID(probs: Tensor, gt_onehot: np.ndarray, w: LossWeights) -> Tensor:
    """Individual-domain loss: beta1 * CE + (1 - beta1) * Dice."""
    return (cross_entropy(probs, gt_onehot) * w.beta1
            + dice_loss(probs, gt_onehot, w.dice_epsilon) * (1.0 - w.beta1))


def loss_DT(probs: Tensor, pseudo_onehot: np.ndarray, w: LossWeights) -> Tensor:
    """Domain-transfer loss: beta2 * CE + (1 - beta2) * Dice, against pseudo
    masks."""
    return (cross_entropy(probs, pseudo_onehot) * w.beta2
            + dice_loss(probs, pseudo_onehot, w.dice_epsilon) * (1.0 - w.beta2))


def loss_G(probs: Tensor, target_onehot: np.ndarray, tags: Sequence[str],
           w: LossWeights) -> Tensor:
    """Generator segmentation loss: lam * L_ID (expert samples) +
    (1 - lam) * L_DT (pseudo samples).

    A batch with only one tag contributes a zero term for the other; the
    weights still apply to the present term.
    """
    tags = list(tags)
    if len(tags) != probs.shape[0]:
        raise ValueError(f"{len(tags)} tags for batch of {probs.shape[0]}")
    if not tags:
        raise ValueError("empty batch")
    expert_idx = [i for i, t in enumerate(tags) if t == EXPERT]
    pseudo_idx = [i for i, t in enumerate(tags) if t == PSEUDO]
    if len(expert_idx) + len(pseudo_idx) != len(tags):
        bad = sorted(set(tags) - {EXPERT, PSEUDO})
        raise ValueError(f"unknown supervision tags: {bad}")

    total = None
    if expert_idx and w.lam > 0.0:
        lid = loss_ID(take_batch(probs, expert_idx), target_onehot[expert_idx], w)
        total = lid * w.lam
    if pseudo_idx and w.lam < 1.0:
        ldt = loss_DT(take_batch(probs, pseudo_idx), target_onehot[pseudo_idx], w)
        term = ldt * (1.0 - w.lam)
        total = term if total is None else total + term
    if total is None:
        total = probs.sum() * 0.0  # keeps the graph differentiable
    return total


def loss_D(d_real_S: Tensor | None, d_real_T: Tensor | None,
           d_fake_S: Tensor | None, d_fake_T: Tensor | None) -> Tensor:
    """Discriminator objective (a value D maximizes):

    E_S[log D(y|x)] + E_T[log D(y'|x')] +
    E_S[log(1 - D(fake|x))] + E_T[log(1 - D(fake|x'))]

    Pseudo-masked pairs count as real. Absent sets contribute nothing.
    """
    groups = [(d_real_S, True), (d_real_T, True), (d_fake_S, False),
              (d_fake_T, False)]
    total = None
    for d, real in groups:
        if d is None:
            continue
        raw = d.data
        if raw.min() <= 0.0 or raw.max() >= 1.0:
            import warnings
            warnings.warn(f"discriminator outputs outside (0,1): "
                          f"range [{raw.min():.3g}, {raw.max():.3g}]")
        inner = d if real else 1.0 - d
        term = log(clamp(inner, PROB_EPS, 1.0 - PROB_EPS)).mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("loss_D needs at least one non-empty group")
    return total


def loss_adv(l_d, l_g):
    """Total adversarial objective: L_D + L_G (min over G, max over D; the
    trainer enforces the roles). Accepts floats or scalar tensors."""
    dv = l_d.item() if isinstance(l_d, Tensor) else float(l_d)
    gv = l_g.item() if isinstance(l_g, Tensor) else float(l_g)
    if not (np.isfinite(dv) and np.isfinite(gv)):
        raise NumericalError(f"non-finite adversarial loss: L_D={dv}, L_G={gv}")
    if isinstance(l_d, Tensor) and isinstance(l_g, Tensor):
        return l_d + l_g
    return dv + gv
