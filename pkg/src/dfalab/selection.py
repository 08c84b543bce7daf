"""Budgeted differentiable feature selection.

At each call the selector draws features one at a time until the budget is
spent: perturb the current logits with Gumbel noise, take a softmax at fixed
temperature, and emit a straight-through one-hot (hard values forward, soft
gradients backward). Already-chosen features are suppressed by subtracting
scale * mask * |logits| from the logits before the next draw, so a feature
is only re-drawn when its penalized logit still wins (possible when the
logit is ~0; duplicates are absorbed by the OR-accumulation and the spent
budget simply shrinks).

The hard mask is the OR of the drawn one-hots and carries the straight-
through gradient; the soft mask is the elementwise max of the relaxations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor, Tape

GUMBEL_CLAMP = 1e-12


@dataclass
class GumbelConfig:
    temperature: float = 1.0
    penalty_scale: float = 100.0
    hard_forward: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class AcquisitionMask:
    """hard: binary-valued [B, F] tensor (straight-through, differentiable);
    soft: [B, F] max of the per-draw relaxations."""

    hard: Tensor
    soft: Tensor

    def popcounts(self) -> np.ndarray:
        return self.hard.value.sum(axis=-1).astype(np.int64)


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    """Map uniform draws to Gumbel(0,1): -log(-log u), u clamped away from {0,1}."""
    u = np.clip(u, GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def sample_gumbel(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """I.i.d. Gumbel(0,1) draws."""
    return gumbel_from_uniform(rng.random(shape))


def gumbel_softmax(logits: Tensor, temperature: float,
                   rng: np.random.Generator | None = None,
                   hard_forward: bool = True,
                   noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One Gumbel-Softmax draw per row of ``logits`` [B, F].

    Returns (one_hot, soft): ``soft`` is softmax((logits + g)/temperature);
    ``one_hot`` has exactly one 1 per row at argmax(soft). With
    ``hard_forward`` the one-hot is a straight-through tensor whose gradient
    is the soft path's; otherwise it is a constant.

    ``noise`` overrides the Gumbel draw (frozen-noise gradient checks and
    per-series noise streams); otherwise ``rng`` must be given.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.isfinite(logits.value).all():
        raise dm.NonFiniteError("gumbel_softmax: non-finite logits")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax: need rng or explicit noise")
        noise = sample_gumbel(rng, logits.shape)
    if noise.shape != logits.shape:
        raise ValueError(f"noise shape {noise.shape} != logits shape {logits.shape}")
    tape = logits.tape
    perturbed = dm.mul(dm.add(logits, tape.leaf(noise)),
                       tape.leaf(1.0 / temperature))
    soft = dm.softmax(perturbed)

    hard_values = np.zeros_like(soft.value)
    rows = np.arange(hard_values.shape[0])
    hard_values[rows, soft.value.argmax(axis=-1)] = 1.0
    if hard_forward:
        # forward takes the hard values, backward the soft relaxation's grad
        one_hot = dm.add(soft, tape.leaf(hard_values - soft.value))
    else:
        one_hot = tape.leaf(hard_values)
    return one_hot, soft


def penalize(logits: Tensor, selected_mask: Tensor,
             scale: float = 100.0) -> Tensor:
    """logits - scale * selected_mask * |logits| (elementwise)."""
    penalty = dm.mul(dm.mul(selected_mask, dm.absolute(logits)),
                     logits.tape.leaf(scale))
    return dm.sub(logits, penalty)


def budgeted_select(logits: Tensor, budget: int, cfg: GumbelConfig,
                    rng: np.random.Generator | None = None,
                    noise: np.ndarray | None = None,
                    accumulate_soft: bool = True,
                    smooth: bool = False) -> AcquisitionMask:
    """Draw up to ``budget`` distinct features per row of ``logits`` [B, F].

    ``noise`` may supply all Gumbel draws as a [B, budget, F] array; the
    i-th draw uses noise[:, i, :]. ``accumulate_soft=False`` skips building
    the max-accumulated soft mask (a forward-only saving for training loops
    that measure through the straight-through hard mask; the gradient path
    is unchanged) and returns the last draw's relaxation in its place.

    ``smooth`` replaces every straight-through one-hot with its soft
    relaxation, including inside the re-selection penalty, so the whole
    selection graph becomes differentiable in the ordinary sense. That is
    the mode finite-difference checks must use (the straight-through
    forward is piecewise constant in the logits by construction); it is a
    diagnostic relaxation, not the acquisition semantics.
    """
    batch, n_features = logits.shape
    if budget < 0:
        raise ValueError(f"budget must be non-negative, got {budget}")
    if budget > n_features:
        raise ValueError(f"budget {budget} exceeds feature count {n_features}")
    tape = logits.tape
    if budget == 0:
        zeros = tape.leaf(np.zeros((batch, n_features)))
        return AcquisitionMask(hard=zeros, soft=zeros)
    if noise is None:
        if rng is None:
            raise ValueError("budgeted_select: need rng or explicit noise")
        noise = sample_gumbel(rng, (batch, budget, n_features))
    if noise.shape != (batch, budget, n_features):
        raise ValueError(f"noise shape {noise.shape} != "
                         f"{(batch, budget, n_features)}")

    hard_acc: Tensor | None = None
    soft_acc: Tensor | None = None
    for i in range(budget):
        cur = logits if hard_acc is None else \
            penalize(logits, hard_acc, cfg.penalty_scale)
        one_hot, soft = gumbel_softmax(cur, cfg.temperature,
                                       hard_forward=cfg.hard_forward and
                                       not smooth,
                                       noise=noise[:, i, :])
        draw = soft if smooth else one_hot
        if hard_acc is None:
            hard_acc, soft_acc = draw, soft
        else:
            # OR, exact on {0,1} and still in [0, 1] for relaxed draws
            hard_acc = dm.sub(dm.add(hard_acc, draw),
                              dm.mul(hard_acc, draw))
            # elementwise max keeps the soft mask in [0, 1]
            soft_acc = dm.add(soft_acc, dm.relu(dm.sub(soft, soft_acc))) \
                if accumulate_soft else soft
    return AcquisitionMask(hard=hard_acc, soft=soft_acc)
