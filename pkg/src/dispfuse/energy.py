"""Loss terms of the unsupervised fusion objective and their combination.

All terms are masked means over the elements that actually contribute, so
the size of the mask never rescales a term.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .warp import Reconstruction, photometric_region_mask


class ConfigurationError(ValueError):
    pass


class EmptyMaskWarning(RuntimeWarning):
    pass


@dataclass
class EnergyConfig:
    """Scalar hyper-parameters of the objective.

    Any weight may be a ``[start, end]`` pair; :meth:`at` interpolates it
    linearly over training progress.
    """

    theta1: float = 10.0  # photometric
    theta2: float = 0.1  # smoothness
    theta3: float = 0.001  # constraint to the weighted inputs
    theta4: float = 1.0  # adversarial
    alpha: float = 3.0
    beta: float = 650.0
    gamma: float = 5.0
    lambda_gp: float = 10.0
    num_scales: int = 5
    num_inputs: int = 2
    kappa: float = 10.0
    critic_sigmoid: bool = True
    warp: str = "splat"

    RAMPED = ("theta1", "theta2", "theta3", "theta4", "alpha", "beta", "gamma", "lambda_gp")

    def __post_init__(self):
        for name in self.RAMPED:
            v = getattr(self, name)
            lo = min(v) if isinstance(v, (list, tuple)) else v
            if lo < 0:
                raise ConfigurationError(f"energy.{name} must be >= 0, got {v}")
            if isinstance(v, list):
                setattr(self, name, tuple(v))
        if self.num_scales < 1:
            raise ConfigurationError("energy.num_scales must be >= 1")
        if self.num_inputs < 1:
            raise ConfigurationError("energy.num_inputs must be >= 1")
        if self.warp not in ("splat", "sample"):
            raise ConfigurationError(f"energy.warp must be 'splat' or 'sample', got {self.warp!r}")

    def at(self, progress: float) -> EnergyConfig:
        """Concrete config with every ramp evaluated at ``progress`` in [0, 1]."""
        vals = {}
        for name in self.RAMPED:
            v = getattr(self, name)
            if isinstance(v, tuple):
                a, b = v
                v = a + (b - a) * progress
            vals[name] = float(v)
        return dataclasses.replace(self, **vals)


@dataclass
class LossBreakdown:
    l_c: float = 0.0
    l_l1: float = 0.0
    l_sm: float = 0.0
    l_adv_refiner: float = 0.0
    l_critic_per_scale: list = field(default_factory=list)
    gp_per_scale: list = field(default_factory=list)
    total_refiner: float = 0.0
    total_critic: float = 0.0
    refiner_graph: Tensor | None = field(default=None, repr=False, compare=False)
    critic_graph: Tensor | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "l_c": self.l_c,
            "l_l1": self.l_l1,
            "l_sm": self.l_sm,
            "l_adv_refiner": self.l_adv_refiner,
            "l_critic_per_scale": list(self.l_critic_per_scale),
            "gp_per_scale": list(self.gp_per_scale),
            "total_refiner": self.total_refiner,
            "total_critic": self.total_critic,
        }

    def scalars(self) -> dict:
        d = self.to_dict()
        return {k: v for k, v in d.items() if not isinstance(v, list)}


def _masked_mean(values: Tensor, weights: np.ndarray, count: float) -> Tensor:
    return (values * weights).sum() * (1.0 / count)


def _stack_maps(maps, name: str) -> np.ndarray:
    if isinstance(maps, np.ndarray):
        arr = maps
    else:
        maps = list(maps)
        if not maps:
            raise ConfigurationError(f"{name}: at least one map is required")
        arr = np.stack([np.asarray(m, dtype=np.float64) for m in maps], axis=-3)
        # list of (h, w) -> (Z, h, w); list of (b, 1, h, w) -> (b, 1, Z, h, w)
        if arr.ndim == 5:
            arr = arr[:, 0]
    if arr.ndim == 3:
        arr = arr[None]
    return arr


def constraint_loss(refined: Tensor, inputs, confidences, mask) -> Tensor:
    """Confidence-weighted L1 pull of the refined map towards every input.

    Sums ``w_s * |refined - input_s|`` over the Z inputs and averages over
    masked pixels.  With ``w_s = 1/Z`` this is the plain mean distance.
    """
    x = _stack_maps(inputs, "constraint_loss")
    w = _stack_maps(confidences, "constraint_loss")
    if x.shape[1] == 0:
        raise ConfigurationError("constraint_loss: Z must be >= 1")
    if w.shape != x.shape:
        raise ConfigurationError(f"confidences {w.shape} do not match inputs {x.shape}")
    ref = refined if refined.ndim == 4 else refined.reshape(1, 1, *refined.shape[-2:])
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), ref.shape)
    count = m.sum()
    if count == 0:
        warnings.warn("constraint_loss: empty mask", EmptyMaskWarning, stacklevel=2)
        return Tensor(0.0)
    diff = (ref - Tensor(x)).abs()
    return _masked_mean(diff, w * m, count)


def photometric_loss(recon: Reconstruction | Tensor, right, right_grad, alpha: float, mask) -> Tensor:
    """Edge-weighted L1 between real and reconstructed right images.

    ``right_grad`` is the Sobel magnitude of the right image.  When ``recon``
    is a :class:`Reconstruction`, pixels the warp did not cover are excluded.
    """
    if isinstance(recon, Reconstruction):
        region = photometric_region_mask(recon, mask)
        est = recon.image
    else:
        est = recon
        region = np.broadcast_to(np.asarray(mask, dtype=np.float64), est.shape)
    region = np.broadcast_to(region, est.shape)
    count = region.sum()
    if count == 0:
        warnings.warn("photometric_loss: empty effective mask", EmptyMaskWarning, stacklevel=2)
        return Tensor(0.0)
    weight = np.exp(alpha * np.broadcast_to(np.asarray(right_grad, dtype=np.float64), est.shape))
    diff = (Tensor(np.broadcast_to(right, est.shape)) - est).abs()
    return _masked_mean(diff, weight * region, count)


# Neighbour offsets (dy, dx): right, down-right, down-left.  Each unordered
# pair is visited once; the left direction is the right pair of the neighbour.
NEIGHBOURS = ((0, 1), (1, 1), (1, -1))


def _shifted(h: int, w: int, dy: int, dx: int):
    """Slices selecting u and v = u + (dy, dx) where both lie in the frame."""
    ys_u, ys_v = slice(0, h - dy), slice(dy, h)
    if dx >= 0:
        xs_u, xs_v = slice(0, w - dx), slice(dx, w)
    else:
        xs_u, xs_v = slice(-dx, w), slice(0, w + dx)
    return (Ellipsis, ys_u, xs_u), (Ellipsis, ys_v, xs_v)


def smoothness_loss(refined: Tensor, left, beta: float, gamma: float, mask) -> Tensor:
    """Intensity-aware smoothness over right, down-right and down-left pairs."""
    refined = T._lift(refined)
    ref = refined if refined.ndim == 4 else refined.reshape(1, 1, *refined.shape[-2:])
    img = np.broadcast_to(np.asarray(left, dtype=np.float64), ref.shape)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), ref.shape)
    h, w = ref.shape[-2:]
    terms = []
    count = 0.0
    for dy, dx in NEIGHBOURS:
        iu, iv = _shifted(h, w, dy, dx)
        pair = m[iu] * m[iv]
        n = pair.sum()
        if n == 0:
            continue
        weight = np.exp(gamma - beta * np.abs(img[iv] - img[iu])) * pair
        terms.append(((ref[iu] - ref[iv]).abs() * weight).sum())
        count += n
    if count == 0:
        warnings.warn("smoothness_loss: no valid neighbour pairs", EmptyMaskWarning, stacklevel=2)
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / count)


# -- adversarial terms ------------------------------------------------------------

@dataclass
class WGANTerms:
    critic_loss: Tensor
    refiner_adv: Tensor
    gp: Tensor


def critic_scores(heads: Sequence[Tensor]) -> list[Tensor]:
    """Per-sample score of each head: spatial mean of its map, shape (b,)."""
    return [h.mean(axis=tuple(range(1, h.ndim))) for h in heads]


def _heads(critic: Callable, x: Tensor) -> list[Tensor]:
    out = critic(x)
    return list(out) if isinstance(out, (list, tuple)) else [out]


def gradient_penalties(critic: Callable, real_pack: Tensor, fake_pack: Tensor, eps) -> list[Tensor]:
    """``(||d D_i / d I_hat||_2 - 1)^2`` averaged over the batch, one per head.

    Only the last channel (the right image) is interpolated and
    differentiated; the conditioning channels are shared by both packs.
    """
    real = real_pack.data if isinstance(real_pack, Tensor) else np.asarray(real_pack)
    fake = fake_pack.data if isinstance(fake_pack, Tensor) else np.asarray(fake_pack)
    eps = np.asarray(eps, dtype=real.dtype).reshape(-1, 1, 1, 1)
    cond = Tensor(real[:, :-1])
    mixed = Tensor(eps * real[:, -1:] + (1.0 - eps) * fake[:, -1:], requires_grad=True)
    hat = T.concat([cond, mixed], axis=1)
    penalties = []
    for score in critic_scores(_heads(critic, hat)):
        # Samples are independent in this path, so one gradient of the sum
        # gives every per-sample gradient.
        (g,) = T.grad(score.sum(), [mixed], create_graph=True)
        norms = T.l2_norm(g, axis=(1, 2, 3))
        penalties.append(((norms - 1.0) ** 2).mean())
    return penalties


def wgan_losses(
    critic: Callable,
    real_pack: Tensor,
    fake_pack: Tensor,
    lambda_gp: float,
    eps,
    penalty_critic: Callable | None = None,
) -> list[WGANTerms]:
    """WGAN-GP terms for every critic head.

    ``critic(pack)`` returns the list of head maps.  ``penalty_critic`` is
    used on the interpolated pack (defaults to ``critic``); the trainer
    passes the running-statistics form of the network there.  ``eps`` holds
    one interpolation factor per sample.
    """
    real_pack, fake_pack = T._lift(real_pack), T._lift(fake_pack)
    if real_pack.shape != fake_pack.shape:
        raise ConfigurationError(f"real pack {real_pack.shape} and fake pack {fake_pack.shape} differ")
    b = real_pack.shape[0]
    heads = _heads(critic, T.concat([real_pack, fake_pack], axis=0))
    gps = gradient_penalties(penalty_critic or critic, real_pack, fake_pack, eps)
    terms = []
    for score, gp in zip(critic_scores(heads), gps):
        d_real = score[:b].mean()
        d_fake = score[b:].mean()
        terms.append(WGANTerms(d_fake - d_real + gp * lambda_gp, -d_fake, gp))
    return terms


def refiner_adversarial(heads_fake: Sequence[Tensor]) -> list[Tensor]:
    """Refiner side of the adversarial game: ``-mean D_i(fake)`` per head."""
    return [-s.mean() for s in critic_scores(heads_fake)]


def total_objective(
    cfg: EnergyConfig,
    l_l1: Tensor | None = None,
    l_sm: Tensor | None = None,
    l_c: Tensor | None = None,
    refiner_adv: Sequence[Tensor] = (),
    critic_terms: Sequence[WGANTerms] = (),
) -> LossBreakdown:
    """Weighted refiner objective and summed critic objective.

    Refiner: ``theta1*L_L1 + theta2*L_sm + theta3*L_c + theta4*sum_i adv_i``
    with ``adv_i = -mean D_i(fake)``.  Critic: ``sum_i critic_loss_i``.
    """
    zero = Tensor(0.0)
    l_l1 = l_l1 if l_l1 is not None else zero
    l_sm = l_sm if l_sm is not None else zero
    l_c = l_c if l_c is not None else zero
    adv = zero
    for a in refiner_adv:
        adv = adv + a
    refiner = l_l1 * cfg.theta1 + l_sm * cfg.theta2 + l_c * cfg.theta3 + adv * cfg.theta4
    critic = zero
    for t in critic_terms:
        critic = critic + t.critic_loss
    return LossBreakdown(
        l_c=float(l_c.data),
        l_l1=float(l_l1.data),
        l_sm=float(l_sm.data),
        l_adv_refiner=float(adv.data),
        l_critic_per_scale=[float(t.critic_loss.data) for t in critic_terms],
        gp_per_scale=[float(t.gp.data) for t in critic_terms],
        total_refiner=float(refiner.data),
        total_critic=float(critic.data),
        refiner_graph=refiner,
        critic_graph=critic,
    )


def is_finite(breakdown: LossBreakdown) -> tuple[bool, str | None]:
    for key, val in breakdown.to_dict().items():
        vals = val if isinstance(val, list) else [val]
        if any(not math.isfinite(v) for v in vals):
            return False, key
    return True, None
