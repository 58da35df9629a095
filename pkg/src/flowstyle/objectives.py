"""Training objectives: flow-matching path supervision, the differentiable
style descriptor and reward, and the combined loss with its step schedule.

The interpolation path uses coefficients alpha_t = 1 - t and sigma_t = t, so
x_t = (1 - t) * x0 + t * eps and the regression target is eps - x0. The
identity x_t - t * (eps - x0) = x0 holds exactly and is what the one-jump
clean-sample prediction in the reward loop relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
from torch import Tensor

ImageLike = Union[np.ndarray, Tensor]

# --- style descriptor constants (calibrated on the procedural style grid) ---
_COLOR_CENTERS = 4            # per channel; 4^3 = 64 soft bins
_COLOR_SIGMA = 0.11
_N_ORIENT = 6                 # gradient-orientation bins over [0, pi)
_ORIENT_POWER = 6             # angular kernel sharpness ((1+cos 2dtheta)/2)^p
_ENERGY_FLOOR = 6.0e-2        # saliency floor separating texture from bare edges


def _as_image_tensor(img: ImageLike) -> Tensor:
    t = torch.as_tensor(img) if not isinstance(img, Tensor) else img
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[1] != 3:
        raise ValueError(f"expected (3,H,W) or (B,3,H,W) image, got {tuple(t.shape)}")
    return t.float() if not t.dtype.is_floating_point else t


def _color_histogram(img: Tensor) -> Tensor:
    """Soft Gaussian-kernel color histogram, (B, 64)."""
    b = img.shape[0]
    px = img.reshape(b, 3, -1).transpose(1, 2)                     # (B, P, 3)
    grid = torch.linspace(0.125, 0.875, _COLOR_CENTERS, dtype=img.dtype, device=img.device)
    centers = torch.stack(torch.meshgrid(grid, grid, grid, indexing="ij"), dim=-1)
    centers = centers.reshape(-1, 3)                               # (64, 3)
    d2 = (px.unsqueeze(2) - centers.unsqueeze(0).unsqueeze(0)).pow(2).sum(-1)
    return torch.exp(-d2 / (2.0 * _COLOR_SIGMA**2)).mean(dim=1)    # (B, 64)


def _orientation_bins(img: Tensor) -> Tensor:
    """Orientation-binned gradient energy at one scale, (B, 6).

    Each pixel's squared gradient magnitude is soft-assigned to orientation
    bins with the doubled-angle kernel ((1 + cos 2(theta - theta_k)) / 2)^p,
    expressed through cos 2theta / sin 2theta ratios so no atan2 is needed
    and the map stays differentiable everywhere (including zero gradients).
    """
    gx = img[..., :, 1:] - img[..., :, :-1]
    gy = img[..., 1:, :] - img[..., :-1, :]
    gx = torch.nn.functional.pad(gx, (0, 1, 0, 0))
    gy = torch.nn.functional.pad(gy, (0, 0, 0, 1))
    m2 = gx * gx + gy * gy
    denom = m2 + 1e-8
    cos2 = (gx * gx - gy * gy) / denom
    sin2 = 2.0 * gx * gy / denom
    theta = torch.arange(_N_ORIENT, dtype=img.dtype, device=img.device) * (torch.pi / _N_ORIENT)
    affinity = (1.0 + cos2.unsqueeze(-1) * torch.cos(2 * theta) + sin2.unsqueeze(-1) * torch.sin(2 * theta)) / 2.0
    weights = affinity.clamp_min(0.0).pow(_ORIENT_POWER)           # (B,3,H,W,K)
    return (m2.unsqueeze(-1) * weights).mean(dim=(1, 2, 3))        # (B, K)


def _orientation_energy(img: Tensor) -> Tensor:
    """Two-scale gradient-orientation energy histogram, (B, 12).

    The second scale (3x3 box blur, stride 1, so it stays shift-invariant)
    keeps coarse textures alive while fine-period textures average away, so
    textures that share orientations still separate on the scale axis.
    """
    fine = _orientation_bins(img)
    coarse = _orientation_bins(torch.nn.functional.avg_pool2d(img, 3, stride=1))
    return torch.cat([fine, coarse], dim=1)


def style_descriptor(img: ImageLike) -> Tensor:
    """Unit-norm style descriptor: soft color histogram concatenated with a
    saliency-scaled gradient-orientation energy histogram.

    Differentiable w.r.t. the image. An all-black (all-zero) input has no
    usable statistics and maps to the first basis vector by convention.
    """
    t = _as_image_tensor(img)
    squeeze = not (isinstance(img, Tensor) and img.dim() == 4) and t.shape[0] == 1
    hist = _color_histogram(t)
    hist = hist / (hist.norm(dim=1, keepdim=True) + 1e-12)
    energy = _orientation_energy(t)
    total = energy.sum(dim=1, keepdim=True)
    saliency = total / (total + _ENERGY_FLOOR)
    orient = saliency * energy / (energy.norm(dim=1, keepdim=True) + 1e-12)
    desc = torch.cat([hist, orient], dim=1)
    desc = desc / (desc.norm(dim=1, keepdim=True) + 1e-12)

    degenerate = t.reshape(t.shape[0], -1).abs().amax(dim=1) <= 0
    if bool(degenerate.any()):
        fallback = torch.zeros_like(desc)
        fallback[:, 0] = 1.0
        desc = torch.where(degenerate.unsqueeze(1), fallback, desc)
    return desc.squeeze(0) if squeeze else desc


def style_cosine(a: ImageLike, b: ImageLike) -> Tensor:
    da = style_descriptor(_as_image_tensor(a))
    db = style_descriptor(_as_image_tensor(b))
    return (da * db).sum(dim=1).squeeze()


# =============================================================================
# Flow-matching path
# =============================================================================

@dataclass
class PathSample:
    x0: Tensor
    eps: Tensor
    t: Tensor          # scalar or (B,) in [0, 1]
    x_t: Tensor
    v_target: Tensor


def _expand_t(t: Tensor, like: Tensor) -> Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    while t.dim() < like.dim():
        t = t.unsqueeze(-1)
    return t


def sample_path(x0: Tensor, eps: Tensor, t) -> PathSample:
    """Interpolate x_t = (1 - t) x0 + t eps with target velocity eps - x0."""
    t = torch.as_tensor(t, dtype=x0.dtype, device=x0.device)
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise ValueError("t must lie in [0, 1]")
    te = _expand_t(t, x0)
    x_t = (1.0 - te) * x0 + te * eps
    return PathSample(x0=x0, eps=eps, t=t, x_t=x_t, v_target=eps - x0)


def recover_x0(x_t: Tensor, v: Tensor, t) -> Tensor:
    """One-jump clean-sample recovery: x0 = x_t - t * v (exact for the true v)."""
    return x_t - _expand_t(torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device), x_t) * v


def flow_matching_loss(v_pred: Tensor, sample: PathSample, w_t: float = 1.0) -> Tensor:
    if v_pred.shape != sample.v_target.shape:
        raise ValueError(f"shape mismatch: {tuple(v_pred.shape)} vs {tuple(sample.v_target.shape)}")
    return w_t * (v_pred - sample.v_target).pow(2).mean()


# =============================================================================
# Style reward
# =============================================================================

def reward_score(img: ImageLike, style_ref: ImageLike) -> Tensor:
    """Style similarity in [-1, 1]: cosine between style descriptors.

    Differentiable w.r.t. `img`; the reference descriptor carries no gradient.
    """
    d_img = style_descriptor(_as_image_tensor(img))
    with torch.no_grad():
        d_ref = style_descriptor(_as_image_tensor(style_ref))
    return (d_img * d_ref).sum(dim=1)


def style_reward_loss(decoded_img: ImageLike, style_ref: ImageLike) -> Tensor:
    """Per-batch reward loss: mean of the negated reward scores."""
    return -reward_score(decoded_img, style_ref).mean()


# =============================================================================
# Combined objective
# =============================================================================

@dataclass
class LossBreakdown:
    flow_loss: float
    reward_loss: float
    reward_weight: int          # 0 before the activation step, 1 after
    step: int
    total: float


def reward_weight_at(step: int, reward_start: int) -> int:
    return 0 if step < reward_start else 1


def total_loss(flow_loss: Tensor, reward_loss: Tensor, step: int, reward_start: int) -> tuple[Tensor, LossBreakdown]:
    """Combine the flow loss and reward loss under the step schedule.

    The NaN guard runs on both terms regardless of the schedule: a NaN reward
    loss is rejected even while its weight is still zero.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    for name, val in (("flow", flow_loss), ("reward", reward_loss)):
        if bool(torch.isnan(torch.as_tensor(val)).any()):
            raise FloatingPointError(f"{name} loss is NaN at step {step}")
    lam = reward_weight_at(step, reward_start)
    total = flow_loss + lam * reward_loss
    bd = LossBreakdown(
        flow_loss=float(torch.as_tensor(flow_loss).detach()),
        reward_loss=float(torch.as_tensor(reward_loss).detach()),
        reward_weight=lam,
        step=step,
        total=float(torch.as_tensor(total).detach()),
    )
    return total, bd
