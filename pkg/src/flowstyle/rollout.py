"""Inference sampler and the reward-guided fine-tune step.

Sampling integrates the learned ODE with Euler steps from t = 1 (pure noise)
down to t = 0. The reward step follows the gradient-free-rollout recipe: one
standard flow-matching loss on the batch, then a rollout with gradients
disabled down to a random timestep in the fine-tune interval, a single
gradient-enabled velocity evaluation, a one-jump clean-sample prediction
x0_hat = x_t - t * v_hat, decoding, and backprop of the negated style reward.
Only that final evaluation is ever part of the autograd graph, so the graph
size is independent of how long the rollout ran.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from .objectives import (
    LossBreakdown,
    flow_matching_loss,
    reward_weight_at,
    sample_path,
    style_reward_loss,
    total_loss,
)


@dataclass
class RolloutConfig:
    T_steps: int = 8
    t_start: int = 0            # fine-tune interval [t_start, t_end], integer steps
    t_end: int = 2
    seed: int = 0
    one_jump: bool = True       # x0_hat = x_t - t*v (True) vs the single-dt form

    def __post_init__(self):
        if not (0 <= self.t_start <= self.t_end < self.T_steps):
            raise ValueError("need 0 <= t_start <= t_end < T_steps")

    @property
    def dt(self) -> float:
        return 1.0 / self.T_steps


def _init_noise(model, batch: int, generator: Optional[torch.Generator]) -> Tensor:
    g = model.backbone.cfg.grid
    d = model.backbone.cfg.d_latent
    return torch.randn(batch, g, g, d, generator=generator)


@torch.no_grad()
def sample(
    model,
    cond,
    cfg: RolloutConfig,
    batch: int = 1,
    generator: Optional[torch.Generator] = None,
    x_init: Optional[Tensor] = None,
) -> Tensor:
    """Euler-integrate from noise to data and decode; deterministic given the
    generator state (or an explicit initial noise tensor)."""
    if x_init is not None:
        x = x_init.clone()
    else:
        if generator is None:
            generator = torch.Generator().manual_seed(cfg.seed)
        x = _init_noise(model, batch, generator)
    for tau in range(cfg.T_steps, 0, -1):
        v = model.velocity(x, tau / cfg.T_steps, cond)
        x = x - v * cfg.dt
    return model.decode(x)


@torch.no_grad()
def rollout_to(
    model,
    cond,
    t_idx: int,
    cfg: RolloutConfig,
    batch: int = 1,
    generator: Optional[torch.Generator] = None,
    x_init: Optional[Tensor] = None,
) -> Tensor:
    """Gradient-free reverse Euler from t = T down to the integer step t_idx."""
    if x_init is not None:
        x = x_init.clone()
    else:
        x = _init_noise(model, batch, generator)
    for tau in range(cfg.T_steps, t_idx, -1):
        v = model.velocity(x, tau / cfg.T_steps, cond)
        x = x - v * cfg.dt
    return x


def predict_clean(x_t: Tensor, v_hat: Tensor, t_idx: int, cfg: RolloutConfig) -> Tensor:
    """Clean-sample prediction from a single velocity evaluation.

    The one-jump form x0_hat = x_t - (t_idx/T) * v_hat is exact for the true
    velocity under the linear path; the single-dt form x_t - v_hat * dt is the
    literal small-step reading, kept behind the flag for comparison.
    """
    scale = (t_idx / cfg.T_steps) if cfg.one_jump else cfg.dt
    return x_t - scale * v_hat


def flow_loss_on_batch(model, batch: dict, generator: torch.Generator) -> Tensor:
    """Standard flow-matching loss on one batch of (refs, prompt, target)."""
    cond = model.encode_cond(
        batch["prompt_ids"],
        style_imgs=batch.get("style_imgs"),
        content_imgs=batch.get("content_imgs"),
    )
    with torch.no_grad():
        x0 = model.encode_latent(batch["target_imgs"])
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    t = torch.rand(x0.shape[0], generator=generator, dtype=x0.dtype)
    path = sample_path(x0, eps, t)
    v_pred = model.velocity(path.x_t, path.t, cond)
    return flow_matching_loss(v_pred, path)


GRAD_CLIP = 10.0


def _apply_update(model, optimizer: torch.optim.Optimizer, total: Tensor) -> float:
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(
        [p for p in model.parameters() if p.grad is not None], max_norm=GRAD_CLIP
    )
    optimizer.step()
    return float(grad_norm)


def flow_step(
    model,
    batch: dict,
    optimizer: torch.optim.Optimizer,
    step: int,
    reward_start: int,
    generator: torch.Generator,
) -> tuple[LossBreakdown, dict]:
    """Plain pre-training step (reward weight still zero)."""
    l_pre = flow_loss_on_batch(model, batch, generator)
    total, bd = total_loss(l_pre, torch.zeros(()), step, reward_start)
    grad_norm = _apply_update(model, optimizer, total)
    return bd, {"grad_norm": grad_norm}


def reward_step(
    model,
    batch: dict,
    cfg: RolloutConfig,
    optimizer: torch.optim.Optimizer,
    step: int,
    reward_start: int,
    generator: torch.Generator,
    x_t_override: Optional[Tensor] = None,
    t_idx_override: Optional[int] = None,
) -> tuple[LossBreakdown, dict]:
    """One combined objective step with an active reward branch.

    The overrides exist for contract tests (injecting recorded rollout states
    as constants must leave parameter gradients unchanged).
    """
    if reward_weight_at(step, reward_start) != 1:
        raise ValueError("reward_step requires the reward weight to be active")
    if batch.get("style_imgs") is None:
        raise ValueError("reward step requires style reference images")

    l_pre = flow_loss_on_batch(model, batch, generator)

    if t_idx_override is not None:
        t_idx = int(t_idx_override)
    else:
        t_idx = int(
            torch.randint(cfg.t_start, cfg.t_end + 1, (1,), generator=generator).item()
        )

    cond = model.encode_cond(
        batch["prompt_ids"],
        style_imgs=batch.get("style_imgs"),
        content_imgs=batch.get("content_imgs"),
    )
    n = batch["prompt_ids"].shape[0]
    if x_t_override is not None:
        x_t = x_t_override.detach()
    else:
        x_T = _init_noise(model, n, generator)
        x_t = rollout_to(model, cond, t_idx, cfg, batch=n, x_init=x_T)

    v_hat = model.velocity(x_t, t_idx / cfg.T_steps, cond)
    x0_hat = predict_clean(x_t, v_hat, t_idx, cfg)
    decoded = model.decode(x0_hat)
    l_srl = style_reward_loss(decoded, batch["style_imgs"])

    total, bd = total_loss(l_pre, l_srl, step, reward_start)
    grad_norm = _apply_update(model, optimizer, total)
    aux = {
        "t_idx": t_idx,
        "x_t": x_t.detach(),
        "decoded": decoded.detach(),
        "x0_hat": x0_hat.detach(),
        "grad_norm": grad_norm,
    }
    return bd, aux
