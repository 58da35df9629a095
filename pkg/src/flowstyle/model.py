"""The assembled customization model: frozen perceptual encoders feeding an
in-context velocity transformer, with a switchable style route.

The normal ("disentangled") wiring sends style references through the
semantic encoder + projector and content references through the latent codec.
The single-codec wiring (ablation) routes style references through the codec
as well, behind a dedicated alignment projection; an instrumentation field
records which route produced the last style tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from . import synthworld as sw
from .backbone import ArchConfig, TokenSequence, VelocityBackbone, assign_positions, build_sequence
from .encoders import (
    D_LATENT,
    D_MODEL,
    ImageCodec,
    PromptEmbedder,
    StyleEncoder,
    make_projector,
)

STYLE_ROUTES = ("semantic", "codec")


@dataclass
class EncodedCond:
    """Reference tokens computed once per sample/step and reused across the
    whole rollout (the references do not change along the ODE path)."""
    text: Tensor                          # (B, n_text, d)
    style: Optional[Tensor] = None        # (B, n_s, d)
    content: Optional[Tensor] = None      # (B, n_c, d)


class CustomizationModel(nn.Module):
    def __init__(
        self,
        arch: Optional[ArchConfig] = None,
        projector_variant: str = "hierarchical",
        style_route: str = "semantic",
    ):
        super().__init__()
        if style_route not in STYLE_ROUTES:
            raise ValueError(f"unknown style route {style_route!r}")
        self.arch = arch or ArchConfig()
        self.projector_variant = projector_variant
        self.style_route = style_route
        self.style_encoder = StyleEncoder()
        self.projector = make_projector(projector_variant)
        self.codec = ImageCodec()
        self.prompts = PromptEmbedder(self.arch.d_model)
        self.backbone = VelocityBackbone(self.arch)
        # alignment projection for the single-codec style route
        self.style_in = nn.Linear(D_LATENT, self.arch.d_model)
        self.last_style_route: Optional[str] = None

    # --- reference encoding -------------------------------------------------

    def text_tokens(self, prompt_ids: Tensor) -> Tensor:
        return self.prompts(prompt_ids)

    def style_tokens(self, style_imgs: Tensor) -> Tensor:
        if self.style_route == "semantic":
            self.last_style_route = "semantic"
            return self.projector(self.style_encoder(style_imgs)).z_s
        self.last_style_route = "codec"
        lat = self.codec.encode_latent(style_imgs)
        b, h, w, _ = lat.shape
        return self.style_in(lat.reshape(b, h * w, -1))

    def content_tokens(self, content_imgs: Tensor) -> Tensor:
        lat = self.codec.encode_latent(content_imgs)
        return self.backbone.embed_content(lat)

    def encode_cond(
        self,
        prompt_ids: Tensor,
        style_imgs: Optional[Tensor] = None,
        content_imgs: Optional[Tensor] = None,
    ) -> EncodedCond:
        return EncodedCond(
            text=self.text_tokens(prompt_ids),
            style=self.style_tokens(style_imgs) if style_imgs is not None else None,
            content=self.content_tokens(content_imgs) if content_imgs is not None else None,
        )

    # --- latent codec passthrough -------------------------------------------

    def encode_latent(self, imgs: Tensor) -> Tensor:
        return self.codec.encode_latent(imgs)

    def decode(self, latents: Tensor) -> Tensor:
        return self.codec.decode(latents)

    # --- velocity -----------------------------------------------------------

    def sequence_for(self, x_t: Tensor, cond: EncodedCond) -> TokenSequence:
        seq = build_sequence(
            text=cond.text,
            noisy=self.backbone.embed_noisy(x_t),
            style=cond.style,
            content=cond.content,
            grid=(x_t.shape[1], x_t.shape[2]),
        )
        return assign_positions(seq)

    def velocity(self, x_t: Tensor, t: Tensor | float, cond: EncodedCond) -> Tensor:
        return self.backbone.predict_velocity(self.sequence_for(x_t, cond), t)

    # --- parameter groups (freeze policy) ------------------------------------

    def alignment_group(self) -> str:
        """Name prefix of the style-alignment parameters for the active route."""
        return "projector." if self.style_route == "semantic" else "style_in."

    # --- checkpointing --------------------------------------------------------

    def save(self, path: Path, extra_meta: Optional[dict] = None) -> None:
        from .encoders import save_checkpoint

        meta = {
            "arch": self.arch.to_dict(),
            "projector_variant": self.projector_variant,
            "style_route": self.style_route,
        }
        meta.update(extra_meta or {})
        save_checkpoint(Path(path), self, meta)

    @classmethod
    def load(cls, path: Path) -> tuple["CustomizationModel", dict]:
        from .encoders import load_checkpoint

        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
        meta = payload.get("meta", {})
        model = cls(
            arch=ArchConfig(**meta["arch"]),
            projector_variant=meta.get("projector_variant", "hierarchical"),
            style_route=meta.get("style_route", "semantic"),
        )
        load_checkpoint(Path(path), model)
        model.eval()
        return model, meta


def prompt_ids_tensor(prompts: list[sw.PromptSpec]) -> Tensor:
    return torch.tensor([list(p.token_ids()) for p in prompts], dtype=torch.long)
