"""Conditional encoders: semantic style encoder with multi-level projector,
latent image codec (the frozen autoencoder role), and prompt embedder.

The style encoder is a small CNN warm-trained with a style-contrastive
objective on procedural renders, standing in for a pretrained semantic
encoder; the codec is a plain (non-variational) autoencoder with downsample
factor 4 and a 4-channel latent. Both are trained once, then frozen for every
later training stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from . import synthworld as sw

D_MODEL = 64
D_LATENT = 4
LATENT_GRID = sw.CANVAS // 4          # downsample factor 4 -> 8x8
STYLE_TAP_CHANNELS = (16, 32, 64)     # feature maps at 16x16, 8x8, 4x4
TOKENS_PER_TAP = 4                    # 2x2 pooled tokens per tap level


@dataclass
class StyleFeatures:
    """Multi-level semantic feature maps at strictly decreasing resolutions."""
    layers: list[Tensor]              # each (B, C_i, H_i, W_i)
    source_layer_ids: list[int]


@dataclass
class StyleTokens:
    z_s: Tensor                       # (B, n_s, D_MODEL)


@dataclass
class ContentTokens:
    z_c: Tensor                       # (B, n_c, D_MODEL)
    grid_shape: tuple[int, int]


@dataclass
class Latent:
    x: Tensor                         # (B, h, w, D_LATENT)


# =============================================================================
# Style encoder (semantic)
# =============================================================================

class StyleEncoder(nn.Module):
    """Three-block CNN with feature taps after each block."""

    def __init__(self):
        super().__init__()
        c1, c2, c3 = STYLE_TAP_CHANNELS
        self.block1 = nn.Sequential(nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.SiLU())
        self.block2 = nn.Sequential(nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.SiLU())
        self.block3 = nn.Sequential(nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.SiLU())
        # projection head used only during contrastive warm-up
        self.head = nn.Linear(c3, 32)

    def forward(self, img: Tensor) -> StyleFeatures:
        if img.dim() == 3:
            img = img.unsqueeze(0)
        if img.shape[-3:] != (3, sw.CANVAS, sw.CANVAS):
            raise ValueError(f"expected (B,3,{sw.CANVAS},{sw.CANVAS}) image, got {tuple(img.shape)}")
        f1 = self.block1(img)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        return StyleFeatures(layers=[f1, f2, f3], source_layer_ids=[1, 2, 3])

    def embedding(self, img: Tensor) -> Tensor:
        """Pooled contrastive embedding (warm-up objective only)."""
        f3 = self.forward(img).layers[-1]
        return F.normalize(self.head(f3.mean(dim=(2, 3))), dim=1)


def encode_style(encoder: StyleEncoder, img: Tensor) -> StyleFeatures:
    return encoder(img)


# =============================================================================
# Projector variants
# =============================================================================

class HierarchicalProjector(nn.Module):
    """Pool each feature level to 2x2 tokens, project to model width, concat
    in ascending layer order."""

    variant = "hierarchical"

    def __init__(self, tap_channels=STYLE_TAP_CHANNELS, d_model: int = D_MODEL):
        super().__init__()
        self.proj = nn.ModuleList([nn.Linear(c, d_model) for c in tap_channels])

    @property
    def n_tokens(self) -> int:
        return len(self.proj) * TOKENS_PER_TAP

    def forward(self, feats: StyleFeatures) -> StyleTokens:
        outs = []
        for layer, proj in zip(feats.layers, self.proj):
            pooled = F.adaptive_avg_pool2d(layer, 2)                   # (B, C, 2, 2)
            tokens = pooled.flatten(2).transpose(1, 2)                 # (B, 4, C)
            outs.append(proj(tokens))
        return StyleTokens(z_s=torch.cat(outs, dim=1))


class ResamplerProjector(nn.Module):
    """Depth-1 attention resampler over the final feature level: a few learned
    queries cross-attend to the deepest tokens."""

    variant = "resampler"

    def __init__(self, tap_channels=STYLE_TAP_CHANNELS, d_model: int = D_MODEL, n_queries: int = 4):
        super().__init__()
        c = tap_channels[-1]
        self.queries = nn.Parameter(torch.randn(n_queries, d_model) * 0.02)
        self.kv = nn.Linear(c, 2 * d_model)
        self.out = nn.Linear(d_model, d_model)

    @property
    def n_tokens(self) -> int:
        return self.queries.shape[0]

    def forward(self, feats: StyleFeatures) -> StyleTokens:
        deep = feats.layers[-1].flatten(2).transpose(1, 2)             # (B, 16, C)
        k, v = self.kv(deep).chunk(2, dim=-1)
        q = self.queries.unsqueeze(0).expand(deep.shape[0], -1, -1)
        attn = torch.softmax(q @ k.transpose(1, 2) / q.shape[-1] ** 0.5, dim=-1)
        return StyleTokens(z_s=self.out(attn @ v))


class MLPProjector(nn.Module):
    """Depth-1 MLP on the final feature level pooled to 2x2 tokens."""

    variant = "mlp"

    def __init__(self, tap_channels=STYLE_TAP_CHANNELS, d_model: int = D_MODEL):
        super().__init__()
        self.proj = nn.Linear(tap_channels[-1], d_model)

    @property
    def n_tokens(self) -> int:
        return TOKENS_PER_TAP

    def forward(self, feats: StyleFeatures) -> StyleTokens:
        pooled = F.adaptive_avg_pool2d(feats.layers[-1], 2)
        return StyleTokens(z_s=self.proj(pooled.flatten(2).transpose(1, 2)))


PROJECTOR_VARIANTS = {
    "hierarchical": HierarchicalProjector,
    "resampler": ResamplerProjector,
    "mlp": MLPProjector,
}


def make_projector(variant: str) -> nn.Module:
    base = variant.removesuffix("_unfreeze")
    if base not in PROJECTOR_VARIANTS:
        raise ValueError(f"unknown projector variant {variant!r}")
    return PROJECTOR_VARIANTS[base]()


def project_style(projector: nn.Module, feats: StyleFeatures) -> StyleTokens:
    return projector(feats)


# =============================================================================
# Latent image codec (autoencoder)
# =============================================================================

class ImageCodec(nn.Module):
    """Plain autoencoder, downsample 4, 4-channel latent, sigmoid output.

    Latents are affinely normalized (per channel, calibrated once after the
    reconstruction warm-up) so the flow model sees roughly unit-scale data
    matched to its unit-normal noise endpoint.
    """

    def __init__(self):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(3, 48, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(48, 96, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(96, 96, 3, padding=1), nn.SiLU(),
            nn.Conv2d(96, D_LATENT, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(D_LATENT, 96, 1), nn.SiLU(),
            nn.Conv2d(96, 96, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(96, 48, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(48, 24, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(24, 3, 3, padding=1),
        )
        self.register_buffer("latent_shift", torch.zeros(D_LATENT))
        self.register_buffer("latent_scale", torch.ones(D_LATENT))

    def encode_latent(self, img: Tensor) -> Tensor:
        """(B,3,32,32) -> (B, h, w, D_LATENT)."""
        if img.dim() == 3:
            img = img.unsqueeze(0)
        z = self.enc(img).permute(0, 2, 3, 1)
        return (z - self.latent_shift) * self.latent_scale

    def decode(self, x: Tensor) -> Tensor:
        """(B, h, w, D_LATENT) -> (B,3,32,32), values squashed to (0,1)."""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        z = (x / self.latent_scale + self.latent_shift).permute(0, 3, 1, 2)
        return torch.sigmoid(self.dec(z))

    def forward(self, img: Tensor) -> Tensor:
        return self.decode(self.encode_latent(img))

    @torch.no_grad()
    def calibrate_latents(self, imgs: Tensor) -> None:
        self.latent_shift.zero_()
        self.latent_scale.fill_(1.0)
        z = self.encode_latent(imgs)
        self.latent_shift.copy_(z.mean(dim=(0, 1, 2)))
        self.latent_scale.copy_(1.0 / (z.std(dim=(0, 1, 2)) + 1e-6))


def encode_latent(codec: ImageCodec, img: Tensor) -> Latent:
    return Latent(x=codec.encode_latent(img))


def decode(codec: ImageCodec, latent: Latent | Tensor) -> Tensor:
    x = latent.x if isinstance(latent, Latent) else latent
    return codec.decode(x)


# =============================================================================
# Prompt embedder
# =============================================================================

class PromptEmbedder(nn.Module):
    """Fixed (seeded, never trained) token table; row 0 is the null token.

    Stands in for a frozen text encoder: identical prompts embed identically
    and two prompts differing in one slot differ in exactly that row.
    """

    def __init__(self, d_model: int = D_MODEL, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        table = torch.randn(sw.VOCAB_SIZE, d_model, generator=gen) / d_model**0.5
        table[sw.NULL_TOKEN] = 0.0
        self.register_buffer("table", table)

    def forward(self, token_ids: Tensor) -> Tensor:
        """(B, n_text) int64 -> (B, n_text, d_model)."""
        if int(token_ids.max()) >= sw.VOCAB_SIZE or int(token_ids.min()) < 0:
            raise ValueError("token id out of vocabulary range")
        return self.table[token_ids]


def embed_prompt(embedder: PromptEmbedder, prompt: sw.PromptSpec) -> Tensor:
    ids = torch.tensor([list(prompt.token_ids())], dtype=torch.long)
    return embedder(ids)[0]


# =============================================================================
# Warm-up training
# =============================================================================

def _random_spec(rng: np.random.Generator) -> sw.ContentSpec:
    return sw.ContentSpec(
        shape_id=int(rng.integers(sw.N_SHAPES)),
        position=(int(rng.integers(sw.GRID)), int(rng.integers(sw.GRID))),
        scale="small" if rng.random() < 0.5 else "large",
    )


def _random_style(rng: np.random.Generator, include_canonical: bool = True) -> sw.StyleSpec:
    lo = 0 if include_canonical else 1
    return sw.StyleSpec(
        palette_id=int(rng.integers(lo, sw.N_PALETTES)),
        texture_id=int(rng.integers(sw.N_TEXTURES)),
        texture_phase=float(rng.random()),
    )


def render_batch(rng: np.random.Generator, n: int, styled: bool = True) -> Tensor:
    imgs = []
    for _ in range(n):
        spec = _random_spec(rng)
        style = _random_style(rng) if styled else sw.CANONICAL_STYLE
        imgs.append(sw.apply_style(spec, style, int(rng.integers(1 << 31))))
    return torch.from_numpy(np.stack(imgs))


def train_autoencoder(steps: int = 3000, batch: int = 32, lr: float = 2e-3, seed: int = 0) -> ImageCodec:
    """Reconstruction warm-up; the codec is frozen afterwards.

    The loss up-weights pixels that deviate from the per-image median color:
    the subject and texture marks are a small pixel fraction but carry the
    identity the rest of the pipeline depends on.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    codec = ImageCodec()
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr * 0.1)
    for _ in range(steps):
        x = render_batch(rng, batch)
        with torch.no_grad():
            bg = x.reshape(*x.shape[:2], -1).median(dim=2).values[..., None, None]
            weight = 1.0 + 6.0 * (x - bg).abs().amax(dim=1, keepdim=True)
        z = codec.encode_latent(x)
        # mild latent noise: the decoder must stay usable on the imperfect
        # latents a generative model will hand it
        z = z + torch.randn_like(z) * 0.25 * torch.rand(z.shape[0], 1, 1, 1)
        err = (codec.decode(z) - x).abs()
        loss = (weight * err).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    codec.eval()
    codec.calibrate_latents(render_batch(rng, 256))
    return codec


def train_style_encoder(steps: int = 500, batch: int = 16, lr: float = 1e-3, seed: int = 0) -> StyleEncoder:
    """Contrastive warm-up: two renders of the same style (different contents,
    phases, seeds) are positives; everything else in the batch is negative."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    enc = StyleEncoder()
    opt = torch.optim.Adam(enc.parameters(), lr=lr)
    for _ in range(steps):
        views = [[], []]
        for _ in range(batch):
            style = _random_style(rng)
            for v in range(2):
                spec = _random_spec(rng)
                phase = float(rng.random()) if style.texture_id != 0 else style.texture_phase
                s = sw.StyleSpec(style.palette_id, style.texture_id, phase)
                views[v].append(sw.apply_style(spec, s, int(rng.integers(1 << 31))))
        a = enc.embedding(torch.from_numpy(np.stack(views[0])))
        b = enc.embedding(torch.from_numpy(np.stack(views[1])))
        logits = a @ b.t() / 0.1
        labels = torch.arange(batch)
        loss = F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    enc.eval()
    return enc


# =============================================================================
# Checkpoint IO: flat named-tensor containers with a shape header
# =============================================================================

def save_checkpoint(path: Path, module: nn.Module, meta: Optional[dict] = None) -> None:
    state = module.state_dict()
    payload = {
        "format_version": 1,
        "class": type(module).__name__,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state": state,
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path, module: nn.Module) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    expected = {k: list(v.shape) for k, v in module.state_dict().items()}
    if payload["shapes"] != expected:
        raise ValueError(f"checkpoint/architecture shape mismatch for {type(module).__name__}")
    module.load_state_dict(payload["state"])
    return payload.get("meta", {})
