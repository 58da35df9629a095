"""Procedural content/style world: renderer, stylization experts, triplet curation.

The world is a 32x32 RGB canvas with a 4x4 grid of 8x8 cells. A ContentSpec
places one shape in one cell at one of two scales; a StyleSpec selects a
color palette and a background texture. Rendering is an exact pure function
of (spec, seed), so the "stylization expert" and "de-stylization expert" are
ground-truth procedures rather than learned approximations, and the curation
filter can be validated against them analytically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

CANVAS = 32
GRID = 4                      # position grid is GRID x GRID cells
CELL = CANVAS // GRID
NOISE_AMP = 0.03              # seeded luminance jitter on every render

SHAPE_NAMES = ("circle", "square", "triangle", "cross", "diamond")
N_SHAPES = len(SHAPE_NAMES)

TEXTURE_NAMES = ("flat", "hatch", "dots", "stripes")
N_TEXTURES = len(TEXTURE_NAMES)

# (background, foreground) RGB pairs. Backgrounds are chosen far apart so the
# soft color histogram separates palettes; palette 0 is the canonical
# "photoreal" gray world used by the de-stylized domain.
PALETTES = (
    ((0.15, 0.15, 0.15), (0.85, 0.85, 0.85)),   # canonical grays
    ((0.90, 0.87, 0.70), (0.60, 0.10, 0.10)),   # cream / dark red
    ((0.10, 0.15, 0.42), (0.92, 0.78, 0.15)),   # navy / gold
    ((0.13, 0.42, 0.17), (0.95, 0.93, 0.88)),   # forest / white
    ((0.55, 0.12, 0.12), (0.95, 0.85, 0.40)),   # brick / sand
    ((0.88, 0.60, 0.15), (0.15, 0.12, 0.35)),   # orange / indigo
    ((0.35, 0.12, 0.45), (0.95, 0.72, 0.92)),   # plum / pink
    ((0.12, 0.55, 0.58), (0.92, 0.95, 0.90)),   # teal / offwhite
)
N_PALETTES = len(PALETTES)

SCALE_RADIUS = {"small": 3.6, "large": 6.4}

# Prompt vocabulary: 0 is the reserved null token, then shape words,
# position words (row-major), style words (one per palette).
NULL_TOKEN = 0
SHAPE_TOKEN_BASE = 1
POSITION_TOKEN_BASE = SHAPE_TOKEN_BASE + N_SHAPES
STYLE_TOKEN_BASE = POSITION_TOKEN_BASE + GRID * GRID
VOCAB_SIZE = STYLE_TOKEN_BASE + N_PALETTES
PROMPT_LEN = 3                # fixed slots: (shape, position, style)


class LayoutMode(str, Enum):
    PRESERVED = "preserved"
    SHIFTED = "shifted"


class PromptMode(str, Enum):
    DESCRIPTIVE = "descriptive"
    INSTRUCTIVE_STYLIZATION = "instructive_stylization"
    DESCRIPTIVE_STYLIZATION = "descriptive_stylization"


@dataclass(frozen=True)
class ContentSpec:
    shape_id: int
    position: tuple[int, int]      # (row, col) cell in the 4x4 grid
    scale: str = "small"           # "small" | "large"

    def __post_init__(self):
        if not 0 <= self.shape_id < N_SHAPES:
            raise ValueError(f"shape_id {self.shape_id} out of range")
        r, c = self.position
        if not (0 <= r < GRID and 0 <= c < GRID):
            raise ValueError(f"position {self.position} outside the {GRID}x{GRID} grid")
        if self.scale not in SCALE_RADIUS:
            raise ValueError(f"unknown scale {self.scale!r}")


@dataclass(frozen=True)
class StyleSpec:
    palette_id: int
    texture_id: int                # index into TEXTURE_NAMES
    texture_phase: float = 0.0     # in [0, 1)

    def __post_init__(self):
        if not 0 <= self.palette_id < N_PALETTES:
            raise ValueError(f"palette_id {self.palette_id} out of range")
        if not 0 <= self.texture_id < N_TEXTURES:
            raise ValueError(f"texture_id {self.texture_id} out of range")
        if not 0.0 <= self.texture_phase < 1.0:
            raise ValueError("texture_phase must lie in [0, 1)")


CANONICAL_STYLE = StyleSpec(palette_id=0, texture_id=0, texture_phase=0.0)


@dataclass(frozen=True)
class PromptSpec:
    shape_word: int = NULL_TOKEN
    position_word: int = NULL_TOKEN
    style_word: int = NULL_TOKEN
    mode: PromptMode = PromptMode.DESCRIPTIVE

    def __post_init__(self):
        for tok in (self.shape_word, self.position_word, self.style_word):
            if not 0 <= tok < VOCAB_SIZE:
                raise ValueError(f"token id {tok} >= vocabulary size {VOCAB_SIZE}")

    def token_ids(self) -> tuple[int, int, int]:
        return (self.shape_word, self.position_word, self.style_word)

    @property
    def is_empty(self) -> bool:
        return self.token_ids() == (NULL_TOKEN, NULL_TOKEN, NULL_TOKEN)


EMPTY_PROMPT = PromptSpec()


def shape_token(shape_id: int) -> int:
    return SHAPE_TOKEN_BASE + shape_id


def position_token(position: tuple[int, int]) -> int:
    r, c = position
    return POSITION_TOKEN_BASE + r * GRID + c


def style_token(palette_id: int) -> int:
    return STYLE_TOKEN_BASE + palette_id


def token_to_shape(token: int) -> int:
    return token - SHAPE_TOKEN_BASE


def token_to_position(token: int) -> tuple[int, int]:
    idx = token - POSITION_TOKEN_BASE
    return (idx // GRID, idx % GRID)


def token_to_palette(token: int) -> int:
    return token - STYLE_TOKEN_BASE


@dataclass
class Triplet:
    style_ref: np.ndarray          # (3, 32, 32) float32 in [0, 1]
    content_ref: np.ndarray
    target: np.ndarray
    prompt: PromptSpec
    layout_mode: LayoutMode
    provenance: tuple[ContentSpec, StyleSpec]     # target's ground truth
    content_ref_spec: ContentSpec                 # may differ when layout-shifted
    style_ref_spec: ContentSpec                   # decoy shape in the style image
    seed: int = 0


# =============================================================================
# Rendering
# =============================================================================

_YY, _XX = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float32)


def cell_center(position: tuple[int, int]) -> tuple[float, float]:
    r, c = position
    return (r * CELL + (CELL - 1) / 2.0, c * CELL + (CELL - 1) / 2.0)


def shape_bbox(spec: ContentSpec) -> tuple[int, int, int, int]:
    """Pixel bounding box (y0, y1, x0, x1), exclusive upper bounds, clipped."""
    cy, cx = cell_center(spec.position)
    ext = SCALE_RADIUS[spec.scale] + 1.0
    y0 = max(0, int(np.floor(cy - ext)))
    y1 = min(CANVAS, int(np.ceil(cy + ext)) + 1)
    x0 = max(0, int(np.floor(cx - ext)))
    x1 = min(CANVAS, int(np.ceil(cx + ext)) + 1)
    return (y0, y1, x0, x1)


def _ramp(x: np.ndarray) -> np.ndarray:
    """Map a signed inside-distance to [0, 1] coverage over a 1-px soft edge.

    Shapes get soft edges while textures stay hard: a solid silhouette then
    contributes far less gradient-orientation energy than any texture, which
    is what lets the style descriptor treat edges and textures differently.
    """
    return np.clip(x + 0.5, 0.0, 1.0)


def _shape_alpha(spec: ContentSpec) -> np.ndarray:
    """Per-pixel shape coverage in [0, 1] (1 inside, 0 outside, soft edge)."""
    cy, cx = cell_center(spec.position)
    r = SCALE_RADIUS[spec.scale]
    dy = _YY - cy
    dx = _XX - cx
    name = SHAPE_NAMES[spec.shape_id]
    if name == "circle":
        return _ramp(r - np.sqrt(dy * dy + dx * dx))
    if name == "square":
        s = 0.85 * r
        return _ramp(s - np.maximum(np.abs(dy), np.abs(dx)))
    if name == "triangle":
        # upward triangle: apex at the top of the cell, base at the bottom
        a = _ramp(dy + r)
        b = _ramp(0.8 * r - dy)
        c = _ramp(((dy + r) * 0.62 - np.abs(dx)) / np.sqrt(1.0 + 0.62**2))
        return np.minimum(np.minimum(a, b), c)
    if name == "cross":
        w = 0.38 * r
        bar_v = np.minimum(_ramp(w - np.abs(dx)), _ramp(r - np.abs(dy)))
        bar_h = np.minimum(_ramp(w - np.abs(dy)), _ramp(r - np.abs(dx)))
        return np.maximum(bar_v, bar_h)
    if name == "diamond":
        return _ramp((1.15 * r - (np.abs(dy) + np.abs(dx))) / np.sqrt(2.0))
    raise AssertionError(name)


def _texture_mask(style: StyleSpec) -> np.ndarray:
    name = TEXTURE_NAMES[style.texture_id]
    if name == "flat":
        return np.zeros((CANVAS, CANVAS), dtype=bool)
    if name == "hatch":
        period, width = 8, 2
        off = int(round(style.texture_phase * period)) % period
        return ((_XX + _YY).astype(np.int64) + off) % period < width
    if name == "dots":
        period = 4
        off = int(round(style.texture_phase * period)) % period
        yy = (_YY.astype(np.int64) + off) % period
        xx = (_XX.astype(np.int64) + off) % period
        return (yy < 2) & (xx < 2)
    if name == "stripes":
        period, width = 4, 1
        off = int(round(style.texture_phase * period)) % period
        return (_XX.astype(np.int64) + off) % period < width
    raise AssertionError(name)


def _noise_field(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.random((1, CANVAS, CANVAS), dtype=np.float32) - 0.5) * 2.0 * NOISE_AMP


def _render(spec: ContentSpec, style: StyleSpec, seed: int) -> np.ndarray:
    bg, fg = PALETTES[style.palette_id]
    bg = np.asarray(bg, dtype=np.float32).reshape(3, 1, 1)
    fg = np.asarray(fg, dtype=np.float32).reshape(3, 1, 1)
    img = np.broadcast_to(bg, (3, CANVAS, CANVAS)).copy()
    tex = _texture_mask(style)
    img[:, tex] = np.broadcast_to(fg, (3, CANVAS, CANVAS))[:, tex]
    alpha = _shape_alpha(spec).astype(np.float32)[None]
    img = img * (1.0 - alpha) + fg * alpha
    img = img + _noise_field(seed)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_content(spec: ContentSpec, seed: int = 0) -> np.ndarray:
    """Canonical ("photoreal") rendering: gray palette, no texture."""
    return _render(spec, CANONICAL_STYLE, seed)


def apply_style(spec: ContentSpec, style: StyleSpec, seed: int = 0) -> np.ndarray:
    """Stylization expert: render the content in the given style."""
    return _render(spec, style, seed)


def destylize(
    target: np.ndarray,
    provenance: ContentSpec,
    seed: int = 0,
    layout_mode: LayoutMode = LayoutMode.PRESERVED,
    shift_rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, ContentSpec]:
    """De-stylization expert: invert a stylized target to its canonical form.

    provenance must be the true ContentSpec of `target`. Under layout shift
    the position and/or scale are resampled (same shape), mirroring a content
    reference whose subject was re-posed.
    """
    del target  # the expert is exact: only provenance matters
    if layout_mode is LayoutMode.PRESERVED:
        out_spec = provenance
    else:
        rng = shift_rng if shift_rng is not None else np.random.default_rng(seed)
        out_spec = _shift_spec(provenance, rng)
    return render_content(out_spec, seed), out_spec


def _shift_spec(spec: ContentSpec, rng: np.random.Generator) -> ContentSpec:
    """Same shape, different position and/or scale (always a real change)."""
    while True:
        pos = (int(rng.integers(GRID)), int(rng.integers(GRID)))
        scale = "small" if rng.random() < 0.5 else "large"
        if pos != spec.position or scale != spec.scale:
            return ContentSpec(spec.shape_id, pos, scale)


def _decoy_spec(spec: ContentSpec, rng: np.random.Generator) -> ContentSpec:
    """A different shape for the style reference (blocks content leakage)."""
    other = int(rng.integers(N_SHAPES - 1))
    if other >= spec.shape_id:
        other += 1
    pos = (int(rng.integers(GRID)), int(rng.integers(GRID)))
    scale = "small" if rng.random() < 0.5 else "large"
    return ContentSpec(other, pos, scale)


def default_prompt(target_spec: ContentSpec, layout_mode: LayoutMode) -> PromptSpec:
    """Training prompt for a triplet: empty when layout-preserved, else the
    target's shape and position (style is carried by the reference image)."""
    if layout_mode is LayoutMode.PRESERVED:
        return EMPTY_PROMPT
    return PromptSpec(
        shape_word=shape_token(target_spec.shape_id),
        position_word=position_token(target_spec.position),
        mode=PromptMode.DESCRIPTIVE,
    )


def make_triplet(
    content: ContentSpec,
    style: StyleSpec,
    layout_mode: LayoutMode = LayoutMode.PRESERVED,
    seed: int = 0,
) -> Triplet:
    """Curate one (style_ref, content_ref, target) record.

    `content` is the target's ground-truth spec. The style reference always
    depicts a decoy shape so style information cannot be satisfied by copying
    content through the style branch.
    """
    rng = np.random.default_rng((seed, 0xC0FFEE))
    target = apply_style(content, style, seed)
    decoy = _decoy_spec(content, rng)
    style_ref = apply_style(decoy, style, seed + 1)
    content_ref, ref_spec = destylize(
        target, content, seed, layout_mode=layout_mode, shift_rng=rng
    )
    return Triplet(
        style_ref=style_ref,
        content_ref=content_ref,
        target=target,
        prompt=default_prompt(content, layout_mode),
        layout_mode=layout_mode,
        provenance=(content, style),
        content_ref_spec=ref_spec,
        style_ref_spec=decoy,
        seed=seed,
    )


# =============================================================================
# Filtering
# =============================================================================

@dataclass(frozen=True)
class FilterResult:
    accepted: bool
    reason: Optional[str]          # None | "style" | "content"
    style_score: float
    content_ok: bool


def filter_triplet(
    t: Triplet,
    tau_style: float = 0.9,
    tau_content: float = 0.5,
) -> FilterResult:
    """Accept iff the target matches the style reference (descriptor cosine
    >= tau_style) and the target's subject agrees with the content reference.

    The content check is an exact oracle on ground-truth specs (no trained
    classifier): shape ids must match. tau_content is kept for interface
    parity; any value in (0, 1) behaves identically for the exact oracle.
    """
    if not (0.0 < tau_style < 1.0 and 0.0 < tau_content < 1.0):
        raise ValueError("filter thresholds must lie in (0, 1)")
    from .objectives import style_cosine

    score = float(style_cosine(t.target, t.style_ref))
    if score < tau_style:
        return FilterResult(False, "style", score, True)
    content_ok = t.provenance[0].shape_id == t.content_ref_spec.shape_id
    if not content_ok:
        return FilterResult(False, "content", score, False)
    return FilterResult(True, None, score, True)


# =============================================================================
# Dataset build
# =============================================================================

@dataclass
class DatasetConfig:
    preserved: int = 100
    shifted: int = 100
    seed: int = 0
    tau_style: float = 0.9
    tau_content: float = 0.5
    # optional holdout of (palette_id, texture_id) combos, e.g. for evaluating
    # generalization to styles unseen during fine-tuning
    holdout_styles: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    @classmethod
    def from_mapping(cls, kv: dict) -> "DatasetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(kv) - known
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        out = cls()
        for k, v in kv.items():
            if k in ("preserved", "shifted", "seed"):
                setattr(out, k, int(v))
            elif k in ("tau_style", "tau_content"):
                setattr(out, k, float(v))
            elif k == "holdout_styles":
                out.holdout_styles = tuple(tuple(int(x) for x in pair) for pair in v)
        return out


def _style_pool(holdout: tuple[tuple[int, int], ...]) -> list[tuple[int, int]]:
    pool = [
        (p, t)
        for p in range(1, N_PALETTES)      # palette 0 is the canonical domain
        for t in range(N_TEXTURES)
        if (p, t) not in set(holdout)
    ]
    if not pool:
        raise ValueError("style holdout leaves no styles to curate from")
    return pool


def _record_from_triplet(t: Triplet, res: FilterResult, paths: dict[str, str]) -> dict:
    spec, style = t.provenance
    return {
        "style_ref": paths["style_ref"],
        "content_ref": paths["content_ref"],
        "target": paths["target"],
        "content": {
            "shape_id": spec.shape_id,
            "position": list(spec.position),
            "scale": spec.scale,
        },
        "content_ref_spec": {
            "shape_id": t.content_ref_spec.shape_id,
            "position": list(t.content_ref_spec.position),
            "scale": t.content_ref_spec.scale,
        },
        "style_ref_spec": {
            "shape_id": t.style_ref_spec.shape_id,
            "position": list(t.style_ref_spec.position),
            "scale": t.style_ref_spec.scale,
        },
        "style": {
            "palette_id": style.palette_id,
            "texture_id": style.texture_id,
            "texture_phase": round(style.texture_phase, 6),
        },
        "layout_mode": t.layout_mode.value,
        "prompt": list(t.prompt.token_ids()),
        "prompt_mode": t.prompt.mode.value,
        "seed": t.seed,
        "filter": {"style_score": round(res.style_score, 6), "content_ok": res.content_ok},
    }


def save_image(path: Path, img: np.ndarray) -> None:
    """Raw little-endian float32, C-order, channels-first (3x32x32), no header."""
    arr = np.ascontiguousarray(img, dtype="<f4")
    path.write_bytes(arr.tobytes())


def load_image(path: Path) -> np.ndarray:
    arr = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return arr.reshape(3, CANVAS, CANVAS).copy()


def iter_triplet_specs(cfg: DatasetConfig) -> Iterator[tuple[ContentSpec, StyleSpec, LayoutMode, int]]:
    rng = np.random.default_rng(cfg.seed)
    pool = _style_pool(cfg.holdout_styles)
    plan = [LayoutMode.PRESERVED] * cfg.preserved + [LayoutMode.SHIFTED] * cfg.shifted
    for i, mode in enumerate(plan):
        spec = ContentSpec(
            shape_id=int(rng.integers(N_SHAPES)),
            position=(int(rng.integers(GRID)), int(rng.integers(GRID))),
            scale="small" if rng.random() < 0.5 else "large",
        )
        p, tx = pool[int(rng.integers(len(pool)))]
        style = StyleSpec(p, tx, float(rng.random()))
        yield spec, style, mode, cfg.seed * 1_000_003 + i


def build_dataset(cfg: DatasetConfig, root: Path) -> Path:
    """Curate triplets, write images + manifest.jsonl, return the manifest path.

    Every emitted record passes the filter; curation retries with fresh decoys
    were never needed because the experts are exact, so a filter rejection here
    is a hard error rather than a silent drop.
    """
    root = Path(root)
    img_dir = root / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for idx, (spec, style, mode, seed) in enumerate(iter_triplet_specs(cfg)):
        t = make_triplet(spec, style, mode, seed)
        res = filter_triplet(t, cfg.tau_style, cfg.tau_content)
        if not res.accepted:
            raise RuntimeError(
                f"curated triplet {idx} failed its own filter ({res.reason}); "
                "the world parameters are inconsistent with tau_style"
            )
        paths = {}
        for kind, img in (
            ("style_ref", t.style_ref),
            ("content_ref", t.content_ref),
            ("target", t.target),
        ):
            rel = f"img/{idx:06d}_{kind}.f32"
            save_image(root / rel, img)
            paths[kind] = rel
        records.append(_record_from_triplet(t, res, paths))

    manifest = root / "manifest.jsonl"
    with manifest.open("w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def load_manifest(manifest: Path) -> list[dict]:
    with Path(manifest).open() as f:
        return [json.loads(line) for line in f if line.strip()]


def record_specs(rec: dict) -> tuple[ContentSpec, StyleSpec, ContentSpec, ContentSpec]:
    """(target spec, style spec, content_ref spec, style_ref decoy spec)."""
    c = rec["content"]
    s = rec["style"]
    cr = rec["content_ref_spec"]
    sr = rec["style_ref_spec"]
    return (
        ContentSpec(c["shape_id"], tuple(c["position"]), c["scale"]),
        StyleSpec(s["palette_id"], s["texture_id"], s["texture_phase"]),
        ContentSpec(cr["shape_id"], tuple(cr["position"]), cr["scale"]),
        ContentSpec(sr["shape_id"], tuple(sr["position"]), sr["scale"]),
    )


def manifest_digest(manifest: Path) -> str:
    return hashlib.sha256(Path(manifest).read_bytes()).hexdigest()
