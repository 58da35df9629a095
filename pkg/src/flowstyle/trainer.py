"""Two-stage training schedule with exact freeze policies, plus the base
text-to-image pretraining that the stages fine-tune.

Stage "align" trains only the style-alignment projection (everything else
frozen) so image-derived style tokens line up with the text-token
distribution the base model already understands. Stage "disentangle" freezes
that projection and unfreezes the backbone, adding the content branch and
task-mode mixing. Both stages switch from the plain flow objective to the
combined reward objective at a configured step.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import synthworld as sw
from .model import CustomizationModel, prompt_ids_tensor
from .rollout import RolloutConfig, flow_step, reward_step

STAGES = ("align", "disentangle")
ABLATION_VARIANTS = ("full", "no_srl", "no_sat", "no_de")
PROJECTOR_ABLATIONS = (
    "hierarchical",
    "resampler",
    "resampler_unfreeze",
    "mlp",
    "mlp_unfreeze",
)


@dataclass
class StageConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    reward_start_frac: float = 0.7       # reward weight flips on at this point
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 500
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    task_mix: tuple[int, int, int] = (1, 1, 2)   # style : subject : joint

    @property
    def reward_start(self) -> int:
        return int(round(self.steps * self.reward_start_frac))


@dataclass
class StageState:
    stage: str
    step: int
    freeze_mask: dict[str, bool]         # parameter name -> trainable?
    reward_start: int
    optimizer: torch.optim.Optimizer


def param_hashes(model: torch.nn.Module) -> dict[str, str]:
    return {
        name: hashlib.sha256(p.detach().cpu().numpy().tobytes()).hexdigest()
        for name, p in model.named_parameters()
    }


def trainable_mask(model: CustomizationModel, stage: str, variant: str = "full") -> dict[str, bool]:
    """Exact per-parameter freeze policy for a stage/variant combination."""
    align_prefix = model.alignment_group()
    mask = {}
    for name, _ in model.named_parameters():
        if stage == "align":
            trainable = name.startswith(align_prefix)
            if variant.endswith("_unfreeze"):
                trainable = trainable or name.startswith("style_encoder.")
        elif stage == "disentangle":
            trainable = name.startswith("backbone.")
            if variant == "no_sat":
                # joint fine-tuning: semantic encoder and alignment projection
                # train together with the backbone, no prior alignment stage
                trainable = trainable or name.startswith(align_prefix) or name.startswith("style_encoder.")
        else:
            raise ValueError(f"unknown stage {stage!r}")
        mask[name] = trainable
    return mask


def apply_freeze(model: CustomizationModel, mask: dict[str, bool]) -> None:
    for name, p in model.named_parameters():
        p.requires_grad_(mask[name])


# =============================================================================
# Data access
# =============================================================================

class TripletDataset:
    """Manifest-backed triplet store, fully materialized in memory."""

    def __init__(self, manifest: Path):
        self.root = Path(manifest).parent
        self.records = sw.load_manifest(manifest)
        if not self.records:
            raise ValueError(f"empty manifest: {manifest}")
        self.style_ref = self._stack("style_ref")
        self.content_ref = self._stack("content_ref")
        self.target = self._stack("target")
        self.specs = [sw.record_specs(r) for r in self.records]
        canon = [
            sw.render_content(spec[0], int(r["seed"]))
            for spec, r in zip(self.specs, self.records)
        ]
        self.target_canonical = torch.from_numpy(np.stack(canon))

    def _stack(self, key: str) -> torch.Tensor:
        return torch.from_numpy(
            np.stack([sw.load_image(self.root / r[key]) for r in self.records])
        )

    def __len__(self) -> int:
        return len(self.records)

    def _descriptive_prompt(self, i: int, style_word: bool = False) -> sw.PromptSpec:
        spec, style, _, _ = self.specs[i]
        return sw.PromptSpec(
            shape_word=sw.shape_token(spec.shape_id),
            position_word=sw.position_token(spec.position),
            style_word=sw.style_token(style.palette_id) if style_word else sw.NULL_TOKEN,
            mode=sw.PromptMode.DESCRIPTIVE_STYLIZATION if style_word else sw.PromptMode.DESCRIPTIVE,
        )

    def pair_batch(self, idx: np.ndarray) -> dict:
        """Stage-1 pairs {style reference, target}; style comes from the image."""
        prompts = [self._descriptive_prompt(int(i)) for i in idx]
        return {
            "prompt_ids": prompt_ids_tensor(prompts),
            "style_imgs": self.style_ref[idx],
            "target_imgs": self.target[idx],
        }

    def mode_batch(self, idx: np.ndarray, mode: str, rng: np.random.Generator) -> dict:
        if mode == "style":
            return self.pair_batch(idx)
        if mode == "subject":
            prompts, targets = [], []
            for i in idx:
                i = int(i)
                if rng.random() < 0.5:
                    prompts.append(self._descriptive_prompt(i, style_word=True))
                    targets.append(self.target[i])
                else:
                    prompts.append(self._descriptive_prompt(i))
                    targets.append(self.target_canonical[i])
            return {
                "prompt_ids": prompt_ids_tensor(prompts),
                "content_imgs": self.content_ref[idx],
                "target_imgs": torch.stack(targets),
            }
        if mode == "joint":
            prompts = [
                sw.PromptSpec(*self.records[int(i)]["prompt"], mode=sw.PromptMode(self.records[int(i)]["prompt_mode"]))
                for i in idx
            ]
            return {
                "prompt_ids": prompt_ids_tensor(prompts),
                "style_imgs": self.style_ref[idx],
                "content_imgs": self.content_ref[idx],
                "target_imgs": self.target[idx],
            }
        raise ValueError(f"unknown task mode {mode!r}")


# =============================================================================
# Base pretraining (text -> image flow matching)
# =============================================================================

@dataclass
class BaseTrainConfig:
    steps: int = 6000
    batch_size: int = 32
    lr: float = 2e-3
    lr_min_frac: float = 0.1          # cosine decay floor as a fraction of lr
    pool_size: int = 8192
    styled_fraction: float = 0.75
    seed: int = 0


def _base_pool(cfg: BaseTrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    rng = np.random.default_rng(cfg.seed)
    imgs, prompts = [], []
    for k in range(cfg.pool_size):
        spec = sw.ContentSpec(
            int(rng.integers(sw.N_SHAPES)),
            (int(rng.integers(sw.GRID)), int(rng.integers(sw.GRID))),
            "small" if rng.random() < 0.5 else "large",
        )
        styled = rng.random() < cfg.styled_fraction
        if styled:
            style = sw.StyleSpec(
                int(rng.integers(1, sw.N_PALETTES)),
                int(rng.integers(sw.N_TEXTURES)),
                float(rng.random()),
            )
            style_word = sw.style_token(style.palette_id)
        else:
            style = sw.CANONICAL_STYLE
            style_word = sw.NULL_TOKEN
        imgs.append(sw.apply_style(spec, style, int(rng.integers(1 << 31))))
        prompts.append(
            sw.PromptSpec(
                shape_word=sw.shape_token(spec.shape_id),
                position_word=sw.position_token(spec.position),
                style_word=style_word,
            )
        )
    return torch.from_numpy(np.stack(imgs)), prompt_ids_tensor(prompts)


def pretrain_base(
    model: CustomizationModel,
    cfg: BaseTrainConfig,
    log: Optional[Callable[[dict], None]] = None,
) -> None:
    """Flow-matching pretraining of the backbone on (prompt, image) pairs.

    This manufactures the pretrained text-to-image model the alignment stages
    start from; encoders stay frozen, Adam is used since this is warm-up
    rather than a schedule-bearing stage.
    """
    torch.manual_seed(cfg.seed)
    imgs, prompt_ids = _base_pool(cfg)
    for name, p in model.named_parameters():
        p.requires_grad_(name.startswith("backbone."))
    opt = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=cfg.lr
    )
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.steps, eta_min=cfg.lr * cfg.lr_min_frac
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    model.train()
    for step in range(cfg.steps):
        idx = rng.integers(len(imgs), size=cfg.batch_size)
        batch = {"prompt_ids": prompt_ids[idx], "target_imgs": imgs[idx]}
        bd, aux = flow_step(model, batch, opt, step, reward_start=cfg.steps + 1, generator=gen)
        sched.step()
        if log and step % 100 == 0:
            log({"step": step, "flow_loss": bd.flow_loss, "grad_norm": aux["grad_norm"]})
    model.eval()


# =============================================================================
# Stage training
# =============================================================================

def _write_config(run_dir: Path, payload: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(payload, indent=2, default=str))


def _log_line(fh, bd, aux) -> None:
    fh.write(
        json.dumps(
            {
                "step": bd.step,
                "flow_loss": round(bd.flow_loss, 6),
                "reward_loss": round(bd.reward_loss, 6),
                "reward_weight": bd.reward_weight,
                "grad_norm": round(aux.get("grad_norm", 0.0), 6),
            }
        )
        + "\n"
    )


def _frozen_hash_check(before: dict[str, str], after: dict[str, str], mask: dict[str, bool], stage: str) -> None:
    changed = [n for n, trainable in mask.items() if not trainable and before[n] != after[n]]
    if changed:
        raise RuntimeError(f"freeze violation in stage {stage}: {changed[:5]}")


def run_stage(
    model: CustomizationModel,
    data: TripletDataset,
    stage: str,
    cfg: StageConfig,
    run_dir: Path,
    variant: str = "full",
    reward_enabled: bool = True,
    start_step: int = 0,
) -> StageState:
    """Train one stage under its freeze policy; logs one JSONL line per step.

    `reward_enabled=False` pins the reward weight at zero for the whole stage
    (the no-reward ablation); otherwise the weight flips on at reward_start.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    mask = trainable_mask(model, stage, variant)
    apply_freeze(model, mask)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise RuntimeError(f"stage {stage} has no trainable parameters")
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    reward_start = cfg.reward_start if reward_enabled else cfg.steps + 1

    before = param_hashes(model)
    gen = torch.Generator().manual_seed(cfg.seed + 17)
    rng = np.random.default_rng(cfg.seed + 23)
    mix = np.array(cfg.task_mix, dtype=np.float64)
    mix = mix / mix.sum()
    model.train()
    state = StageState(stage=stage, step=start_step, freeze_mask=mask, reward_start=reward_start, optimizer=opt)

    with (run_dir / "steps.jsonl").open("a") as fh:
        for step in range(start_step, cfg.steps):
            idx = rng.integers(len(data), size=cfg.batch_size)
            reward_active = step >= reward_start
            if stage == "align":
                batch = data.pair_batch(idx)
            else:
                if reward_active:
                    # the reward needs a style reference: restrict to the
                    # style-bearing task modes at their relative ratio
                    mode = rng.choice(["style", "joint"], p=[mix[0] / (mix[0] + mix[2]), mix[2] / (mix[0] + mix[2])])
                else:
                    mode = rng.choice(["style", "subject", "joint"], p=mix)
                batch = data.mode_batch(idx, str(mode), rng)
            if reward_active:
                bd, aux = reward_step(model, batch, cfg.rollout, opt, step, reward_start, gen)
            else:
                bd, aux = flow_step(model, batch, opt, step, reward_start, gen)
            if step % cfg.log_every == 0:
                _log_line(fh, bd, aux)
            state.step = step + 1
            if (step + 1) % cfg.checkpoint_every == 0:
                model.save(run_dir / "checkpoint_latest.pt", {"stage": stage, "step": step + 1})

    after = param_hashes(model)
    _frozen_hash_check(before, after, mask, stage)
    model.eval()
    model.save(run_dir / "checkpoint.pt", {"stage": stage, "step": cfg.steps, "variant": variant})
    return state


def stage1_train(
    model: CustomizationModel,
    data: TripletDataset,
    cfg: StageConfig,
    run_dir: Path,
    variant: str = "full",
    reward_enabled: bool = True,
) -> StageState:
    """Style-alignment stage: sequence [style, text, noisy], projector trains."""
    return run_stage(model, data, "align", cfg, run_dir, variant, reward_enabled)


def stage2_train(
    model: CustomizationModel,
    data: TripletDataset,
    cfg: StageConfig,
    run_dir: Path,
    variant: str = "full",
    reward_enabled: bool = True,
) -> StageState:
    """Disentanglement stage: full sequence, backbone trains, task-mode mixing."""
    return run_stage(model, data, "disentangle", cfg, run_dir, variant, reward_enabled)


# =============================================================================
# Warm-up artifact management
# =============================================================================

@dataclass
class WarmupConfig:
    autoencoder_steps: int = 1200
    style_steps: int = 500
    classifier_steps: int = 800
    base: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    seed: int = 0


WARMUP_FILES = ("codec.pt", "style_encoder.pt", "classifier.pt", "base.pt")


def _warmups_loadable(out_dir: Path) -> bool:
    from . import evalbench
    from .encoders import ImageCodec, StyleEncoder, load_checkpoint

    try:
        load_checkpoint(out_dir / "codec.pt", ImageCodec())
        load_checkpoint(out_dir / "style_encoder.pt", StyleEncoder())
        evalbench.load_classifier(out_dir / "classifier.pt")
        CustomizationModel.load(out_dir / "base.pt")
    except Exception:
        return False
    return True


def ensure_warmups(out_dir: Path, cfg: Optional[WarmupConfig] = None) -> Path:
    """Train (or reuse) the frozen starting points: latent codec, semantic
    style encoder, metric shape classifier, and the base text-to-image model.

    Existing artifacts are reused only if they load against the current
    architectures; anything stale triggers a full rebuild."""
    from . import evalbench
    from .encoders import save_checkpoint, train_autoencoder, train_style_encoder

    cfg = cfg or WarmupConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if all((out_dir / f).exists() for f in WARMUP_FILES) and _warmups_loadable(out_dir):
        return out_dir

    codec = train_autoencoder(steps=cfg.autoencoder_steps, seed=cfg.seed)
    save_checkpoint(out_dir / "codec.pt", codec)
    enc = train_style_encoder(steps=cfg.style_steps, seed=cfg.seed)
    save_checkpoint(out_dir / "style_encoder.pt", enc)
    clf = evalbench.train_shape_classifier(steps=cfg.classifier_steps, seed=cfg.seed)
    save_checkpoint(out_dir / "classifier.pt", clf)

    model = CustomizationModel()
    from .encoders import load_checkpoint

    load_checkpoint(out_dir / "codec.pt", model.codec)
    load_checkpoint(out_dir / "style_encoder.pt", model.style_encoder)
    pretrain_base(model, cfg.base)
    model.save(out_dir / "base.pt", {"stage": "base", "step": cfg.base.steps})
    (out_dir / "warmup_config.json").write_text(json.dumps(asdict(cfg), indent=2, default=str))
    return out_dir


def load_pretrained(warmup_dir: Path, projector_variant: str = "hierarchical", style_route: str = "semantic") -> CustomizationModel:
    """Fresh model carrying the warm-up weights (codec, encoder, base backbone)."""
    from .encoders import load_checkpoint

    base, _ = CustomizationModel.load(Path(warmup_dir) / "base.pt")
    model = CustomizationModel(projector_variant=projector_variant, style_route=style_route)
    model.codec.load_state_dict(base.codec.state_dict())
    model.style_encoder.load_state_dict(base.style_encoder.state_dict())
    model.backbone.load_state_dict(base.backbone.state_dict())
    model.eval()
    return model


# =============================================================================
# Ablations
# =============================================================================

def run_ablation(
    variant: str,
    manifest: Path,
    warmup_dir: Path,
    run_dir: Path,
    stage1_cfg: StageConfig,
    stage2_cfg: StageConfig,
    bench_spec=None,
    seed: int = 0,
) -> dict:
    """Train one pipeline variant end to end and benchmark it.

    Variants: full (reference), no_srl (reward weight pinned to zero),
    no_sat (skip the alignment stage; joint fine-tune of encoder, alignment
    projection, and backbone), no_de (style routed through the latent codec).
    """
    from . import evalbench

    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data = TripletDataset(manifest)
    style_route = "codec" if variant == "no_de" else "semantic"
    model = load_pretrained(warmup_dir, style_route=style_route)

    s1 = StageConfig(**{**asdict_shallow(stage1_cfg), "seed": seed})
    s2 = StageConfig(**{**asdict_shallow(stage2_cfg), "seed": seed + 1})
    reward_enabled = variant != "no_srl"

    _write_config(
        run_dir,
        {
            "variant": variant,
            "seed": seed,
            "stage1": asdict(s1),
            "stage2": asdict(s2),
            "manifest": str(manifest),
            "warmups": str(warmup_dir),
        },
    )

    if variant != "no_sat":
        stage1_train(model, data, s1, run_dir / "stage1", variant, reward_enabled)
    stage2_train(model, data, s2, run_dir / "stage2", variant, reward_enabled)

    clf = evalbench.load_classifier(Path(warmup_dir) / "classifier.pt")
    spec = bench_spec or evalbench.default_bench_spec(seed=seed)
    report = evalbench.run_bench_all(model, spec, clf)
    metrics = {
        "variant": variant,
        "seed": seed,
        **report.summary(),
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2))
    report.save(run_dir / "bench_report.json")
    return metrics


def asdict_shallow(cfg: StageConfig) -> dict:
    d = asdict(cfg)
    d["rollout"] = RolloutConfig(**d["rollout"])
    d["task_mix"] = tuple(d["task_mix"])
    return d


def run_projector_ablation(
    variant: str,
    manifest: Path,
    warmup_dir: Path,
    run_dir: Path,
    stage1_cfg: StageConfig,
    bench_spec=None,
    seed: int = 0,
) -> dict:
    """Stage-1-only ablation over projector variants; reports the style score
    of the style-driven task after alignment training."""
    from . import evalbench

    if variant not in PROJECTOR_ABLATIONS:
        raise ValueError(f"unknown projector variant {variant!r}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data = TripletDataset(manifest)
    base_variant = variant.removesuffix("_unfreeze")
    model = load_pretrained(warmup_dir, projector_variant=base_variant)
    cfg = StageConfig(**{**asdict_shallow(stage1_cfg), "seed": seed})
    _write_config(run_dir, {"projector": variant, "seed": seed, "stage1": asdict(cfg)})
    stage1_train(model, data, cfg, run_dir / "stage1", variant)

    clf = evalbench.load_classifier(Path(warmup_dir) / "classifier.pt")
    spec = bench_spec or evalbench.default_bench_spec(seed=seed)
    report = evalbench.run_bench(model, spec, "style", clf)
    metrics = {
        "projector": variant,
        "seed": seed,
        "stage1_style_score": report.mean("style_sim"),
        "stage1_text_align": report.mean("text_align"),
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics
