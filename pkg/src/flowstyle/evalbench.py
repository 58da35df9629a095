"""Miniature customization benchmark: metric oracles, cell grid, reports.

Three metric dimensions are measured per generated image: content consistency
(cosine of shape-classifier penultimate features against the content
reference, plus hard shape accuracy), style similarity (the same analytic
style descriptor used by the reward), and text alignment (mean of per-slot
indicator scores from oracle detectors). The oracles are validated
independently of any generative model before they are used to rank one.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from . import synthworld as sw
from .objectives import _color_histogram, style_descriptor
from .rollout import RolloutConfig, sample

REPORT_SCHEMA_VERSION = 1


def style_metric(img, ref) -> float:
    d_img = style_descriptor(torch.as_tensor(img))
    d_ref = style_descriptor(torch.as_tensor(ref))
    return float((d_img * d_ref).sum())


# =============================================================================
# Shape classifier (content oracle)
# =============================================================================

class ShapeClassifier(nn.Module):
    """Small translation-invariant CNN on standardized grayscale input."""

    def __init__(self, n_classes: int = sw.N_SHAPES):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 48, 3, padding=1), nn.SiLU(),
        )
        self.fc = nn.Linear(48, n_classes)

    @staticmethod
    def prep(img: Tensor) -> Tensor:
        """Grayscale + per-image standardization (style robustness)."""
        if img.dim() == 3:
            img = img.unsqueeze(0)
        g = img.float().mean(dim=1, keepdim=True)
        mu = g.mean(dim=(2, 3), keepdim=True)
        sd = g.std(dim=(2, 3), keepdim=True)
        return (g - mu) / (sd + 1e-5)

    def features(self, img: Tensor) -> Tensor:
        h = self.conv(self.prep(img))
        return h.mean(dim=(2, 3))

    def forward(self, img: Tensor) -> Tensor:
        return self.fc(self.features(img))

    def classify(self, img: Tensor) -> Tensor:
        with torch.no_grad():
            return self.forward(img).argmax(dim=1)


def _mark_mask(rng: np.random.Generator) -> np.ndarray:
    """Random sparse periodic mark pattern (lines at any angle or a dot
    lattice). Generic high-frequency structure used as augmentation: marks are
    composited at the foreground level, which is exactly how textured
    backgrounds relate to the subject in this world."""
    yy, xx = np.mgrid[0 : sw.CANVAS, 0 : sw.CANVAS]
    if rng.random() < 0.4:
        period = int(rng.integers(3, 6))
        size = int(rng.integers(1, 3))
        oy, ox = int(rng.integers(period)), int(rng.integers(period))
        return (((yy + oy) % period) < size) & (((xx + ox) % period) < size)
    a, b = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
    if a == 0 and b == 0:
        a = 1
    period = int(rng.integers(4, 10))
    width = int(rng.integers(1, 3))
    off = int(rng.integers(period))
    return ((a * xx + b * yy + off) % period) < width


def train_shape_classifier(steps: int = 800, batch: int = 64, lr: float = 2e-3, seed: int = 0) -> ShapeClassifier:
    """Train on canonical renders with polarity/contrast/grating augmentation
    so the features transfer to arbitrarily styled inputs."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    clf = ShapeClassifier()
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    fg, bg = 0.85, 0.15
    for _ in range(steps):
        imgs, labels = [], []
        for _ in range(batch):
            shape = int(rng.integers(sw.N_SHAPES))
            spec = sw.ContentSpec(
                shape,
                (int(rng.integers(sw.GRID)), int(rng.integers(sw.GRID))),
                "small" if rng.random() < 0.5 else "large",
            )
            g = sw.render_content(spec, int(rng.integers(1 << 31))).mean(axis=0)
            if rng.random() < 0.75:
                marks = _mark_mask(rng) & (g < (fg + bg) / 2)
                g = g.copy()
                g[marks] = fg
            if rng.random() < 0.5:
                # box blur: decoded/generated images are soft, features must survive
                k = 3
                pad = np.pad(g, 1, mode="edge")
                g = sum(
                    pad[dy : dy + sw.CANVAS, dx : dx + sw.CANVAS] for dy in range(k) for dx in range(k)
                ) / (k * k)
                g = g.astype(np.float32)
            g = (g - g.mean()) / (g.std() + 1e-5)
            if rng.random() < 0.5:
                g = -g
            g = g * rng.uniform(0.6, 1.4)
            g = g + rng.normal(0, 0.12, g.shape).astype(np.float32)
            imgs.append(g[None])
            labels.append(shape)
        x = torch.from_numpy(np.stack(imgs)).float()
        y = torch.tensor(labels)
        # inputs are pre-standardized above: feed conv directly
        logits = clf.fc(clf.conv(x).mean(dim=(2, 3)))
        loss = F.cross_entropy(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    clf.eval()
    return clf


def load_classifier(path: Path) -> ShapeClassifier:
    from .encoders import load_checkpoint

    clf = ShapeClassifier()
    load_checkpoint(path, clf)
    clf.eval()
    return clf


# =============================================================================
# Metric operations
# =============================================================================

def content_similarity(clf: ShapeClassifier, gen_img, content_ref) -> float:
    """Cosine of classifier penultimate features between generation and
    content reference."""
    with torch.no_grad():
        a = clf.features(torch.as_tensor(gen_img))
        b = clf.features(torch.as_tensor(content_ref))
    return float(F.cosine_similarity(a, b, dim=1).squeeze())


def occupied_cell(img) -> tuple[int, int]:
    """Grid cell whose pixels deviate most from the background estimate."""
    arr = torch.as_tensor(img).float()
    if arr.dim() == 4:
        arr = arr[0]
    bg = arr.reshape(3, -1).median(dim=1).values.reshape(3, 1, 1)
    dev = (arr - bg).abs().sum(dim=0)
    cells = dev.reshape(sw.GRID, sw.CELL, sw.GRID, sw.CELL).mean(dim=(1, 3))
    idx = int(cells.argmax())
    return (idx // sw.GRID, idx % sw.GRID)


_PALETTE_PROTOS: Optional[Tensor] = None


def palette_prototypes() -> Tensor:
    """Mean normalized color histogram per palette over a small style grid."""
    global _PALETTE_PROTOS
    if _PALETTE_PROTOS is None:
        protos = []
        for p in range(sw.N_PALETTES):
            hists = []
            for t in range(sw.N_TEXTURES):
                img = sw.apply_style(
                    sw.ContentSpec(0, (1, 1), "small"), sw.StyleSpec(p, t, 0.25), seed=7
                )
                h = _color_histogram(torch.from_numpy(img).unsqueeze(0))[0]
                hists.append(h / h.norm())
            proto = torch.stack(hists).mean(dim=0)
            protos.append(proto / proto.norm())
        _PALETTE_PROTOS = torch.stack(protos)
    return _PALETTE_PROTOS


def nearest_palette(img) -> int:
    arr = torch.as_tensor(img).float()
    if arr.dim() == 3:
        arr = arr.unsqueeze(0)
    h = _color_histogram(arr)[0]
    h = h / (h.norm() + 1e-12)
    return int((palette_prototypes() @ h).argmax())


def text_alignment(clf: ShapeClassifier, gen_img, prompt: sw.PromptSpec) -> float:
    """Mean of per-slot indicators over the slots present in the prompt.

    The empty prompt scores 1.0 by convention (vacuous truth: nothing was
    requested, so nothing can be violated).
    """
    scores = []
    if prompt.shape_word != sw.NULL_TOKEN:
        pred = int(clf.classify(torch.as_tensor(gen_img).unsqueeze(0))[0])
        scores.append(float(pred == sw.token_to_shape(prompt.shape_word)))
    if prompt.position_word != sw.NULL_TOKEN:
        scores.append(float(occupied_cell(gen_img) == sw.token_to_position(prompt.position_word)))
    if prompt.style_word != sw.NULL_TOKEN:
        scores.append(float(nearest_palette(gen_img) == sw.token_to_palette(prompt.style_word)))
    if not scores:
        return 1.0
    return float(np.mean(scores))


# =============================================================================
# Bench construction
# =============================================================================

@dataclass
class BenchSpec:
    content_pool: list[sw.ContentSpec]
    style_pool: list[sw.StyleSpec]
    subject_prompt_modes: tuple[str, ...] = (
        "descriptive",
        "instructive_stylization",
        "descriptive_stylization",
    )
    style_prompts_per_style: int = 2
    joint_layouts: tuple[str, ...] = ("preserved", "shifted")
    samples_per_cell: int = 2
    seed: int = 0
    rollout: RolloutConfig = field(default_factory=RolloutConfig)

    def cell_counts(self) -> dict[str, int]:
        return {
            "subject": len(self.content_pool) * len(self.subject_prompt_modes) * self.samples_per_cell,
            "style": len(self.style_pool) * self.style_prompts_per_style * self.samples_per_cell,
            "joint": len(self.content_pool) * len(self.style_pool) * len(self.joint_layouts) * self.samples_per_cell,
        }


def default_bench_spec(
    n_contents: int = 8,
    n_styles: int = 6,
    samples_per_cell: int = 2,
    seed: int = 0,
) -> BenchSpec:
    rng = np.random.default_rng(seed + 101)
    contents = [
        sw.ContentSpec(
            k % sw.N_SHAPES,
            (int(rng.integers(sw.GRID)), int(rng.integers(sw.GRID))),
            "small" if k % 2 == 0 else "large",
        )
        for k in range(n_contents)
    ]
    styles = []
    for k in range(n_styles):
        styles.append(
            sw.StyleSpec(
                palette_id=1 + (k % (sw.N_PALETTES - 1)),
                texture_id=k % sw.N_TEXTURES,
                texture_phase=float(rng.random()),
            )
        )
    return BenchSpec(
        content_pool=contents, style_pool=styles, samples_per_cell=samples_per_cell, seed=seed
    )


@dataclass
class CellJob:
    task: str
    prompt: sw.PromptSpec
    seed: int
    meta: dict
    style_img: Optional[np.ndarray] = None
    content_img: Optional[np.ndarray] = None


def _cell_seed(bench_seed: int, *parts) -> int:
    key = json.dumps([bench_seed, *parts], sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def _shifted_position(rng: np.random.Generator, pos: tuple[int, int]) -> tuple[int, int]:
    while True:
        cand = (int(rng.integers(sw.GRID)), int(rng.integers(sw.GRID)))
        if cand != pos:
            return cand


def _bench_jobs(spec: BenchSpec, task: str) -> list[CellJob]:
    rng = np.random.default_rng(spec.seed + 7)
    jobs: list[CellJob] = []
    if task == "subject":
        for ci, c in enumerate(spec.content_pool):
            ref = sw.render_content(c, seed=1000 + ci)
            for mi, mode in enumerate(spec.subject_prompt_modes):
                palette = spec.style_pool[(ci + mi) % len(spec.style_pool)].palette_id
                if mode == "descriptive":
                    pos = _shifted_position(rng, c.position)
                    prompt = sw.PromptSpec(sw.shape_token(c.shape_id), sw.position_token(pos))
                    expected_pos = pos
                elif mode == "instructive_stylization":
                    prompt = sw.PromptSpec(
                        style_word=sw.style_token(palette),
                        mode=sw.PromptMode.INSTRUCTIVE_STYLIZATION,
                    )
                    expected_pos = c.position
                else:
                    pos = _shifted_position(rng, c.position)
                    prompt = sw.PromptSpec(
                        sw.shape_token(c.shape_id),
                        sw.position_token(pos),
                        sw.style_token(palette),
                        mode=sw.PromptMode.DESCRIPTIVE_STYLIZATION,
                    )
                    expected_pos = pos
                for s in range(spec.samples_per_cell):
                    jobs.append(
                        CellJob(
                            task,
                            prompt,
                            _cell_seed(spec.seed, task, ci, mi, s),
                            meta={
                                "content": ci,
                                "prompt_mode": mode,
                                "sample": s,
                                "shape_id": c.shape_id,
                                "expected_pos": expected_pos,
                            },
                            content_img=ref,
                        )
                    )
    elif task == "style":
        for si, style in enumerate(spec.style_pool):
            for pi in range(spec.style_prompts_per_style):
                c = spec.content_pool[(si + pi) % len(spec.content_pool)]
                decoy = spec.content_pool[(si + pi + 1) % len(spec.content_pool)]
                if decoy.shape_id == c.shape_id:
                    decoy = spec.content_pool[(si + pi + 2) % len(spec.content_pool)]
                ref = sw.apply_style(decoy, style, seed=2000 + si)
                prompt = sw.PromptSpec(sw.shape_token(c.shape_id), sw.position_token(c.position))
                for s in range(spec.samples_per_cell):
                    jobs.append(
                        CellJob(
                            task,
                            prompt,
                            _cell_seed(spec.seed, task, si, pi, s),
                            meta={"style": si, "prompt": pi, "sample": s, "shape_id": c.shape_id},
                            style_img=ref,
                        )
                    )
    elif task == "joint":
        for ci, c in enumerate(spec.content_pool):
            cref = sw.render_content(c, seed=1000 + ci)
            for si, style in enumerate(spec.style_pool):
                decoy = spec.content_pool[(ci + 1) % len(spec.content_pool)]
                if decoy.shape_id == c.shape_id:
                    decoy = spec.content_pool[(ci + 2) % len(spec.content_pool)]
                sref = sw.apply_style(decoy, style, seed=3000 + si)
                for li, layout in enumerate(spec.joint_layouts):
                    if layout == "preserved":
                        prompt = sw.EMPTY_PROMPT
                        expected_pos = c.position
                    else:
                        pos = _shifted_position(rng, c.position)
                        prompt = sw.PromptSpec(position_word=sw.position_token(pos))
                        expected_pos = pos
                    for s in range(spec.samples_per_cell):
                        jobs.append(
                            CellJob(
                                task,
                                prompt,
                                _cell_seed(spec.seed, task, ci, si, li, s),
                                meta={
                                    "content": ci,
                                    "style": si,
                                    "layout": layout,
                                    "sample": s,
                                    "shape_id": c.shape_id,
                                    "expected_pos": expected_pos,
                                },
                                style_img=sref,
                                content_img=cref,
                            )
                        )
    else:
        raise ValueError(f"unknown task {task!r}")
    return jobs


# =============================================================================
# Report
# =============================================================================

@dataclass
class MetricReport:
    rows: list[dict]
    spec_counts: dict[str, int]
    tasks: list[str]

    def mean(self, key: str, task: Optional[str] = None) -> Optional[float]:
        vals = [
            r[key]
            for r in self.rows
            if (task is None or r["task"] == task) and r.get(key) is not None
        ]
        return float(np.mean(vals)) if vals else None

    def summary(self) -> dict:
        out = {}
        for task in self.tasks:
            for key in ("style_sim", "content_sim", "content_acc", "text_align"):
                v = self.mean(key, task)
                if v is not None:
                    out[f"{task}_{key}"] = round(v, 6)
        if "joint" in self.tasks:
            out["style_metric"] = out.get("joint_style_sim")
        elif "style" in self.tasks:
            out["style_metric"] = out.get("style_style_sim")
        if "subject" in self.tasks:
            out["content_metric"] = out.get("subject_content_sim")
        return out

    def save(self, path: Path) -> None:
        payload = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "tasks": self.tasks,
            "spec_counts": self.spec_counts,
            "summary": self.summary(),
            "rows": self.rows,
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    def save_csv(self, path: Path) -> None:
        keys = ["task", "seed", "style_sim", "content_sim", "content_acc", "text_align", "meta"]
        with Path(path).open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(keys)
            for r in self.rows:
                writer.writerow([r.get(k) if k != "meta" else json.dumps(r.get("meta")) for k in keys])


def _score_row(clf: ShapeClassifier, job: CellJob, img: np.ndarray) -> dict:
    row: dict = {"task": job.task, "seed": job.seed, "meta": job.meta}
    timg = torch.from_numpy(img)
    if job.style_img is not None:
        row["style_sim"] = round(style_metric(timg, torch.from_numpy(job.style_img)), 6)
    else:
        row["style_sim"] = None
    if job.content_img is not None:
        row["content_sim"] = round(content_similarity(clf, timg, torch.from_numpy(job.content_img)), 6)
        pred = int(clf.classify(timg.unsqueeze(0))[0])
        row["content_acc"] = float(pred == job.meta["shape_id"])
    else:
        row["content_sim"] = None
        row["content_acc"] = None
    row["text_align"] = round(text_alignment(clf, timg, job.prompt), 6)
    return row


def run_bench(model, spec: BenchSpec, task: str, clf: ShapeClassifier, chunk: int = 16) -> MetricReport:
    """Generate every cell of one task with per-cell fixed seeds and score it.

    Failures never drop silently: a cell that cannot be generated raises. The
    per-cell noise is drawn from a dedicated generator, so reports are
    identical regardless of how cells are batched.
    """
    from .model import prompt_ids_tensor

    jobs = _bench_jobs(spec, task)
    rows = []
    g = model.backbone.cfg.grid
    d = model.backbone.cfg.d_latent
    for start in range(0, len(jobs), chunk):
        group = jobs[start : start + chunk]
        prompt_ids = prompt_ids_tensor([j.prompt for j in group])
        style = (
            torch.from_numpy(np.stack([j.style_img for j in group]))
            if group[0].style_img is not None
            else None
        )
        content = (
            torch.from_numpy(np.stack([j.content_img for j in group]))
            if group[0].content_img is not None
            else None
        )
        x_init = torch.stack(
            [
                torch.randn(g, g, d, generator=torch.Generator().manual_seed(j.seed))
                for j in group
            ]
        )
        with torch.no_grad():
            cond = model.encode_cond(prompt_ids, style_imgs=style, content_imgs=content)
            imgs = sample(model, cond, spec.rollout, batch=len(group), x_init=x_init)
        for job, img in zip(group, imgs):
            rows.append(_score_row(clf, job, img.numpy()))
    counts = spec.cell_counts()
    if len(rows) != counts[task]:
        raise RuntimeError(f"bench produced {len(rows)} rows, expected {counts[task]}")
    return MetricReport(rows=rows, spec_counts={task: counts[task]}, tasks=[task])


def run_bench_all(model, spec: BenchSpec, clf: ShapeClassifier) -> MetricReport:
    reports = [run_bench(model, spec, task, clf) for task in ("subject", "style", "joint")]
    rows = [r for rep in reports for r in rep.rows]
    counts = spec.cell_counts()
    return MetricReport(rows=rows, spec_counts=counts, tasks=["subject", "style", "joint"])


# =============================================================================
# Consolidated reporting
# =============================================================================

def consolidate_reports(metric_files: list[Path], out_dir: Path) -> Path:
    """Merge per-variant metrics into one CSV and bar charts per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for path in metric_files:
        data = json.loads(Path(path).read_text())
        data["_source"] = str(path)
        entries.append(data)
    if not entries:
        raise ValueError("no metrics files given")

    keys = sorted({k for e in entries for k in e if not k.startswith("_") and isinstance(e[k], (int, float))})
    label_key = "variant" if any("variant" in e for e in entries) else "projector"
    csv_path = out_dir / "report.csv"
    with csv_path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([label_key, *keys])
        for e in entries:
            writer.writerow([e.get(label_key, "?"), *[e.get(k) for k in keys]])

    for key in keys:
        if key == "seed":
            continue
        labels = [f"{e.get(label_key, '?')}/s{e.get('seed', 0)}" for e in entries]
        vals = [e.get(key) for e in entries]
        if all(v is None for v in vals):
            continue
        fig, ax = plt.subplots(figsize=(max(4, len(labels) * 0.9), 3))
        ax.bar(range(len(vals)), [v if v is not None else 0.0 for v in vals], color="#4878d0")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel(key)
        fig.tight_layout()
        fig.savefig(out_dir / f"{key}.png", dpi=110)
        plt.close(fig)
    return csv_path
