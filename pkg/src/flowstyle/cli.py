"""Operator surface: one entrypoint, eight subcommands.

Configuration is a flat key = value text file plus flag overrides (flags
win). Every run writes a resolved config snapshot into its run directory and
is deterministic under a fixed seed. Commands are resumable: rerunning a
finished run is a no-op, an interrupted stage continues from its latest
checkpoint.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

RUN_ROOT_ENV = "FLOWSTYLE_RUN_ROOT"


class CliError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


# =============================================================================
# Flat key-value config
# =============================================================================

def parse_config_file(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("bad-config", f"{path}:{lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


class RunConfig:
    """Resolved command configuration; unknown keys are rejected."""

    def __init__(self, values: dict[str, str], known: set[str]):
        unknown = set(values) - known
        if unknown:
            raise CliError("unknown-config-key", f"unknown config keys: {sorted(unknown)}")
        self.values = values

    def get(self, key: str, default=None) -> Optional[str]:
        return self.values.get(key, default)

    def get_int(self, key: str, default: int) -> int:
        v = self.values.get(key)
        return default if v is None else int(v)

    def get_float(self, key: str, default: float) -> float:
        v = self.values.get(key)
        return default if v is None else float(v)

    def get_path(self, key: str) -> Path:
        v = self.values.get(key)
        if v is None:
            raise CliError("missing-config-key", f"config key {key!r} is required")
        return Path(v)


def resolve_out(out: str) -> Path:
    path = Path(out)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _snapshot(run_dir: Path, command: str, values: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps({"command": command, **values}, indent=2, sort_keys=True, default=str)
    )


def _collect(args, file_keys: set[str]) -> RunConfig:
    values = parse_config_file(args.config) if args.config else {}
    for flag in ("seed", "steps", "variant", "stage"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = str(v)
    return RunConfig(values, file_keys | {"seed", "steps", "variant", "stage"})


# =============================================================================
# Subcommands
# =============================================================================

def cmd_build_data(args) -> int:
    from . import synthworld as sw

    cfg = _collect(args, {"preserved", "shifted", "tau_style", "tau_content", "holdout_styles"})
    out = resolve_out(args.out)
    holdout = ()
    if cfg.get("holdout_styles"):
        holdout = tuple(
            tuple(int(x) for x in pair.split(":")) for pair in cfg.get("holdout_styles").split(",")
        )
    dcfg = sw.DatasetConfig(
        preserved=cfg.get_int("preserved", 100),
        shifted=cfg.get_int("shifted", 100),
        seed=cfg.get_int("seed", 0),
        tau_style=cfg.get_float("tau_style", 0.9),
        tau_content=cfg.get_float("tau_content", 0.5),
        holdout_styles=holdout,
    )
    _snapshot(out, "build-data", asdict(dcfg))
    manifest = sw.build_dataset(dcfg, out)
    print(f"manifest={manifest} sha256={sw.manifest_digest(manifest)}")
    return 0


def cmd_pretrain_encoders(args) -> int:
    from .trainer import BaseTrainConfig, WarmupConfig, ensure_warmups

    cfg = _collect(
        args,
        {"autoencoder_steps", "style_steps", "classifier_steps", "base_steps", "base_batch", "base_lr", "base_pool"},
    )
    out = resolve_out(args.out)
    seed = cfg.get_int("seed", 0)
    wcfg = WarmupConfig(
        autoencoder_steps=cfg.get_int("autoencoder_steps", 1200),
        style_steps=cfg.get_int("style_steps", 500),
        classifier_steps=cfg.get_int("classifier_steps", 800),
        base=BaseTrainConfig(
            steps=cfg.get_int("base_steps", 4000),
            batch_size=cfg.get_int("base_batch", 32),
            lr=cfg.get_float("base_lr", 2e-3),
            pool_size=cfg.get_int("base_pool", 8192),
            seed=seed,
        ),
        seed=seed,
    )
    _snapshot(out, "pretrain-encoders", asdict(wcfg))
    ensure_warmups(out, wcfg)
    print(f"warmups={out}")
    return 0


_STAGE_KEYS = {
    "manifest", "warmups", "init", "batch_size", "lr", "momentum",
    "reward_start_frac", "srl_t_start", "srl_t_end", "srl_T_steps", "log_every",
    "checkpoint_every",
}


def _stage_config(cfg: RunConfig, default_steps: int) -> "StageConfig":
    from .rollout import RolloutConfig
    from .trainer import StageConfig

    return StageConfig(
        steps=cfg.get_int("steps", default_steps),
        batch_size=cfg.get_int("batch_size", 16),
        lr=cfg.get_float("lr", 0.02),
        momentum=cfg.get_float("momentum", 0.9),
        reward_start_frac=cfg.get_float("reward_start_frac", 0.7),
        seed=cfg.get_int("seed", 0),
        log_every=cfg.get_int("log_every", 1),
        checkpoint_every=cfg.get_int("checkpoint_every", 500),
        rollout=RolloutConfig(
            T_steps=cfg.get_int("srl_T_steps", 8),
            t_start=cfg.get_int("srl_t_start", 0),
            t_end=cfg.get_int("srl_t_end", 2),
            seed=cfg.get_int("seed", 0),
        ),
    )


def _run_stage_command(args, stage: str) -> int:
    from .model import CustomizationModel
    from .trainer import TripletDataset, load_pretrained, run_stage

    cfg = _collect(args, _STAGE_KEYS)
    out = resolve_out(args.out)
    if (out / "checkpoint.pt").exists():
        print(f"checkpoint={out / 'checkpoint.pt'} (already complete)")
        return 0
    variant = cfg.get("variant", "full")
    scfg = _stage_config(cfg, 2000 if stage == "align" else 3000)
    data = TripletDataset(cfg.get_path("manifest"))
    init = cfg.get("init")
    if init:
        model, _ = CustomizationModel.load(Path(init))
    else:
        style_route = "codec" if variant == "no_de" else "semantic"
        model = load_pretrained(cfg.get_path("warmups"), style_route=style_route)
    _snapshot(out, f"train-{stage}", {"stage_config": asdict(scfg), **cfg.values})
    start_step = 0
    latest = out / "checkpoint_latest.pt"
    if latest.exists():
        model, meta = CustomizationModel.load(latest)
        start_step = int(meta.get("step", 0))
    run_stage(
        model, data, stage, scfg, out,
        variant=variant,
        reward_enabled=variant != "no_srl",
        start_step=start_step,
    )
    print(f"checkpoint={out / 'checkpoint.pt'}")
    return 0


def cmd_train_stage1(args) -> int:
    return _run_stage_command(args, "align")


def cmd_train_stage2(args) -> int:
    return _run_stage_command(args, "disentangle")


def cmd_srl_finetune(args) -> int:
    """Reward-only fine-tune: the combined objective with the reward weight
    active from the first step, on style-bearing batches."""
    from .model import CustomizationModel
    from .trainer import TripletDataset, run_stage

    cfg = _collect(args, _STAGE_KEYS)
    out = resolve_out(args.out)
    if (out / "checkpoint.pt").exists():
        print(f"checkpoint={out / 'checkpoint.pt'} (already complete)")
        return 0
    stage = cfg.get("stage", "disentangle")
    scfg = _stage_config(cfg, 200)
    scfg.reward_start_frac = 0.0
    data = TripletDataset(cfg.get_path("manifest"))
    model, _ = CustomizationModel.load(Path(cfg.get_path("init")))
    _snapshot(out, "srl-finetune", {"stage_config": asdict(scfg), **cfg.values})
    run_stage(model, data, stage, scfg, out, variant=cfg.get("variant", "full"))
    print(f"checkpoint={out / 'checkpoint.pt'}")
    return 0


def cmd_ablate(args) -> int:
    from . import evalbench
    from .trainer import run_ablation, run_projector_ablation

    cfg = _collect(
        args,
        _STAGE_KEYS | {"stage1_steps", "stage2_steps", "bench_contents", "bench_styles", "bench_samples"},
    )
    out = resolve_out(args.out)
    variant = cfg.get("variant", "full")
    seed = cfg.get_int("seed", 0)
    s1 = _stage_config(cfg, cfg.get_int("stage1_steps", 2000))
    s1.steps = cfg.get_int("stage1_steps", s1.steps)
    s2 = _stage_config(cfg, cfg.get_int("stage2_steps", 3000))
    s2.steps = cfg.get_int("stage2_steps", s2.steps)
    bench = evalbench.default_bench_spec(
        n_contents=cfg.get_int("bench_contents", 8),
        n_styles=cfg.get_int("bench_styles", 6),
        samples_per_cell=cfg.get_int("bench_samples", 2),
        seed=seed,
    )
    if variant.startswith("projector:"):
        metrics = run_projector_ablation(
            variant.split(":", 1)[1],
            cfg.get_path("manifest"), cfg.get_path("warmups"), out, s1, bench, seed,
        )
    else:
        metrics = run_ablation(
            variant,
            cfg.get_path("manifest"), cfg.get_path("warmups"), out, s1, s2, bench, seed,
        )
    print(json.dumps(metrics))
    return 0


def cmd_bench(args) -> int:
    from . import evalbench
    from .model import CustomizationModel

    cfg = _collect(
        args,
        {"checkpoint", "classifier", "bench_contents", "bench_styles", "bench_samples", "task"},
    )
    out = resolve_out(args.out)
    model, _ = CustomizationModel.load(cfg.get_path("checkpoint"))
    clf = evalbench.load_classifier(cfg.get_path("classifier"))
    spec = evalbench.default_bench_spec(
        n_contents=cfg.get_int("bench_contents", 8),
        n_styles=cfg.get_int("bench_styles", 6),
        samples_per_cell=cfg.get_int("bench_samples", 2),
        seed=cfg.get_int("seed", 0),
    )
    task = cfg.get("task", "all")
    _snapshot(out, "bench", {"task": task, **cfg.values})
    if task == "all":
        report = evalbench.run_bench_all(model, spec, clf)
    else:
        report = evalbench.run_bench(model, spec, task, clf)
    report.save(out / "bench_report.json")
    report.save_csv(out / "bench_report.csv")
    print(json.dumps(report.summary()))
    return 0


def cmd_report(args) -> int:
    from .evalbench import consolidate_reports

    out = resolve_out(args.out)
    paths = []
    for item in args.runs.split(","):
        p = Path(item)
        if p.is_dir():
            p = p / "metrics.json"
        if not p.exists():
            raise CliError("missing-metrics", f"no metrics file at {p}")
        paths.append(p)
    csv_path = consolidate_reports(paths, out)
    print(f"report={csv_path}")
    return 0


# =============================================================================
# Entrypoint
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowstyle", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_out=True, extra=()):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        if needs_out:
            p.add_argument("--out", type=str, required=True)
        for flag in extra:
            p.add_argument(flag, type=str, default=None)
        p.set_defaults(fn=fn)
        return p

    add("build-data", cmd_build_data)
    add("pretrain-encoders", cmd_pretrain_encoders)
    add("train-stage1", cmd_train_stage1, extra=("--steps", "--variant"))
    add("train-stage2", cmd_train_stage2, extra=("--steps", "--variant"))
    add("srl-finetune", cmd_srl_finetune, extra=("--steps", "--stage", "--variant"))
    add("ablate", cmd_ablate, extra=("--variant", "--steps"))
    add("bench", cmd_bench)
    rep = sub.add_parser("report")
    rep.add_argument("--runs", type=str, required=True)
    rep.add_argument("--out", type=str, required=True)
    rep.set_defaults(fn=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error code={e.code} msg={e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error code={type(e).__name__} msg={e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
