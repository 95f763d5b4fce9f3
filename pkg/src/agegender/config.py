"""Run configuration file (YAML or JSON).

Schema (all sections optional except ``stages``)::

    seed: 0
    threads: 1
    crop_seconds: 5.0
    vad_threshold_db: 40.0
    age_bins: [10, 20, 30, 40, 50, 60, 70, 80, 90]
    features:   {kind: mfcc|mel, normalize_features: true, ...FeatureConfig fields}
    embedder:   {width: 512, final: 1500, embed: 512}    # scaled default topology
                # or {blocks: [{kernel, repeats, residual, channels}, ...],
                #     dense_dims: [512, 512], head_hidden: 512}
    optimizer:  {lr, weight_decay, beta1, beta2, eps, warmup_steps, batch_size}
    loss_weights: {gender: 1.0, age_group: 1.0, age_mse: 0.001}
    paths:      {checkpoint_dir: checkpoints, report_dir: reports}
    stages:
      - {name: spkid_pretrain, manifest: spk.jsonl, epochs: 10, dataset: VoxCeleb}
      - {name: agegender_pretrain, manifest: cv.jsonl, epochs: 100,
         init_from: spkid_pretrain, dataset: Common Voice}
      - {name: finetune, manifest: timit.jsonl, epochs: 50, init_from: agegender_pretrain}

``init_from`` names an earlier stage in the list or a checkpoint file path.
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml

from .data import AgeBinTable
from .features import FeatureConfig
from .network import EmbedderConfig
from .optim import OptimizerConfig
from .training import LossWeights, StageConfig, TrainSettings

TOP_KEYS = {"seed", "threads", "crop_seconds", "vad_threshold_db", "age_bins", "features",
            "embedder", "optimizer", "loss_weights", "paths", "stages"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    settings: TrainSettings
    stages: list[StageConfig]
    checkpoint_dir: Path
    report_dir: Path
    seed: int = 0
    base_dir: Path = field(default_factory=Path.cwd)

    def stage_checkpoint(self, name: str) -> Path:
        return self.checkpoint_dir / f"{name}.ckpt"

    def parent_of(self, stage: StageConfig) -> Optional[Path]:
        """Checkpoint path a stage initialises from, or None."""
        if stage.init_from is None:
            return None
        if any(s.name == stage.init_from for s in self.stages):
            return self.stage_checkpoint(stage.init_from)
        return self._resolve(stage.init_from)

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def with_overrides(self, seed=None, threads=None, out=None) -> "RunConfig":
        cfg = replace(self)
        if seed is not None:
            cfg.seed = seed
        if threads is not None:
            cfg.settings = replace(cfg.settings, threads=threads)
        if out is not None:
            out = Path(out)
            cfg.checkpoint_dir, cfg.report_dir = out / "checkpoints", out / "reports"
        return cfg


def _embedder(section: dict, input_dim: int) -> EmbedderConfig:
    section = dict(section or {})
    if "blocks" in section:
        return EmbedderConfig.from_dict({**section, "input_dim": input_dim})
    unknown = set(section) - {"width", "final", "embed"}
    if unknown:
        raise ConfigError(f"unknown embedder keys {sorted(unknown)}")
    if not section:
        return EmbedderConfig(input_dim=input_dim)
    width = section.get("width", 512)
    return EmbedderConfig.scaled(input_dim, width, section.get("final", 1500 if width == 512 else width),
                                 section.get("embed", width))


def parse_config(raw: dict, base_dir: Path) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        features = FeatureConfig(**(raw.get("features") or {}))
        embedder = _embedder(raw.get("embedder"), features.dim)
        settings = TrainSettings(
            features=features,
            embedder=embedder,
            optimizer=OptimizerConfig(**(raw.get("optimizer") or {})),
            loss_weights=LossWeights(**(raw.get("loss_weights") or {})),
            age_bins=AgeBinTable(tuple(raw.get("age_bins") or AgeBinTable().boundaries)),
            crop_seconds=float(raw.get("crop_seconds", 5.0)),
            vad_threshold_db=float(raw.get("vad_threshold_db", 40.0)),
            threads=int(raw.get("threads") or 1),
        )
        stages = []
        for s in raw.get("stages") or []:
            s = dict(s)
            if "manifest" in s:
                s["manifest"] = str(Path(s["manifest"]) if Path(s["manifest"]).is_absolute()
                                    else base_dir / s["manifest"])
            stages.append(StageConfig(**s))
    except TypeError as exc:
        raise ConfigError(f"bad config section: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not stages:
        raise ConfigError("config defines no stages")

    seen = set()
    for s in stages:
        if s.name in seen:
            raise ConfigError(f"stage {s.name} appears twice")
        if s.init_from is not None and s.init_from in {x.name for x in stages} and s.init_from not in seen:
            raise ConfigError(f"stage {s.name} initialises from {s.init_from}, which runs later or is itself")
        seen.add(s.name)

    paths = raw.get("paths") or {}
    resolve = lambda p: Path(p) if Path(p).is_absolute() else base_dir / p
    return RunConfig(settings, stages,
                     resolve(paths.get("checkpoint_dir", "checkpoints")),
                     resolve(paths.get("report_dir", "reports")),
                     int(raw.get("seed", 0)), base_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return parse_config(raw, path.parent.resolve())
