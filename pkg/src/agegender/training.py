"""Multitask loss, the epoch loop and staged transfer learning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .data import (AgeBinTable, AgeRangeError, DEFAULT_BINS, SPKID_STAGE, SkipCounter,
                   age_bin_target, load_manifest, make_batches)
from .features import FeatureConfig
from .network import (AGE_GENDER_HEADS, AGE_GROUP, AGE_REG, GENDER, SPEAKER,
                      AgeGenderNet, EmbedderConfig, build_model)
from .optim import NovoGrad, OptimizerConfig, lr_at

log = logging.getLogger(__name__)

STAGE_NAMES = (SPKID_STAGE, "agegender_pretrain", "finetune")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    gender: float = 1.0
    age_group: float = 1.0
    age_mse: float = 0.001

    def __post_init__(self):
        if min(self.gender, self.age_group, self.age_mse) < 0:
            raise ValueError("loss weights must be non-negative")


def joint_loss(outputs: dict, targets: dict, weights: LossWeights = LossWeights()):
    """Weighted multitask loss over raw head outputs.

    ``outputs`` holds the gender logit, age-group logits and age in years;
    ``targets`` holds ``gender`` (1 = male), ``age_bin`` and ``age``. Returns
    ``(total, components)`` with every term mean-reduced over the batch.
    For the speaker stage only ``speaker`` is used.
    """
    comps = {}
    if SPEAKER in outputs:
        comps["speaker_ce"] = F.cross_entropy(outputs[SPEAKER], targets["speaker"])
        total = comps["speaker_ce"]
    else:
        missing = [h for h in AGE_GENDER_HEADS if h not in outputs]
        if missing:
            raise KeyError(f"missing head outputs {missing}")
        comps["gender_bce"] = F.binary_cross_entropy_with_logits(outputs[GENDER], targets["gender"])
        comps["age_group_ce"] = F.cross_entropy(outputs[AGE_GROUP], targets["age_bin"])
        comps["age_mse"] = F.mse_loss(outputs[AGE_REG], targets["age"])
        total = (weights.gender * comps["gender_bce"] + weights.age_group * comps["age_group_ce"]
                 + weights.age_mse * comps["age_mse"])
    for name, value in comps.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(f"loss term {name} is not finite ({value.item()})")
    return total, comps


def heads_for_stage(name: str) -> tuple[str, ...]:
    if name not in STAGE_NAMES:
        raise ValueError(f"unknown stage {name!r}; expected one of {STAGE_NAMES}")
    return (SPEAKER,) if name == SPKID_STAGE else AGE_GENDER_HEADS


@dataclass(frozen=True)
class StageConfig:
    name: str
    manifest: str
    epochs: int
    init_from: Optional[str] = None
    dataset: Optional[str] = None

    def __post_init__(self):
        heads_for_stage(self.name)
        if self.epochs < 1:
            raise ValueError(f"stage {self.name}: epochs must be positive")

    @property
    def heads(self) -> tuple[str, ...]:
        return heads_for_stage(self.name)

    @property
    def label(self) -> str:
        return self.dataset or self.name


@dataclass(frozen=True)
class TrainSettings:
    features: FeatureConfig = FeatureConfig()
    embedder: EmbedderConfig = EmbedderConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    loss_weights: LossWeights = LossWeights()
    age_bins: AgeBinTable = DEFAULT_BINS
    crop_seconds: float = 5.0
    vad_threshold_db: float = 40.0
    threads: int = 1

    def __post_init__(self):
        if self.embedder.input_dim != self.features.dim:
            raise ValueError(f"embedder input_dim {self.embedder.input_dim} does not match "
                             f"{self.features.kind} feature dimension {self.features.dim}")


@dataclass
class StageResult:
    checkpoint_path: Path
    metrics_path: Path
    epochs: list = field(default_factory=list)
    best_epoch: int = 0


def _to_targets(batch, dtype):
    t = {"gender": torch.from_numpy(batch.gender_targets).to(dtype),
         "age": torch.from_numpy(batch.age_targets).to(dtype),
         "age_bin": torch.from_numpy(batch.age_bin_targets)}
    if batch.speaker_targets is not None:
        t["speaker"] = torch.from_numpy(batch.speaker_targets)
    return t


def _usable(records, stage: StageConfig, table: AgeBinTable):
    if stage.name == SPKID_STAGE:
        return list(records)
    out = []
    for r in records:
        try:
            age_bin_target(r, table)
        except AgeRangeError:
            log.warning("excluding %s: age %s outside the bin table", r.record_id, r.age_years)
            continue
        out.append(r)
    return out


def _transfer(model: AgeGenderNet, parent: ckpt_io.Checkpoint, settings: TrainSettings) -> list[str]:
    """Copy compatible weights from ``parent``; returns the names loaded.
    The embedder is always carried over, the age/gender heads only when the
    parent had them, the speaker head never."""
    expected = ckpt_io.compat_hash(settings.embedder, settings.features)
    own = model.state_dict()
    if parent.config_hash != expected:
        diffs = [f"{n}: parent {tuple(a.shape)} vs stage {tuple(own[n].shape)}"
                 for n, a in parent.tensors.items()
                 if n in own and tuple(a.shape) != tuple(own[n].shape)]
        raise ckpt_io.CheckpointError(
            f"parent checkpoint config hash {parent.config_hash} != stage hash {expected}; "
            + ("mismatched shapes:\n  " + "\n  ".join(diffs) if diffs else "feature kind differs"))
    carry = {n: a for n, a in parent.tensors.items()
             if n.startswith("embedder.")
             or (n.startswith("heads.") and not n.startswith(f"heads.{SPEAKER}.") and n in own)}
    ckpt_io.load_tensors(model, carry, strict=False)
    return sorted(carry)


def _run_epoch_eval(model, batches, weights):
    """Mean loss components and accuracy-style metrics in inference mode."""
    model.eval()
    sums, n = {}, 0
    correct, abs_err = 0, 0.0
    with torch.no_grad():
        for batch in batches:
            dtype = next(model.parameters()).dtype
            out = model(torch.from_numpy(batch.features).to(dtype))
            targets = _to_targets(batch, dtype)
            total, comps = joint_loss(out, targets, weights)
            b = len(batch)
            for k, v in {"total": total, **comps}.items():
                sums[k] = sums.get(k, 0.0) + float(v) * b
            if SPEAKER in out:
                correct += int((out[SPEAKER].argmax(-1) == targets["speaker"]).sum())
            else:
                correct += int(((out[GENDER] >= 0).to(dtype) == targets["gender"]).sum())
                abs_err += float((out[AGE_REG] - targets["age"]).abs().sum())
            n += b
    if n == 0:
        return None
    res = {k: v / n for k, v in sums.items()}
    if SPEAKER in model.active_heads:
        res["speaker_accuracy"] = correct / n
    else:
        res["gender_accuracy"] = correct / n
        res["age_mae"] = abs_err / n
    return res


def run_stage(stage: StageConfig, settings: TrainSettings, out_dir, *, seed: int = 0,
              parent: Optional[ckpt_io.Checkpoint] = None, records=None,
              echo=None) -> StageResult:
    """Train one transfer-learning stage and write ``<stage>.ckpt`` plus an
    append-only ``<stage>.metrics.jsonl`` into ``out_dir``.

    The saved weights are those of the epoch with the lowest validation
    total loss (the last epoch when the manifest has no validation split).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    if records is None:
        records = load_manifest(stage.manifest, stage=stage.name, table=settings.age_bins)
    records = _usable(records, stage, settings.age_bins)
    train = [r for r in records if r.split == "train"]
    valid = [r for r in records if r.split == "valid"]
    if not train:
        raise ValueError(f"stage {stage.name}: manifest has no train records")

    speakers: tuple[str, ...] = ()
    speaker_index = None
    if stage.name == SPKID_STAGE:
        speakers = tuple(sorted({r.speaker_id for r in train}))
        speaker_index = {s: i for i, s in enumerate(speakers)}
        dropped = [r for r in valid if r.speaker_id not in speaker_index]
        if dropped:
            log.warning("dropping %d validation records with unseen speakers", len(dropped))
        valid = [r for r in valid if r.speaker_id in speaker_index]

    model = build_model(settings.embedder, stage.heads, len(speakers), seed=seed)
    lineage, datasets = stage.name, (stage.label,)
    if parent is not None:
        _transfer(model, parent, settings)
        lineage = f"{parent.lineage}>{stage.name}" if parent.lineage else stage.name
        datasets = tuple(parent.datasets) + (stage.label,)

    opt_cfg = settings.optimizer
    optimizer = NovoGrad(model.parameters(), lr=opt_cfg.lr, betas=(opt_cfg.beta1, opt_cfg.beta2),
                         eps=opt_cfg.eps, weight_decay=opt_cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train) / opt_cfg.batch_size)
    total_steps = stage.epochs * steps_per_epoch
    lr_at(0, opt_cfg.lr, opt_cfg.warmup_steps, total_steps)  # validates the schedule up front

    batch_kw = dict(feature_config=settings.features, crop_seconds=settings.crop_seconds,
                    speaker_index=speaker_index, table=settings.age_bins, threads=settings.threads,
                    vad_threshold_db=settings.vad_threshold_db)
    valid_batches = None
    if valid:
        # validation crops are drawn once and reused every epoch
        valid_batches = list(make_batches(valid, opt_cfg.batch_size, seed, stream=1, **batch_kw))

    metrics_path = out_dir / f"{stage.name}.metrics.jsonl"
    metrics_path.write_text("")
    result = StageResult(out_dir / f"{stage.name}.ckpt", metrics_path)
    best_loss, best_state = math.inf, None
    step = 0
    for epoch in range(stage.epochs):
        model.train()
        skipped = SkipCounter()
        sums, seen = {}, 0
        for batch in make_batches(train, opt_cfg.batch_size, seed, epoch=epoch, skipped=skipped, **batch_kw):
            if len(batch) < 2:
                # batch norm needs more than one example per channel
                log.debug("skipping singleton batch %s", batch.record_ids)
                continue
            lr = lr_at(step, opt_cfg.lr, opt_cfg.warmup_steps, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            out = model(torch.from_numpy(batch.features))
            total, comps = joint_loss(out, _to_targets(batch, torch.float32), settings.loss_weights)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            step += 1
            for k, v in {"total": total, **comps}.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) * len(batch)
            seen += len(batch)

        entry = {"stage": stage.name, "epoch": epoch, "step": step,
                 "lr": lr_at(min(step, total_steps), opt_cfg.lr, opt_cfg.warmup_steps, total_steps),
                 "skipped": skipped.count,
                 "train": {k: v / seen for k, v in sums.items()} if seen else None}
        entry["valid"] = _run_epoch_eval(model, valid_batches, settings.loss_weights) if valid_batches else None
        score = entry["valid"]["total"] if entry["valid"] else None
        if score is None or score < best_loss:
            best_loss = score if score is not None else best_loss
            best_state = ckpt_io.model_tensors(model)
            result.best_epoch = epoch
        result.epochs.append(entry)
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if echo is not None:
            echo(format_epoch(entry))

    final = ckpt_io.from_model(model, settings.features, lineage, datasets, speakers,
                               extra={"best_epoch": result.best_epoch})
    final.tensors = best_state
    ckpt_io.save(result.checkpoint_path, final)
    return result


def format_epoch(entry: dict) -> str:
    parts = [f"[{entry['stage']}] epoch {entry['epoch']:3d} lr {entry['lr']:.6f}"]
    for split in ("train", "valid"):
        vals = entry.get(split)
        if vals:
            parts.append(split + " " + " ".join(f"{k}={v:.4f}" for k, v in sorted(vals.items())))
    return " | ".join(parts)

