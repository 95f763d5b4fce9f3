"""``agegender`` command line: featurize, pretrain, train, evaluate, infer.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure or
non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import audio
from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig, load_config
from .data import ManifestError, featurize_record, load_manifest
from .evaluation import (compute_metrics, gender_decision, predict, predict_features,
                         render_report, write_predictions)
from .features import FeatureError, FeatureMatrix, extract, write_feature_file
from .network import GENDER
from .training import NonFiniteLossError, run_stage

log = logging.getLogger("agegender")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

VALIDATION_ERRORS = (ConfigError, ManifestError, ckpt_io.CheckpointError, FeatureError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="run config file (YAML or JSON)")
    p.add_argument("--seed", type=int, help="override the config's global seed")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for feature extraction and torch (default: available cores)")
    p.add_argument("--out", type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agegender", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("featurize", help="write one feature file per manifest record plus index.json")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("pretrain", help="run only the pretraining stages of the config")
    _common(p)

    p = sub.add_parser("train", help="run every stage of the config in order")
    _common(p)

    p = sub.add_parser("evaluate", help="score a labelled manifest and write reports")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--format", choices=("text", "csv", "json"), default="text",
                   help="format echoed to stdout (all three are written to --out)")

    p = sub.add_parser("infer", help="gender and age for individual wav files")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("audio", nargs="+", type=Path)

    p = sub.add_parser("synth", help="write the synthetic desk-scale corpus and config")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args) -> RunConfig:
    if args.config is None:
        raise UsageError("--config is required for this command")
    return load_config(args.config).with_overrides(args.seed, args.threads, args.out)


def _set_threads(n):
    torch.set_num_threads(max(1, n or os.cpu_count() or 1))


def _ensure_writable(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from exc
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def cmd_featurize(args) -> int:
    if args.config is not None:
        cfg = _config(args)
        settings = cfg.settings
    else:
        from .training import TrainSettings
        settings = TrainSettings()
    out = _ensure_writable(args.out or Path("features"))
    records = load_manifest(args.manifest, table=settings.age_bins)
    index, failed = {"kind": settings.features.kind, "records": {}, "skipped": {}}, 0
    for i, rec in enumerate(records):
        try:
            feats = featurize_record(rec, settings.features, mode="full",
                                     vad_threshold_db=settings.vad_threshold_db)
        except (audio.AudioError, FeatureError, OSError) as exc:
            log.warning("skipping %s: %s", rec.record_id, exc)
            index["skipped"][rec.record_id] = str(exc)
            failed += 1
            continue
        name = f"{i:06d}_{Path(rec.audio_path).stem}.feat"
        write_feature_file(out / name, FeatureMatrix(feats, settings.features.kind))
        index["records"][rec.record_id] = name
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(index['records'])} feature files to {out} ({failed} skipped)")
    return EXIT_OK


def _run_stages(cfg: RunConfig, only_pretrain: bool) -> int:
    _ensure_writable(cfg.checkpoint_dir)
    stages = [s for s in cfg.stages if not (only_pretrain and s.name == "finetune")]
    for stage in stages:
        parent = None
        parent_path = cfg.parent_of(stage)
        if parent_path is not None:
            if not parent_path.exists():
                raise UsageError(f"stage {stage.name}: init_from checkpoint {parent_path} does not exist")
            parent = ckpt_io.load(parent_path)
        print(f"== stage {stage.name} ({stage.epochs} epochs, manifest {stage.manifest})")
        result = run_stage(stage, cfg.settings, cfg.checkpoint_dir, seed=cfg.seed, parent=parent,
                           echo=print)
        print(f"== wrote {result.checkpoint_path} (best epoch {result.best_epoch})")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    _set_threads(cfg.settings.threads if args.threads is None else args.threads)
    return _run_stages(cfg, only_pretrain=True)


def cmd_train(args) -> int:
    cfg = _config(args)
    _set_threads(cfg.settings.threads if args.threads is None else args.threads)
    return _run_stages(cfg, only_pretrain=False)


def _load_eval_model(args):
    ck = ckpt_io.load(args.checkpoint)
    if GENDER not in ck.heads:
        raise UsageError(f"{args.checkpoint} is a speaker-recognition checkpoint without age/gender heads")
    settings_table, vad_db = None, 40.0
    if args.config is not None:
        cfg = _config(args)
        expected = ckpt_io.compat_hash(cfg.settings.embedder, cfg.settings.features)
        if expected != ck.config_hash:
            raise ckpt_io.CheckpointError(
                f"checkpoint {args.checkpoint} was trained with config hash {ck.config_hash}, "
                f"config expects {expected} (feature kind or embedder differs)")
        settings_table, vad_db = cfg.settings.age_bins, cfg.settings.vad_threshold_db
    return ck, ck.build_model(), settings_table, vad_db


def _pretrained_on(ck) -> str:
    return " + ".join(ck.datasets[:-1]) or "-"


def cmd_evaluate(args) -> int:
    ck, model, table, vad_db = _load_eval_model(args)
    records = load_manifest(args.manifest, table=table) if table else load_manifest(args.manifest)
    if not records:
        raise UsageError(f"{args.manifest} has no records to evaluate")
    unlabeled = [r.record_id for r in records if r.gender is None or (r.age_years is None and r.age_bin is None)]
    if unlabeled:
        raise UsageError(f"{len(unlabeled)} records lack gender/age labels (e.g. {unlabeled[0]}); "
                         "use `infer` for unlabelled audio")
    preds = predict(model, records, ck.features, table=table, vad_threshold_db=vad_db)
    if not preds:
        raise UsageError("no record could be decoded")
    kind = "MFCC" if ck.features.kind == "mfcc" else "Mel Spectrogram"
    report = compute_metrics(preds, kind, _pretrained_on(ck))
    out = _ensure_writable(args.out or Path("reports"))
    write_predictions(out / "predictions.jsonl", preds)
    for fmt, ext in (("text", "txt"), ("csv", "csv"), ("json", "json")):
        (out / f"report.{ext}").write_text(render_report(report, fmt))
    sys.stdout.write(render_report(report, args.format))
    return EXIT_OK


def cmd_infer(args) -> int:
    ck, model, _, vad_db = _load_eval_model(args)
    status = EXIT_OK
    for path in args.audio:
        try:
            buf = audio.preprocess(audio.decode_wav(path), mode="full", vad_threshold_db=vad_db)
            feats = extract(buf, ck.features).values.astype("float32")
        except (audio.AudioError, FeatureError, OSError) as exc:
            print(f"{path}\tERROR\t{exc}")
            status = EXIT_RUNTIME
            continue
        prob, age = predict_features(model, feats)
        print(f"{path}\t{gender_decision(prob)}\t{prob:.4f}\t{age:.1f}")
    return status


def cmd_synth(args) -> int:
    from .synth import make_desk_corpus
    path = make_desk_corpus(args.out, seed=args.seed)
    print(f"wrote synthetic corpus and config {path}")
    return EXIT_OK


COMMANDS = {"featurize": cmd_featurize, "pretrain": cmd_pretrain, "train": cmd_train,
            "evaluate": cmd_evaluate, "infer": cmd_infer, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, OSError, audio.AudioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
