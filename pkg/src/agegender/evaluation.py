"""Utterance-level age/gender scoring and tabular report rendering."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from . import audio
from .data import UtteranceRecord, featurize_record, regression_target
from .features import FeatureConfig
from .network import AGE_REG, GENDER, AgeGenderNet

log = logging.getLogger(__name__)

GROUPS = ("all", "female", "male")


@dataclass(frozen=True)
class PredictionRecord:
    utterance_id: str
    true_gender: str
    pred_gender_prob: float
    true_age: float
    pred_age: float

    def __post_init__(self):
        if not 0.0 <= self.pred_gender_prob <= 1.0:
            raise ValueError(f"{self.utterance_id}: gender probability {self.pred_gender_prob} outside [0, 1]")
        if not (math.isfinite(self.true_age) and math.isfinite(self.pred_age)):
            raise ValueError(f"{self.utterance_id}: ages must be finite")


def gender_decision(prob: float) -> str:
    """Male iff P(male) >= 0.5."""
    return "male" if prob >= 0.5 else "female"


@dataclass
class GroupMetrics:
    count: int
    gender_accuracy: float
    age_mae: float
    age_rmse: float


@dataclass
class EvalReport:
    groups: dict  # group name -> GroupMetrics, or None when the group is empty
    features: str = "-"
    pretrained_on: str = "-"

    def to_dict(self) -> dict:
        return {"features": self.features, "pretrained_on": self.pretrained_on,
                "groups": {g: (asdict(m) if m is not None else None) for g, m in self.groups.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        groups = {g: (GroupMetrics(**m) if m is not None else None) for g, m in d["groups"].items()}
        return cls(groups, d.get("features", "-"), d.get("pretrained_on", "-"))


def _group_metrics(recs: Sequence[PredictionRecord]) -> Optional[GroupMetrics]:
    if not recs:
        return None
    err = np.array([r.pred_age - r.true_age for r in recs], dtype=np.float64)
    hits = sum(gender_decision(r.pred_gender_prob) == r.true_gender for r in recs)
    return GroupMetrics(len(recs), hits / len(recs), float(np.mean(np.abs(err))),
                        float(np.sqrt(np.mean(err ** 2))))


def compute_metrics(records: Iterable[PredictionRecord], features: str = "-",
                    pretrained_on: str = "-") -> EvalReport:
    records = list(records)
    if not records:
        raise ValueError("cannot score an empty prediction set")
    groups = {"all": _group_metrics(records)}
    for g in ("female", "male"):
        groups[g] = _group_metrics([r for r in records if r.true_gender == g])
    return EvalReport(groups, features, pretrained_on)


def _fmt(value, spec):
    return "n/a" if value is None else format(value, spec)


def render_report(report: EvalReport, fmt: str = "text") -> str:
    """Text tables use the usual results layout (two-decimal MAE/RMSE, accuracy as
    a one-decimal percentage); csv and json keep full precision."""
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["features", "pretrained_on", "group", "count", "accuracy", "mae", "rmse"])
        for g in GROUPS:
            m = report.groups.get(g)
            if m is None:
                w.writerow([report.features, report.pretrained_on, g, 0, "", "", ""])
            else:
                w.writerow([report.features, report.pretrained_on, g, m.count,
                            repr(m.gender_accuracy), repr(m.age_mae), repr(m.age_rmse)])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")

    rows_g, rows_a = [], []
    for g in GROUPS:
        m = report.groups.get(g)
        acc = None if m is None else 100.0 * m.gender_accuracy
        rows_g.append((report.features, report.pretrained_on, g, _fmt(acc, ".1f") + ("%" if m else "")))
        rows_a.append((report.features, report.pretrained_on, g,
                       _fmt(m and m.age_mae, ".2f"), _fmt(m and m.age_rmse, ".2f")))
    return (_table("Gender classification", ("Features", "Pretrained on", "Group", "Accuracy"), rows_g)
            + "\n" + _table("Age estimation", ("Features", "Pretrained on", "Group", "MAE", "RMSE"), rows_a))


def _table(title, header, rows) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [title, line(header), line("-" * w for w in widths)]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def parse_text_report(text: str) -> dict:
    """Read the numeric cells back out of a text rendering:
    ``{group: {"accuracy": pct, "mae": x, "rmse": y}}``."""
    out = {g: {} for g in GROUPS}
    section = None
    for line in text.splitlines():
        if line.startswith("Gender classification"):
            section = "gender"
        elif line.startswith("Age estimation"):
            section = "age"
        cells = line.split()
        if not cells or cells[0] == "Features" or section is None:
            continue
        group = next((c for c in cells if c in GROUPS), None)
        if group is None:
            continue
        tail = cells[cells.index(group) + 1:]
        if section == "gender" and tail and tail[0] != "n/a":
            out[group]["accuracy"] = float(tail[0].rstrip("%"))
        elif section == "age" and len(tail) == 2 and tail[0] != "n/a":
            out[group]["mae"], out[group]["rmse"] = float(tail[0]), float(tail[1])
    return out


def write_predictions(path, preds: Sequence[PredictionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(asdict(p)) + "\n")


def read_predictions(path) -> list[PredictionRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PredictionRecord(**json.loads(line)) for line in fh if line.strip()]


def predict_features(model: AgeGenderNet, feats: np.ndarray) -> tuple[float, float]:
    """(P(male), age in years) for one T x F feature matrix, inference mode."""
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.as_tensor(feats, dtype=dtype).unsqueeze(0))
    prob = float(torch.sigmoid(out[GENDER])[0])
    return prob, float(out[AGE_REG][0])


def predict(model: AgeGenderNet, records: Sequence[UtteranceRecord], feature_config: FeatureConfig,
            *, table=None, vad_threshold_db: float = 40.0) -> list[PredictionRecord]:
    """Score labelled records on their full VAD-trimmed utterances.
    Undecodable files are skipped with a warning."""
    kw = {} if table is None else {"table": table}
    preds = []
    for rec in records:
        if rec.gender is None or (rec.age_years is None and rec.age_bin is None):
            raise ValueError(f"{rec.record_id}: evaluation needs gender and age labels")
        try:
            feats = featurize_record(rec, feature_config, mode="full", vad_threshold_db=vad_threshold_db)
        except (audio.AudioError, OSError) as exc:
            log.warning("skipping %s: %s", rec.record_id, exc)
            continue
        prob, age = predict_features(model, feats)
        preds.append(PredictionRecord(rec.record_id, rec.gender, prob, regression_target(rec, **kw), age))
    return preds
