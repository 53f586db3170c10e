"""Modified Laplace log-likelihood and the cohort comparison report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInput, NonFiniteInput

SIGMA_FLOOR = 70.0
DELTA_CAP = 1000.0

# Leaderboard scores on the challenge test cohort; static comparison rows only.
REFERENCE_SCORES = (
    ("Kaggle 1st place", -6.8305),
    ("Kaggle 2nd place", -6.8311),
    ("Kaggle 3rd place", -6.8336),
    ("Fibrosis-Net", -6.8188),
)


@dataclass(frozen=True)
class ScoredPrediction:
    fvc_true: float
    fvc_predicted: float
    sigma: float


def laplace_log_likelihood(p: ScoredPrediction) -> float:
    values = (p.fvc_true, p.fvc_predicted, p.sigma)
    if not all(math.isfinite(float(v)) for v in values):
        raise NonFiniteInput(f"non-finite value in {p}")
    sigma_clipped = max(float(p.sigma), SIGMA_FLOOR)
    delta = min(abs(float(p.fvc_true) - float(p.fvc_predicted)), DELTA_CAP)
    return -math.sqrt(2.0) * delta / sigma_clipped - math.log(math.sqrt(2.0) * sigma_clipped)


def score_cohort(predictions: Iterable[ScoredPrediction]) -> float:
    scores = [laplace_log_likelihood(p) for p in predictions]
    if not scores:
        raise EmptyInput("cannot score an empty cohort")
    return float(np.mean(scores))


def optimal_sigma(delta: float) -> float:
    """The sigma that maximizes the score for a fixed absolute error."""
    return max(SIGMA_FLOOR, math.sqrt(2.0) * min(abs(delta), DELTA_CAP))


# ------------------------------------------------------- evaluation points


def select_eval_points(rows: Sequence[dict], mode: str = "all") -> list:
    """Choose evaluation rows per patient.

    ``rows`` carry ``patient`` and ``week`` keys.  ``"all"`` keeps every
    row, ``"last3"`` keeps each patient's three latest weeks.
    """
    if mode == "all":
        return list(rows)
    if mode != "last3":
        raise ValueError(f"unknown evaluation mode {mode!r}")
    by_patient = {}
    for r in rows:
        by_patient.setdefault(r["patient"], []).append(r)
    keep = []
    for pid in sorted(by_patient):
        keep.extend(sorted(by_patient[pid], key=lambda r: r["week"])[-3:])
    return keep


def read_prediction_csv(text: str) -> dict:
    """``Patient_Week,FVC,Confidence`` -> {(patient, week): (fvc, sigma)}."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["Patient_Week", "FVC", "Confidence"]:
        raise ValueError(f"prediction CSV header must be Patient_Week,FVC,Confidence; got {reader.fieldnames}")
    out = {}
    for row in reader:
        pid, _, week = row["Patient_Week"].rpartition("_")
        out[(pid, int(week))] = (float(row["FVC"]), float(row["Confidence"]))
    return out


def format_prediction_csv(rows: Iterable[tuple]) -> str:
    """Rows of ``(patient, week, fvc, sigma)`` -> submission-style CSV text."""
    lines = ["Patient_Week,FVC,Confidence"]
    for pid, week, fvc, sigma in rows:
        lines.append(f"{pid}_{int(week)},{float(fvc):.1f},{float(sigma):.1f}")
    return "\n".join(lines) + "\n"


def read_truth_csv(text: str) -> dict:
    """Accepts either ``Patient_Week,FVC`` or the metadata schema (Patient,Weeks,FVC,...)."""
    reader = csv.DictReader(io.StringIO(text))
    fields = [f.strip() for f in reader.fieldnames or []]
    out = {}
    for row in reader:
        row = {k.strip(): v for k, v in row.items()}
        if "Patient_Week" in fields:
            pid, _, week = row["Patient_Week"].rpartition("_")
        elif {"Patient", "Weeks"} <= set(fields):
            pid, week = row["Patient"], row["Weeks"]
        else:
            raise ValueError(f"truth CSV needs Patient_Week or Patient,Weeks columns; got {fields}")
        out[(pid.strip(), int(week))] = float(row["FVC"])
    return out


def score_files(pred_text: str, truth_text: str, mode: str = "all") -> tuple:
    """Join predictions with ground truth; returns (mean score, n points)."""
    preds = read_prediction_csv(pred_text)
    truth = read_truth_csv(truth_text)
    rows = [{"patient": pid, "week": week} for (pid, week) in truth if (pid, week) in preds]
    rows = select_eval_points(rows, mode)
    scored = [
        ScoredPrediction(truth[(r["patient"], r["week"])], *preds[(r["patient"], r["week"])]) for r in rows
    ]
    return score_cohort(scored), len(scored)


# ------------------------------------------------------------------ report


def render_report(results: Sequence[tuple], include_reference: bool = True) -> str:
    """Plain-text table: method name and Laplace log likelihood."""
    rows = list(REFERENCE_SCORES) if include_reference else []
    body = [(name, score) for name, score in results]
    width = max(len("Method"), *(len(n) for n, _ in rows + body))
    rule = "-" * (width + 26)
    out = [f"{'Method':<{width}} | Laplace Log Likelihood", rule]
    for name, score in rows:
        out.append(f"{name:<{width}} | {score:.4f}")
    if body:
        if rows:
            out.append(rule)
        for name, score in body:
            out.append(f"{name:<{width}} | {score:.4f}")
    return "\n".join(out) + "\n"


def report_json(results: Sequence[tuple], n_points: int | None = None) -> str:
    doc = {
        "results": [{"method": n, "laplace_log_likelihood": s} for n, s in results],
        "reference": [{"method": n, "laplace_log_likelihood": s} for n, s in REFERENCE_SCORES],
    }
    if n_points is not None:
        doc["n_points"] = n_points
    return json.dumps(doc, indent=2, sort_keys=True)
