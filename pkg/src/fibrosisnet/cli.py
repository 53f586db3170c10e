"""Command-line entry point: ``fibrosisnet <command> [options]``.

Every command writes ``manifest.json`` into its output directory with the
resolved configuration, the seed, SHA-256 hashes of inputs and outputs, and
library versions.  Any option can also be supplied through an environment
variable named ``FNET_<OPTION>`` (dashes become underscores); explicit flags
win over the environment.

Exit codes: 0 success, 1 invalid invocation or configuration, 2 failure
while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import BackboneConfig
from .errors import FibrosisNetError, IoFailure
from .explain import OcclusionConfig, occlusion_attribution, render_overlay
from .ingest import read_cohort
from .predictor import (
    EnsembleConfig,
    FibrosisModel,
    TrainConfig,
    encode_metadata,
    patient_slopes,
    predict_from_slopes,
    train,
    training_mae,
)
from .preprocess import PreprocessConfig, preprocess_volume
from .scoring import format_prediction_csv, render_report, report_json, score_files
from .synth import SynthConfig, export_cohort, sample_cohort

log = logging.getLogger("fibrosisnet")

MANIFEST_NAME = "manifest.json"
ENV_PREFIX = "FNET_"


class UsageError(Exception):
    def __init__(self, usage: str, message: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(self.format_usage(), message)


# ------------------------------------------------------------------ hashing


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(path: Path) -> str:
    """Digest of a file, or of every (relative path, file digest) pair under a directory."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode("utf-8"))
        h.update(b"\0")
        h.update(sha256_file(f).encode("ascii"))
        h.update(b"\n")
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict) -> Path:
    out_dir = Path(out_dir)
    artifacts = {
        p.relative_to(out_dir).as_posix(): sha256_file(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != MANIFEST_NAME
    }
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {name: sha256_tree(Path(p)) for name, p in sorted(inputs.items())},
        "artifacts": artifacts,
        "versions": {
            "fibrosisnet": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


# ------------------------------------------------------------------ parser


def _add_preprocess_flags(p):
    g = p.add_argument_group("preprocessing")
    g.add_argument("--target-size", type=int, nargs=2, metavar=("H", "W"))
    g.add_argument("--window-level", type=float)
    g.add_argument("--window-width", type=float)
    g.add_argument("--lower-fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fibrosisnet", description="FVC decline prediction from CT volumes and clinical metadata.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("ingest", help="validate a cohort directory and summarize it")
    p.add_argument("--data", type=Path, required=True, help="directory with metadata.csv and one DICOM folder per patient")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("preprocess", help="write normalized lower-lung slices as .npy arrays")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, help="JSON file with a 'preprocess' section")
    _add_preprocess_flags(p)

    p = sub.add_parser("synth", help="generate and export a synthetic cohort")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-patients", type=int, default=8)
    p.add_argument("--dims", type=int, nargs=3, metavar=("SLICES", "H", "W"), default=[10, 64, 64])
    p.add_argument("--fvc-noise", type=float, help="FVC measurement noise std (ml)")

    p = sub.add_parser("train", help="train a model bundle")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="model bundle directory")
    p.add_argument("--config", type=Path, help="JSON with optional preprocess/backbone/ensemble/train sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--head-init", choices=["ridge", "kaiming"])
    p.add_argument("--enet-lambda", type=float)
    p.add_argument("--enet-alpha", type=float)
    p.add_argument("--enet-grid-search", action="store_true", default=None)
    p.add_argument("--cnn-weight", type=float)
    p.add_argument("--sigma0", type=float)
    p.add_argument("--sigma-week-gain", type=float)
    p.add_argument("--sigma-dispersion-gain", type=float)
    p.add_argument("--sigma-source", choices=["formula", "quantile"])
    _add_preprocess_flags(p)

    p = sub.add_parser("predict", help="predict FVC and confidence for every patient")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--weeks", type=str, help="comma-separated target weeks; default: each patient's follow-up weeks")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("score", help="Laplace log likelihood of predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--mode", choices=["all", "last3"], default="all")
    p.add_argument("--name", default="this run", help="method name in the report")

    p = sub.add_parser("explain", help="occlusion attribution for one patient slice")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--slice", type=int, default=0, help="index into the selected lower-lung slices")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--baseline-value", type=float, default=0.0)
    p.add_argument("--format", choices=["pgm", "png"], default="pgm")
    p.add_argument("--threads", type=int, default=1)
    return parser


def _env_value(action: argparse.Action, raw: str):
    if isinstance(action, argparse._StoreTrueAction):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    convert = action.type or str
    if action.nargs not in (None, "?"):
        return [convert(v) for v in raw.replace(",", " ").split()]
    return convert(raw)


def apply_env_overrides(parser: argparse.ArgumentParser, environ) -> None:
    """Turn ``FNET_*`` variables into option defaults for every subcommand."""
    parsers = [parser]
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            parsers.extend(action.choices.values())
    for p in parsers:
        for action in p._actions:
            if not action.option_strings or action.dest in ("help",):
                continue
            key = ENV_PREFIX + action.dest.upper()
            if key in environ:
                try:
                    action.default = _env_value(action, environ[key])
                except ValueError as exc:
                    raise UsageError(p.format_usage(), f"bad value for {key}: {exc}") from exc
                action.required = False


# ------------------------------------------------------------------ configs


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.is_file():
        raise ValueError(f"config file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    unknown = set(doc) - {"preprocess", "backbone", "ensemble", "train"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _preprocess_config(args, doc: dict) -> PreprocessConfig:
    values = dict(doc.get("preprocess", {}))
    for flag, key in (("window_level", "window_level"), ("window_width", "window_width"), ("lower_fraction", "lower_fraction")):
        if getattr(args, flag, None) is not None:
            values[key] = getattr(args, flag)
    if getattr(args, "target_size", None) is not None:
        values["target_size"] = list(args.target_size)
    return PreprocessConfig.from_dict(values)


def _train_configs(args, doc: dict):
    pcfg = _preprocess_config(args, doc)
    if "backbone" in doc:
        bcfg = BackboneConfig(**doc["backbone"])
    else:
        bcfg = BackboneConfig.desk(pcfg.target_size)

    ens = dict(doc.get("ensemble", {}))
    for flag, key in (
        ("cnn_weight", "cnn_weight"),
        ("sigma0", "sigma0"),
        ("sigma_week_gain", "sigma_week_gain"),
        ("sigma_dispersion_gain", "sigma_dispersion_gain"),
        ("sigma_source", "sigma_source"),
    ):
        if getattr(args, flag) is not None:
            ens[key] = getattr(args, flag)
    ecfg = EnsembleConfig(**ens)

    tr = dict(doc.get("train", {}))
    for flag, key in (
        ("seed", "seed"),
        ("steps", "steps"),
        ("batch_size", "batch_size"),
        ("lr", "base_lr"),
        ("head_init", "head_init"),
        ("enet_lambda", "elastic_net_lambda"),
        ("enet_alpha", "elastic_net_alpha"),
        ("enet_grid_search", "elastic_net_grid_search"),
    ):
        if getattr(args, flag) is not None:
            tr[key] = getattr(args, flag)
    tcfg = TrainConfig(**tr)
    return pcfg, bcfg, ecfg, tcfg


def _require_dir(path: Path, what: str) -> None:
    if not Path(path).is_dir():
        raise ValueError(f"{what} directory not found: {path}")


def _require_cohort(path: Path) -> None:
    _require_dir(path, "data")
    if not (Path(path) / "metadata.csv").is_file():
        raise ValueError(f"no metadata.csv in {path}")


def _require_file(path: Path, what: str) -> None:
    if not Path(path).is_file():
        raise ValueError(f"{what} file not found: {path}")


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {path}: {exc}") from exc
    return path


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- commands
# Each command splits into a validation step, whose errors map to exit 1,
# and a work step, whose errors map to exit 2.


def _validate_ingest(args):
    _require_cohort(args.data)
    return {}


def _cmd_ingest(args, _):
    cohort = read_cohort(args.data)
    out = _prepare_out(args.out)
    summary = {
        "patients": [
            {
                "patient_id": rec.patient_id,
                "n_visits": len(rec.visits),
                "weeks": [v.week for v in rec.visits],
                "volume_shape": list(vol.shape),
                "z_range": [min(vol.z_positions), max(vol.z_positions)],
            }
            for rec, vol in cohort
        ]
    }
    _write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"ingested {len(cohort)} patients")
    write_manifest(out, "ingest", {}, None, {"data": args.data})


def _validate_preprocess(args):
    _require_cohort(args.data)
    return {"pcfg": _preprocess_config(args, _load_config_file(args.config))}


def _cmd_preprocess(args, ctx):
    pcfg = ctx["pcfg"]
    cohort = read_cohort(args.data)
    out = _prepare_out(args.out)
    for rec, vol in cohort:
        images = preprocess_volume(vol, pcfg)
        try:
            np.save(out / f"{rec.patient_id}.npy", images, allow_pickle=False)
        except OSError as exc:
            raise IoFailure(f"cannot write {out}: {exc}") from exc
    print(f"preprocessed {len(cohort)} volumes")
    write_manifest(out, "preprocess", {"preprocess": json.loads(pcfg.to_json())}, None, {"data": args.data})


def _validate_synth(args):
    kw = {"seed": args.seed, "n_patients": args.n_patients, "volume_dims": tuple(args.dims)}
    if args.fvc_noise is not None:
        kw["fvc_noise_std"] = args.fvc_noise
    return {"scfg": SynthConfig(**kw)}


def _cmd_synth(args, ctx):
    scfg = ctx["scfg"]
    out = _prepare_out(args.out)
    written = export_cohort(sample_cohort(scfg), out)
    print(f"wrote {len(written)} files for {scfg.n_patients} patients")
    write_manifest(out, "synth", {"synth": json.loads(scfg.to_json())}, scfg.seed, {})


def _validate_train(args):
    _require_cohort(args.data)
    pcfg, bcfg, ecfg, tcfg = _train_configs(args, _load_config_file(args.config))
    if tuple(bcfg.input_size) != tuple(pcfg.target_size):
        raise ValueError(f"backbone input {bcfg.input_size} does not match target size {pcfg.target_size}")
    return {"pcfg": pcfg, "bcfg": bcfg, "ecfg": ecfg, "tcfg": tcfg}


def _cmd_train(args, ctx):
    cohort = read_cohort(args.data)
    pcfg, tcfg = ctx["pcfg"], ctx["tcfg"]
    images = [preprocess_volume(vol, pcfg) for _, vol in cohort]
    result = train(cohort, tcfg, pcfg, ctx["bcfg"], ctx["ecfg"], images=images)
    mae = training_mae(result.model, cohort, images)
    result.model.meta["training_mae"] = mae
    out = _prepare_out(args.out)
    result.model.save(out)
    _write_text(out / "losses.json", json.dumps(result.losses) + "\n")
    print(f"trained on {len(cohort)} patients: final loss {result.losses[-1] if result.losses else float('nan'):.2f}, training MAE {mae:.2f} ml")
    config = {
        "preprocess": json.loads(pcfg.to_json()),
        "backbone": ctx["bcfg"].to_dict(),
        "ensemble": asdict(ctx["ecfg"]),
        "train": _jsonable(asdict(tcfg)),
    }
    write_manifest(out, "train", config, tcfg.seed, {"data": args.data})


def _parse_weeks(text: str | None):
    if text is None:
        return None
    try:
        weeks = [int(w) for w in text.split(",") if w.strip()]
    except ValueError as exc:
        raise ValueError(f"--weeks must be comma-separated integers: {text}") from exc
    if not weeks:
        raise ValueError("--weeks is empty")
    return weeks


def _validate_predict(args):
    _require_cohort(args.data)
    _require_dir(args.model, "model")
    if args.threads < 1:
        raise ValueError("--threads must be >= 1")
    return {"weeks": _parse_weeks(args.weeks)}


def _cmd_predict(args, ctx):
    model = FibrosisModel.load(args.model)
    cohort = read_cohort(args.data)
    rows = []
    for rec, vol in cohort:
        ps = patient_slopes(vol, rec, model, threads=args.threads)
        weeks = ctx["weeks"] or [v.week for v in rec.visits[1:]]
        for week in weeks:
            pred = predict_from_slopes(ps, week, model)
            rows.append((rec.patient_id, week, pred.fvc_ml, pred.sigma_ml))
    out = _prepare_out(args.out)
    _write_text(out / "predictions.csv", format_prediction_csv(rows))
    print(f"wrote {len(rows)} predictions")
    config = {"weeks": ctx["weeks"], "model_seed": model.meta.get("seed")}
    write_manifest(out, "predict", config, model.meta.get("seed"), {"data": args.data, "model": args.model})


def _validate_score(args):
    _require_file(args.pred, "prediction")
    _require_file(args.truth, "truth")
    return {}


def _cmd_score(args, _):
    try:
        pred_text = args.pred.read_text(encoding="utf-8")
        truth_text = args.truth.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    score, n = score_files(pred_text, truth_text, args.mode)
    print(f"{score:.5f}")
    out = _prepare_out(args.out)
    results = [(args.name, score)]
    _write_text(out / "report.txt", render_report(results))
    _write_text(out / "report.json", report_json(results, n) + "\n")
    write_manifest(out, "score", {"mode": args.mode, "name": args.name}, None, {"pred": args.pred, "truth": args.truth})


def _validate_explain(args):
    _require_cohort(args.data)
    _require_dir(args.model, "model")
    if args.threads < 1:
        raise ValueError("--threads must be >= 1")
    return {"ocfg": OcclusionConfig(args.patch, args.stride, args.baseline_value)}


def _cmd_explain(args, ctx):
    model = FibrosisModel.load(args.model)
    cohort = {rec.patient_id: (rec, vol) for rec, vol in read_cohort(args.data)}
    if args.patient not in cohort:
        raise FibrosisNetError(f"patient {args.patient!r} not in {args.data}")
    rec, vol = cohort[args.patient]
    images = preprocess_volume(vol, model.preprocess_cfg)
    if not 0 <= args.slice < len(images):
        raise FibrosisNetError(f"slice {args.slice} out of range (0..{len(images) - 1})")
    image = images[args.slice]
    clinical = encode_metadata(rec, rec.baseline, model.stats)
    attribution = occlusion_attribution(model, image, clinical, ctx["ocfg"], threads=args.threads)
    out = _prepare_out(args.out)
    stem = f"{args.patient}_slice{args.slice:03d}"
    render_overlay(image, attribution, out / f"{stem}.{args.format}")
    try:
        np.save(out / f"{stem}_attribution.npy", attribution, allow_pickle=False)
    except OSError as exc:
        raise IoFailure(f"cannot write {out}: {exc}") from exc
    peak = np.unravel_index(int(np.argmax(attribution)), attribution.shape)
    print(f"peak attribution {attribution.max():.4g} at row {peak[0]}, col {peak[1]}")
    config = {"patient": args.patient, "slice": args.slice, "occlusion": asdict(ctx["ocfg"]), "format": args.format}
    write_manifest(out, "explain", config, model.meta.get("seed"), {"data": args.data, "model": args.model})


COMMANDS = {
    "ingest": (_validate_ingest, _cmd_ingest),
    "preprocess": (_validate_preprocess, _cmd_preprocess),
    "synth": (_validate_synth, _cmd_synth),
    "train": (_validate_train, _cmd_train),
    "predict": (_validate_predict, _cmd_predict),
    "score": (_validate_score, _cmd_score),
    "explain": (_validate_explain, _cmd_explain),
}


def run(argv=None, environ=None) -> int:
    parser = build_parser()
    environ = os.environ if environ is None else environ
    try:
        apply_env_overrides(parser, environ)
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    validate, work = COMMANDS[args.command]
    try:
        ctx = validate(args)
    except (ValueError, TypeError, FibrosisNetError) as exc:
        sys.stderr.write(f"error [cli/{args.command}]: {exc}\n")
        return 1
    try:
        work(args, ctx)
    except FibrosisNetError as exc:
        sys.stderr.write(f"error [{exc.component}]: {exc}\n")
        return 2
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"error [{args.command}]: {exc}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
