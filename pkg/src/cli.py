"""
Command-line driver for the ONH pipeline.

Subcommands: phantom, params, cloud, train, eval, criticals, stats.
Options resolve as defaults < JSON --config file < explicit flags; the
resolved options are written to <out>/effective_config.json and every run
appends one timestamped line to <out>/run_log.txt.

Exit codes: 0 success, 1 computation error, 2 usage or IO error. Errors are
reported as one JSON object on standard error.
"""

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.cloud import AugmentConfig, build_cloud, read_cloud, write_cloud
from src.config import (
    AVERAGE_GRID_PITCH_UM,
    BATCH_SIZE,
    CLOUD_LATERAL_PITCH_UM,
    DEFAULT_SAMPLE_N,
    DENSITY_RADIUS_UM,
    EFFECTIVE_CONFIG_FILE,
    EPOCHS,
    MANIFEST_FILE,
    RUN_LOG_FILE,
    TASKS,
)
from src.criticals import (
    average_geometry,
    density,
    extract_all_critical_points,
    is_sufficient,
    project_criticals,
    tissue_breakdown,
)
from src.errors import OnhError
from src.export_reports import (
    export_critical_sets,
    export_density,
    export_eval_report,
    export_parameters,
    export_summary,
    parameter_table,
    print_banner,
    write_csv,
    write_json,
)
from src.parameters import ExtractionResult, OnhParameters, extract_all
from src.phantom import PhantomConfig, cohort, cohort_manifest, default_group_specs, generate
from src.pointnet import (
    PointNetDims,
    TrainConfig,
    auc,
    confusion_counts,
    load_model,
    save_model,
    score_clouds,
    task_dataset,
    train,
)
from src.stats import demographics_table, summarize
from src.volume_io import LabelVolume, SeverityGroup, SubjectMeta, load_volume, save_volume, severity_of

EXIT_OK = 0
EXIT_COMPUTATION = 1
EXIT_USAGE = 2

USAGE_CODES = {"IO_FAILURE", "MISSING_INPUT", "USAGE"}

# Defaults per subcommand; flags left unset fall back to the config file, then here
DEFAULTS: Dict[str, dict] = {
    "phantom": {"n_per_group": 1, "groups": [g.value for g in SeverityGroup], "single": False,
                "phantom": {}},
    "params": {},
    "cloud": {"pitch_x_um": CLOUD_LATERAL_PITCH_UM[0], "pitch_y_um": CLOUD_LATERAL_PITCH_UM[1]},
    "train": {"task": "normal-mild", "epochs": EPOCHS, "batch_size": BATCH_SIZE, "sample_n": DEFAULT_SAMPLE_N,
              "cross_validate": True, "use_tnets": True, "shuffle_labels": False, "dims": {}, "augment": {}},
    "eval": {},
    "criticals": {"task": None, "radius_um": DENSITY_RADIUS_UM, "pitch_um": AVERAGE_GRID_PITCH_UM,
                  "volumes": None, "all_eyes": False},
    "stats": {"manifest": None},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out: Optional[str] = None
    threads: int = 1
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "out": self.out,
                "threads": self.threads, "options": self.options}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="run_onh.py", description="ONH phenotyping pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="Global seed (default: 0)")
        p.add_argument("--out", type=str, default=None, help="Output file or directory")
        p.add_argument("--config", type=str, default=None, help="JSON file with option values")
        p.add_argument("--threads", type=int, default=None, help="Worker cap (default: 1)")
        return p

    p = common(sub.add_parser("phantom", help="Generate phantom volumes"))
    p.add_argument("--n-per-group", dest="n_per_group", type=int, default=None)
    p.add_argument("--groups", type=lambda s: s.split(","), default=None,
                   help="Comma-separated severity groups (default: all)")
    p.add_argument("--single", action="store_true", default=None, help="One eye from the base config")
    for name in ("nx", "ny", "nz"):
        p.add_argument(f"--{name}", type=int, default=None)
    for name in ("dx", "dy", "dz"):
        p.add_argument(f"--{name}", type=float, default=None)

    p = common(sub.add_parser("params", help="Extract ONH parameters"))
    p.add_argument("--in", dest="input", type=str, default=None, help=".onhv file or directory")

    p = common(sub.add_parser("cloud", help="Build point clouds"))
    p.add_argument("--in", dest="input", type=str, default=None, help=".onhv file or directory")
    p.add_argument("--pitch-x", dest="pitch_x_um", type=float, default=None)
    p.add_argument("--pitch-y", dest="pitch_y_um", type=float, default=None)

    p = common(sub.add_parser("train", help="Train a PointNet classifier"))
    p.add_argument("--task", choices=sorted(TASKS), default=None)
    p.add_argument("--data", type=str, default=None, help="Directory of .onhpc clouds")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--sample-n", dest="sample_n", type=int, default=None)
    p.add_argument("--no-cv", dest="cross_validate", action="store_false", default=None)
    p.add_argument("--no-tnets", dest="use_tnets", action="store_false", default=None)
    p.add_argument("--shuffle-labels", dest="shuffle_labels", action="store_true", default=None)

    p = common(sub.add_parser("eval", help="Evaluate a trained model"))
    p.add_argument("--model", type=str, default=None)
    p.add_argument("--data", type=str, default=None, help="Directory of .onhpc clouds")

    p = common(sub.add_parser("criticals", help="Critical points, density maps and breakdowns"))
    p.add_argument("--model", type=str, default=None)
    p.add_argument("--data", type=str, default=None, help="Directory of .onhpc clouds")
    p.add_argument("--volumes", type=str, default=None, help="Optional .onhv directory for the average geometry")
    p.add_argument("--task", choices=sorted(TASKS), default=None)
    p.add_argument("--radius", dest="radius_um", type=float, default=None)
    p.add_argument("--pitch", dest="pitch_um", type=float, default=None)
    p.add_argument("--all-eyes", dest="all_eyes", action="store_true", default=None,
                   help="Use every eye of the task instead of the model's test split")

    p = common(sub.add_parser("stats", help="Group statistics of extracted parameters"))
    p.add_argument("--params", type=str, default=None, help="Parameter CSV from the params subcommand")
    p.add_argument("--manifest", type=str, default=None, help="Cohort manifest with groups and demographics")
    return parser


def _read_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise OnhError("cli", "MISSING_INPUT", f"config file {path} does not exist", field=path)
    except (OSError, json.JSONDecodeError) as e:
        raise OnhError("cli", "IO_FAILURE", f"cannot read {path}: {e}", field=path)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file (top level, then the subcommand section) < flags."""
    file_values = _read_json(args.config) if args.config else {}
    commands = set(DEFAULTS)
    top = {k: v for k, v in file_values.items() if k not in commands}
    section = file_values.get(args.command, {})
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config")}

    merged = {"seed": 0, "out": None, "threads": 1}
    merged.update(DEFAULTS[args.command])
    merged.update(top)
    merged.update(section)
    merged.update(flags)
    return RunConfig(
        command=args.command,
        seed=int(merged.pop("seed")),
        out=merged.pop("out"),
        threads=max(1, int(merged.pop("threads"))),
        options=merged,
    )


def _require(run: RunConfig, name: str) -> str:
    value = run.options.get(name) if name != "out" else run.out
    if not value:
        raise OnhError("cli", "USAGE", f"{run.command} needs --{name.replace('_', '-')}", field=name)
    return value


def _inputs(path: str, suffix: str) -> List[Path]:
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob(f"*{suffix}"))
        if not files:
            raise OnhError("cli", "MISSING_INPUT", f"no {suffix} files in {path}", field=str(path))
        return files
    if not path.exists():
        raise OnhError("cli", "MISSING_INPUT", f"{path} does not exist", field=str(path))
    return [path]


def _map(fn, items: Sequence, threads: int) -> list:
    """Order-preserving map over a bounded worker pool."""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _eye_id(volume: LabelVolume, path: Path) -> str:
    return volume.meta.id if volume.meta is not None and volume.meta.id else path.stem


def _group_of(volume: LabelVolume) -> str:
    """Severity group from the subject meta; empty when the volume carries none."""
    try:
        return severity_of(volume).value
    except OnhError:
        return ""


def _output_dir(run: RunConfig, is_file: bool = False) -> Path:
    out = Path(_require(run, "out"))
    return out.parent if is_file else out


# =============================================================================
# Subcommands
# =============================================================================

def cmd_phantom(run: RunConfig) -> List[str]:
    out = _output_dir(run)
    base = PhantomConfig.from_dict({**PhantomConfig().to_dict(), **run.options.get("phantom", {})})
    geometry = {k: run.options[k] for k in ("nx", "ny", "nz", "dx", "dy", "dz") if run.options.get(k) is not None}
    base = replace(base, seed=run.seed, **geometry)

    if run.options["single"]:
        print("Generating one phantom eye from the base configuration...")
        volume, truth = generate(base)
        save_volume(volume, out / "phantom.onhv")
        write_csv(parameter_table({"phantom": ExtractionResult(truth.parameters, [])}), out / "ground_truth.csv")
        write_json({"phantom": {"group": None, "meta": None, "config": base.to_dict()}}, out / MANIFEST_FILE)
        return ["1 phantom eye", f"Volume: {out / 'phantom.onhv'}"]

    specs = default_group_specs(base)
    try:
        groups = [SeverityGroup(g.upper()) for g in run.options["groups"]]
    except ValueError:
        raise OnhError("cli", "USAGE", f"unknown group in {run.options['groups']}", field="groups")
    n = int(run.options["n_per_group"])
    print(f"Generating {n} phantom eyes for each of {', '.join(g.value for g in groups)}...")
    eyes = cohort([(specs[g], g) for g in groups], n, run.seed, verbose=True)
    for eye in eyes:
        save_volume(eye.volume, out / f"{eye.eye_id}.onhv")
    truths = {eye.eye_id: ExtractionResult(eye.truth.parameters, []) for eye in eyes}
    write_csv(parameter_table(truths, {eye.eye_id: eye.group.value for eye in eyes}), out / "ground_truth.csv")
    write_json(cohort_manifest(eyes), out / MANIFEST_FILE)
    return [f"{len(eyes)} phantom eyes in {out}", f"Manifest: {out / MANIFEST_FILE}"]


def cmd_params(run: RunConfig) -> List[str]:
    files = _inputs(_require(run, "input"), ".onhv")
    out = Path(_require(run, "out"))
    print(f"Extracting parameters from {len(files)} volume(s)...")

    def one(path):
        volume = load_volume(path)
        return _eye_id(volume, path), _group_of(volume), extract_all(volume)

    extracted = _map(one, files, run.threads)
    results = {eye_id: result for eye_id, _, result in extracted}
    groups = {eye_id: group for eye_id, group, _ in extracted if group}
    n_diag = sum(len(r.diagnostics) for r in results.values())
    if n_diag:
        print(f"Warning: {n_diag} parameter diagnostics recorded")
    export_parameters(results, out, groups)
    return [f"{len(results)} eye(s)", f"Parameters: {out}"]


def cmd_cloud(run: RunConfig) -> List[str]:
    files = _inputs(_require(run, "input"), ".onhv")
    out = _output_dir(run)
    pitch = (float(run.options["pitch_x_um"]), float(run.options["pitch_y_um"]))
    print(f"Building point clouds for {len(files)} volume(s)...")

    def one(path):
        volume = load_volume(path)
        cloud = build_cloud(volume, lateral_pitch_um=pitch, eye_id=_eye_id(volume, path))
        write_cloud(cloud, out / f"{cloud.eye_id}.onhpc")
        return len(cloud)

    sizes = _map(one, files, run.threads)
    return [f"{len(sizes)} cloud(s) in {out}", f"Points per cloud: {min(sizes)}..{max(sizes)}"]


def _load_clouds(path: str, threads: int):
    files = _inputs(path, ".onhpc")
    print(f"Loading {len(files)} point clouds from {path}...")
    return _map(read_cloud, files, threads)


def cmd_train(run: RunConfig) -> List[str]:
    task = run.options["task"]
    clouds = _load_clouds(_require(run, "data"), run.threads)
    chosen, labels = task_dataset(clouds, task)
    if run.options["shuffle_labels"]:
        labels = np.random.default_rng(run.seed).permutation(labels)
        print("Warning: labels are shuffled (null-model run)")

    dims = PointNetDims.from_dict({**PointNetDims().to_dict(), **run.options.get("dims", {}),
                                   "use_tnets": bool(run.options["use_tnets"])})
    augment = AugmentConfig.from_dict({**AugmentConfig().to_dict(), **run.options.get("augment", {}),
                                       "sample_n": int(run.options["sample_n"])})
    cfg = TrainConfig(epochs=int(run.options["epochs"]), batch_size=int(run.options["batch_size"]),
                      seed=run.seed, cross_validate=bool(run.options["cross_validate"]),
                      dims=dims, augment=augment)
    print(f"Training {task}: {int((labels == 0).sum())} vs {int((labels == 1).sum())} eyes")
    model, report = train(chosen, labels, cfg, task=task, verbose=True)

    out = _output_dir(run)
    model_path = out / f"model_{task}.onhpn"
    save_model(model, model_path)
    export_eval_report(report, out / f"eval_{task}.json")
    return [f"Model: {model_path}",
            report.cv_summary(),
            f"Test AUC: {report.test_auc:.3f}"]


def _train_config_of(model) -> TrainConfig:
    return TrainConfig.from_dict(model.meta["train_config"]) if "train_config" in model.meta else TrainConfig()


def cmd_eval(run: RunConfig) -> List[str]:
    model = load_model(_require(run, "model"))
    task = model.meta.get("task") or "normal-mild"
    chosen, labels = task_dataset(_load_clouds(_require(run, "data"), run.threads), task)
    scores = score_clouds(model, chosen, _train_config_of(model), threads=run.threads)
    result = {
        "task": task,
        "n_eyes": len(chosen),
        "auc": auc(scores, labels),
        "confusion": confusion_counts(scores, labels),
        "scores": {c.eye_id: float(s) for c, s in zip(chosen, scores)},
    }
    out = Path(_require(run, "out"))
    write_json(result, out)
    return [f"AUC on {len(chosen)} eyes: {result['auc']:.3f}", f"Report: {out}"]


def _test_split(model, clouds: list, all_eyes: bool) -> list:
    """Clouds of the model's held-out test eyes, or all of them with all_eyes."""
    test_ids = model.meta.get("test_eye_ids")
    if all_eyes:
        return clouds
    if not test_ids:
        print("Warning: the model records no test split; using every eye of the task")
        return clouds
    wanted = set(test_ids)
    chosen = [c for c in clouds if c.eye_id in wanted]
    if not chosen:
        raise OnhError("cli", "MISSING_INPUT", "none of the model's test eyes are in --data", field="data")
    if len(chosen) < len(wanted):
        print(f"Warning: {len(wanted) - len(chosen)} test eye(s) missing from --data")
    return chosen


def cmd_criticals(run: RunConfig) -> List[str]:
    model = load_model(_require(run, "model"))
    task = run.options["task"] or model.meta.get("task") or "normal-mild"
    task_clouds, _ = task_dataset(_load_clouds(_require(run, "data"), run.threads), task)
    if not task_clouds:
        raise OnhError("cli", "MISSING_INPUT", f"no clouds of the {task} groups", field="data")
    chosen = _test_split(model, task_clouds, bool(run.options["all_eyes"]))

    print(f"Extracting critical points from {len(chosen)} eyes...")
    sets = extract_all_critical_points(model, chosen, threads=run.threads)
    insufficient = [c.eye_id for c, s in zip(chosen, sets) if not is_sufficient(model, c, s)]
    if insufficient:
        print(f"Warning: critical subsets change the logits for {len(insufficient)} eye(s)")

    # the average geometry uses every eye of the task
    if run.options.get("volumes"):
        eyes = [load_volume(p) for p in _inputs(run.options["volumes"], ".onhv")]
    else:
        eyes = task_clouds
    geometry = average_geometry(eyes, label=task, pitch=float(run.options["pitch_um"]))
    projected = density(project_criticals(sets, geometry), radius=float(run.options["radius_um"]))
    breakdown = tissue_breakdown(sets)

    out = _output_dir(run)
    export_critical_sets(sets, out / f"critical_points_{task}.csv")
    export_density(projected, geometry, breakdown, out, task)
    return [f"{breakdown.total} critical points from {len(sets)} eyes",
            f"Neural fraction: {breakdown.neural_fraction:.2f}",
            f"Outputs: {out}"]


def _read_params(path: str) -> pd.DataFrame:
    files = _inputs(path, ".csv")
    try:
        return pd.concat([pd.read_csv(f, dtype={"eye_id": str}) for f in files], ignore_index=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise OnhError("cli", "IO_FAILURE", f"cannot read {path}: {e}", field=path)


def cmd_stats(run: RunConfig) -> List[str]:
    df = _read_params(_require(run, "params"))
    manifest = _read_json(run.options["manifest"]) if run.options.get("manifest") else {}
    if "group" not in df.columns:
        df["group"] = None
    if manifest:
        listed = [(manifest.get(e) or {}).get("group") for e in df["eye_id"]]
        df["group"] = [g if isinstance(g, str) and g else m for g, m in zip(df["group"], listed)]
    df = df[df["group"].notna() & (df["group"] != "")]
    if df.empty:
        raise OnhError("cli", "USAGE", "no eye has a group; pass --manifest", field="manifest")

    eyes = [(OnhParameters.from_row(row), SeverityGroup(row["group"])) for _, row in df.iterrows()]
    print(f"Summarizing {len(eyes)} eyes...")
    report = summarize(eyes)
    out = _output_dir(run)
    export_summary(report, out)

    metas = [(SubjectMeta.from_dict(entry["meta"]), SeverityGroup(entry["group"]))
             for entry in manifest.values() if entry.get("meta") and entry.get("group")]
    lines = [f"{len(eyes)} eyes in {len(report.groups)} groups", f"Outputs: {out}"]
    if metas:
        write_csv(demographics_table(metas), out / "demographics.csv")
        lines.append("Demographics: demographics.csv")
    for note in report.notes:
        print(f"Warning: {note}")
    return lines


COMMANDS = {
    "phantom": cmd_phantom,
    "params": cmd_params,
    "cloud": cmd_cloud,
    "train": cmd_train,
    "eval": cmd_eval,
    "criticals": cmd_criticals,
    "stats": cmd_stats,
}


def _log_dir(run: RunConfig) -> Optional[Path]:
    if not run.out:
        return None
    out = Path(run.out)
    return out.parent if out.suffix else out


def _append_run_log(run: RunConfig, status: str) -> None:
    log_dir = _log_dir(run)
    if log_dir is None:
        return
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
        stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        with open(log_dir / RUN_LOG_FILE, "a") as f:
            f.write(f"{stamp}\t{run.command}\tseed={run.seed}\t{status}\n")
    except OSError:
        print(f"Warning: cannot append to {log_dir / RUN_LOG_FILE}")


def _report_error(error: dict) -> None:
    sys.stderr.write(json.dumps(error, sort_keys=True) + "\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except UsageError as e:
        _report_error({"error": "cli.USAGE", "message": str(e), "field": None})
        return EXIT_USAGE

    run = None
    try:
        run = resolve_config(args)
        print("=" * 60)
        print(f"ONH pipeline: {run.command}")
        print("=" * 60)
        log_dir = _log_dir(run)
        if log_dir is not None:
            write_json(run.to_dict(), log_dir / EFFECTIVE_CONFIG_FILE)
        lines = COMMANDS[run.command](run)
    except OnhError as e:
        _report_error(e.to_dict())
        if run is not None:
            _append_run_log(run, f"error {e.qualified_code}")
        return EXIT_USAGE if e.code in USAGE_CODES else EXIT_COMPUTATION

    print_banner(f"{run.command} complete", lines)
    _append_run_log(run, "ok")
    return EXIT_OK
