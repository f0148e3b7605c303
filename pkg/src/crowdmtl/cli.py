"""Command-line surface: one binary, subcommands for each pipeline stage.

Every command resolves its configuration (flag > config file > default),
writes the resolved config plus a run manifest into the output directory,
and emits only new artifact files -- inputs are never mutated. Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .annotations import (
    ATTRIBUTES,
    QcPolicy,
    RATER_KINDS,
    SEGMENTS,
    concordance,
    load_traces,
    median_fuse,
    quality_filter,
    resample_trace,
    window_last,
    write_traces,
)
from .design import (
    TaskDataset,
    TaskGraph,
    apply_standardizer,
    assemble_design,
    column_standardizer,
    discretize_levels,
    load_features_csv,
    load_graph_json,
    load_labels_csv,
)
from .errors import DataError, NumericalError
from .experiments import (
    MODEL_ORDER,
    P1Config,
    P1Data,
    P2Config,
    P2Data,
    SynthConfig,
    run_p1,
    run_p2,
    synth_generate,
    synth_generate_p2,
)
from .solvers import HYPERPARAMS, MODEL_KINDS, ModelSpec, SolverConfig, fit

FUSED_COLUMNS = ("clip_id", "rater_kind", "attribute", "time_s", "value")

BASE_MODELS = tuple(m for m in MODEL_ORDER if m != "eg_mtl_7")


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1 (argparse defaults to 2, which we reserve for data)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _float_repr(x) -> str:
    return repr(float(x))


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class RunManifest:
    """Record of one invocation: enough to reproduce it byte for byte."""

    command: str
    config_digest: str
    master_seed: int | None
    artifacts: tuple
    tool_version: str


def _emit_run(out_dir, command: str, resolved: dict, seed, artifacts) -> RunManifest:
    """Write resolved_config.json and manifest.json; digest covers the config
    file bytes so it can be recomputed from the emitted file alone."""
    cfg_path = os.path.join(out_dir, "resolved_config.json")
    _write_json(cfg_path, resolved)
    with open(cfg_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    manifest = RunManifest(
        command=command,
        config_digest=digest,
        master_seed=seed,
        artifacts=tuple(sorted(artifacts)),
        tool_version=__version__,
    )
    payload = asdict(manifest)
    payload["artifacts"] = list(manifest.artifacts)
    _write_json(os.path.join(out_dir, "manifest.json"), payload)
    return manifest


def _ensure_out(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise CliUsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return payload


def _resolve(defaults: dict, config_file: dict, flags: dict) -> dict:
    """flag > config file > default; unknown config keys are rejected."""
    resolved = dict(defaults)
    for key, value in config_file.items():
        if key not in defaults:
            raise CliUsageError(f"unknown config key {key!r}")
        resolved[key] = value
    for key, value in flags.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _usage_guard(factory, /, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as exc:
        raise CliUsageError(str(exc)) from None


def _parse_models(value) -> list:
    if value is None:
        return list(BASE_MODELS)
    names = value if isinstance(value, (list, tuple)) else value.split(",")
    names = [str(m).strip() for m in names if str(m).strip()]
    for name in names:
        if name not in MODEL_ORDER:
            raise CliUsageError(
                f"unknown model {name!r}; choose from {', '.join(MODEL_ORDER)}"
            )
    if not names:
        raise CliUsageError("empty model list")
    return names


def _parse_grid(text):
    if text is None:
        return None
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise CliUsageError(f"cannot parse grid {text!r}") from None
    if not values:
        raise CliUsageError("empty grid")
    return values


# ---------------------------------------------------------------------------
# filter


def _cmd_filter(args) -> int:
    policy = _usage_guard(
        QcPolicy,
        max_missing_fraction=args.max_missing,
        min_active_fraction=args.min_active,
        min_std=args.min_std,
        require_sign_consistency=args.require_sign_consistency,
    )
    out = _ensure_out(args.out)
    traces = load_traces(args.traces, static_path=args.static)
    accepted, rejected, reasons = [], [], []
    for tr in traces:
        verdict = quality_filter(tr, policy)
        if verdict.accepted:
            accepted.append(tr)
        else:
            rejected.append(tr)
            reasons.append(
                {
                    "clip_id": tr.clip_id,
                    "rater_id": tr.rater_id,
                    "attribute": tr.attribute,
                    "reason": verdict.reason,
                }
            )
    write_traces(accepted, os.path.join(out, "accepted.csv"))
    write_traces(rejected, os.path.join(out, "rejected.csv"))
    report = {
        "n_input": len(traces),
        "n_accepted": len(accepted),
        "n_rejected": len(rejected),
        "rejected": reasons,
    }
    _write_json(os.path.join(out, "report.json"), report)
    resolved = {
        "traces": args.traces,
        "static": args.static,
        "max_missing_fraction": policy.max_missing_fraction,
        "min_active_fraction": policy.min_active_fraction,
        "min_std": policy.min_std,
        "require_sign_consistency": policy.require_sign_consistency,
    }
    _emit_run(out, "filter", resolved, None, ["accepted.csv", "rejected.csv", "report.json"])
    print(f"accepted {len(accepted)} / rejected {len(rejected)} of {len(traces)} traces")
    return 0


# ---------------------------------------------------------------------------
# concordance / fuse


def _windowed_groups(traces, rate: float, window: float):
    """Group traces by (clip, attribute, rater_kind) into windowed matrices."""
    groups: dict = {}
    for tr in traces:
        key = (tr.clip_id, tr.attribute, tr.rater_kind)
        vec = window_last(resample_trace(tr, rate), window)
        groups.setdefault(key, []).append((tr.rater_id, vec))
    for key in groups:
        groups[key].sort(key=lambda item: item[0])
    return groups


def _cmd_concordance(args) -> int:
    out = _ensure_out(args.out)
    traces = load_traces(args.traces)
    segments = list(SEGMENTS) if args.segment == "all" else [args.segment]
    groups = _windowed_groups(traces, args.rate, args.window)
    if args.group_by == "none":
        merged: dict = {}
        for (clip, attribute, _), rows in groups.items():
            merged.setdefault((clip, attribute, "all"), []).extend(rows)
        groups = merged
    reports = []
    per_stat: dict = {}
    for (clip, attribute, kind), rows in sorted(groups.items()):
        if len(rows) < 2:
            print(
                f"skipping {clip}/{attribute}/{kind}: fewer than 2 raters",
                file=sys.stderr,
            )
            continue
        matrix = np.vstack([vec for _, vec in rows])
        for segment in segments:
            rep = concordance(matrix, segment)
            reports.append(
                {
                    "clip_set": clip,
                    "attribute": attribute,
                    "segment": segment,
                    "rater_kind": kind,
                    "n_raters": rep.n_raters,
                    "n_items": rep.n_items,
                    "kendalls_w": rep.kendalls_w,
                }
            )
            per_stat.setdefault((attribute, kind, segment), []).append(rep.kendalls_w)
    summary = [
        {
            "attribute": attribute,
            "rater_kind": kind,
            "segment": segment,
            "n_clips": len(values),
            "mean_w": float(np.mean(values)),
            "sd_w": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
        }
        for (attribute, kind, segment), values in sorted(per_stat.items())
    ]
    _write_json(
        os.path.join(out, "concordance.json"),
        {"reports": reports, "summary": summary},
    )
    resolved = {
        "traces": args.traces,
        "rate_hz": args.rate,
        "window_s": args.window,
        "segment": args.segment,
        "group_by": args.group_by,
    }
    _emit_run(out, "concordance", resolved, None, ["concordance.json"])
    for entry in summary:
        print(
            f"{entry['attribute']}/{entry['rater_kind']}/{entry['segment']}: "
            f"W = {entry['mean_w']:.3f} +- {entry['sd_w']:.3f} "
            f"({entry['n_clips']} clips)"
        )
    return 0


def _write_fused_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FUSED_COLUMNS)
        for clip, kind, attribute, times, values in rows:
            for t, v in zip(times, values):
                writer.writerow([clip, kind, attribute, _float_repr(t), _float_repr(v)])


def _cmd_fuse(args) -> int:
    out = _ensure_out(args.out)
    traces = load_traces(args.traces)
    groups = _windowed_groups(traces, args.rate, args.window)
    fused_rows = []
    for (clip, attribute, kind), rows in sorted(groups.items()):
        fused = median_fuse([vec for _, vec in rows])
        times = np.arange(fused.size) / args.rate
        fused_rows.append((clip, kind, attribute, times, fused))
    _write_fused_csv(os.path.join(out, "fused.csv"), fused_rows)
    resolved = {
        "traces": args.traces,
        "rate_hz": args.rate,
        "window_s": args.window,
    }
    _emit_run(out, "fuse", resolved, None, ["fused.csv"])
    print(f"fused {len(fused_rows)} (clip, attribute, rater_kind) groups")
    return 0


# ---------------------------------------------------------------------------
# fit


def _load_fused_csv(path):
    """Read the fused CSV into {(clip, kind, attribute): (times, values)}."""
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header") from None
        if tuple(header) != FUSED_COLUMNS:
            raise DataError(f"{path}: line 1: expected header {','.join(FUSED_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise DataError(f"{path}: line {lineno}: expected 5 fields")
            clip, kind, attribute = row[0].strip(), row[1].strip(), row[2].strip()
            try:
                t, v = float(row[3]), float(row[4])
            except ValueError:
                raise DataError(
                    f"{path}: line {lineno}: cannot parse numeric fields"
                ) from None
            out.setdefault((clip, kind, attribute), []).append((t, v))
    parsed = {}
    for key, pairs in out.items():
        pairs.sort(key=lambda p: p[0])
        parsed[key] = (
            np.array([p[0] for p in pairs]),
            np.array([p[1] for p in pairs]),
        )
    return parsed


def _is_static_labels(path) -> bool:
    with open(path, newline="", encoding="utf-8") as fh:
        header = fh.readline().strip()
    return [h.strip() for h in header.split(",")] == ["clip_id", "label"]


def _fit_tasks(features_path, labels_path, levels, label_kind, label_attribute):
    """Build per-clip TaskDatasets from a feature CSV plus labels.

    Static labels (clip_id,label) give every row of a clip its class;
    dynamic labels (a fused CSV) are aligned on the time grid and
    discretized to `levels` classes.
    """
    feats = load_features_csv(features_path)
    if not feats:
        raise DataError(f"{features_path}: no feature rows")
    clip_order = sorted(feats)
    if _is_static_labels(labels_path):
        labels = load_labels_csv(labels_path)
        classes = sorted(set(labels.values()))
        if not classes or classes[0] < 1:
            raise DataError(f"{labels_path}: class labels must be >= 1")
        n_classes = max(classes)
        tasks = []
        for clip in clip_order:
            if clip not in labels:
                raise DataError(f"{labels_path}: no label for clip {clip}")
            times, x = feats[clip]
            tasks.append(
                TaskDataset(clip, x, np.full(x.shape[0], labels[clip], dtype=int))
            )
        return tasks, n_classes
    fused = _load_fused_csv(labels_path)
    keys = sorted(fused)
    kinds = {k[1] for k in keys}
    attributes = {k[2] for k in keys}
    kind = label_kind or (kinds.pop() if len(kinds) == 1 else None)
    attribute = label_attribute or (attributes.pop() if len(attributes) == 1 else None)
    if kind is None or attribute is None:
        raise CliUsageError(
            "labels file holds several series; pass --label-kind/--label-attribute"
        )
    tasks = []
    for clip in clip_order:
        key = (clip, kind, attribute)
        if key not in fused:
            raise DataError(f"{labels_path}: no {kind}/{attribute} labels for {clip}")
        times, x = feats[clip]
        ltimes, values = fused[key]
        if ltimes.size != times.size or np.max(np.abs(ltimes - times)) > 1e-9:
            raise DataError(f"{labels_path}: time grid mismatch for clip {clip}")
        classes, _ = discretize_levels(values, levels)
        tasks.append(TaskDataset(clip, x, classes))
    return tasks, levels


def _cmd_fit(args) -> int:
    if args.model not in MODEL_KINDS:
        raise CliUsageError(f"unknown model {args.model!r}")
    if args.model == "eg_mtl" and (
        args.expert_features is None or args.expert_labels is None
    ):
        missing = [
            flag
            for flag, value in (
                ("--expert-features", args.expert_features),
                ("--expert-labels", args.expert_labels),
            )
            if value is None
        ]
        raise CliUsageError(f"eg_mtl requires {' and '.join(missing)}")
    out = _ensure_out(args.out)
    tasks, n_classes = _fit_tasks(
        args.features, args.labels, args.levels, args.label_kind, args.label_attribute
    )
    expert_tasks = None
    if args.expert_features is not None:
        expert_tasks, expert_classes = _fit_tasks(
            args.expert_features,
            args.expert_labels,
            args.levels,
            args.label_kind,
            args.label_attribute,
        )
        if expert_classes != n_classes:
            raise DataError("crowd and expert label sets disagree on class count")
    if args.standardize:
        mean, std = column_standardizer(np.vstack([t.features for t in tasks]))
        tasks = [
            TaskDataset(t.task_id, apply_standardizer(t.features, mean, std), t.labels)
            for t in tasks
        ]
        if expert_tasks is not None:
            expert_tasks = [
                TaskDataset(
                    t.task_id, apply_standardizer(t.features, mean, std), t.labels
                )
                for t in expert_tasks
            ]
    if args.graph is not None:
        graph = load_graph_json(args.graph)
    elif args.model in ("sr_mtl", "eg_mtl"):
        graph = TaskGraph.complete(len(tasks))
    else:
        graph = None
    design = assemble_design(
        tasks, n_classes, expert_tasks=expert_tasks, graph=graph
    )
    flag_values = {
        "alpha": args.alpha,
        "beta": args.beta,
        "gamma": args.gamma,
        "rho1": args.rho1,
        "rho2": args.rho2,
        "lambda1": args.lambda1,
        "lambda2": args.lambda2,
        "lambda3": args.lambda3,
    }
    hyper = {
        name: (flag_values[name] if flag_values[name] is not None else 1.0)
        for name in HYPERPARAMS[args.model]
    }
    spec = _usage_guard(ModelSpec, kind=args.model, hyperparams=hyper)
    config = _usage_guard(SolverConfig, max_iter=args.max_iter, rel_tol=args.rel_tol)
    result = fit(spec, design, config)
    n, ne, d, r, c = design.dims

    def _write_matrix(name, matrix):
        with open(os.path.join(out, name), "w", encoding="utf-8", newline="") as fh:
            for row in matrix:
                fh.write(",".join(_float_repr(v) for v in row) + "\n")

    _write_matrix("W.csv", result.W)
    _write_json(os.path.join(out, "design.json"), design.summary())
    artifacts = ["W.csv", "fit.json", "design.json"]
    if result.shared_part is not None:
        _write_matrix("shared_part.csv", result.shared_part)
        _write_matrix("sparse_part.csv", result.sparse_part)
        artifacts += ["shared_part.csv", "sparse_part.csv"]
    fit_payload = {
        "model": spec.kind,
        "hyperparams": hyper,
        "dims": {"N": n, "Ne": ne, "D": d, "R": r, "C": c},
        "iterations": result.iterations,
        "converged": result.converged,
        "final_objective": result.final_objective,
        "sparsity": result.sparsity,
    }
    _write_json(os.path.join(out, "fit.json"), fit_payload)
    resolved = {
        "model": spec.kind,
        "hyperparams": hyper,
        "features": args.features,
        "labels": args.labels,
        "expert_features": args.expert_features,
        "expert_labels": args.expert_labels,
        "levels": args.levels,
        "graph": args.graph,
        "standardize": bool(args.standardize),
        "max_iter": config.max_iter,
        "rel_tol": config.rel_tol,
    }
    _emit_run(out, "fit", resolved, None, artifacts)
    print(
        f"{spec.kind}: objective {result.final_objective:.6g} after "
        f"{result.iterations} iterations (sparsity {result.sparsity:.3f})"
    )
    return 0


# ---------------------------------------------------------------------------
# synth


def _write_features_csv(path, clip_ids, features) -> None:
    n_feat = features[0].shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "time_s"] + [f"f{i + 1}" for i in range(n_feat)])
        for clip, x in zip(clip_ids, features):
            for t, row in enumerate(x):
                writer.writerow([clip, _float_repr(t)] + [_float_repr(v) for v in row])


def _write_truth_csv(path, clip_ids, truth) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "time_s", "value"])
        for clip, sig in zip(clip_ids, truth):
            for t, v in enumerate(sig):
                writer.writerow([clip, _float_repr(t), _float_repr(v)])


def _write_labels_csv(path, clip_ids, classes) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "label"])
        for clip, cls in zip(clip_ids, classes):
            writer.writerow([clip, int(cls)])


def _matrix_traces(clip_ids, matrices, kind, attribute):
    """Per-rater trace objects (canonical scale) from per-clip row matrices."""
    from .annotations import AnnotationTrace

    traces = []
    for clip, mat in zip(clip_ids, matrices):
        for r, row in enumerate(mat):
            traces.append(
                AnnotationTrace(
                    clip_id=clip,
                    rater_id=f"{kind}{r + 1:02d}",
                    rater_kind=kind,
                    attribute=attribute,
                    times=np.arange(row.size, dtype=float),
                    values=row,
                )
            )
    return traces


def _cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    defaults = asdict(SynthConfig())
    flags = {"seed": args.seed}
    resolved = _resolve(defaults, file_cfg, flags)
    if args.noiseless:
        resolved["crowd_noise_sd"] = 0.0
        resolved["expert_noise_sd"] = 0.0
    config = _usage_guard(SynthConfig, **resolved)
    out = _ensure_out(args.out)
    p1_dir = _ensure_out(os.path.join(out, "p1"))
    p2_dir = _ensure_out(os.path.join(out, "p2"))

    data = synth_generate(config)
    _write_features_csv(os.path.join(p1_dir, "features.csv"), data.clip_ids, data.features)
    _write_truth_csv(os.path.join(p1_dir, "truth.csv"), data.clip_ids, data.truth)
    write_traces(
        _matrix_traces(data.clip_ids, data.crowd, "crowd", "arousal"),
        os.path.join(p1_dir, "crowd.csv"),
    )
    write_traces(
        _matrix_traces(data.clip_ids, data.expert, "expert", "arousal"),
        os.path.join(p1_dir, "expert.csv"),
    )

    val, evalset = synth_generate_p2(config)
    write_traces(
        _matrix_traces(val.clip_ids, val.crowd_rows, "crowd", "arousal"),
        os.path.join(p2_dir, "val_crowd.csv"),
    )
    write_traces(
        _matrix_traces(val.clip_ids, val.expert_rows, "expert", "arousal"),
        os.path.join(p2_dir, "val_expert.csv"),
    )
    _write_labels_csv(os.path.join(p2_dir, "val_labels.csv"), val.clip_ids, val.classes)
    write_traces(
        _matrix_traces(evalset.clip_ids, evalset.crowd_rows, "crowd", "arousal"),
        os.path.join(p2_dir, "eval_crowd.csv"),
    )
    _write_labels_csv(
        os.path.join(p2_dir, "eval_labels.csv"), evalset.clip_ids, evalset.classes
    )
    artifacts = [
        "p1/features.csv",
        "p1/truth.csv",
        "p1/crowd.csv",
        "p1/expert.csv",
        "p2/val_crowd.csv",
        "p2/val_expert.csv",
        "p2/val_labels.csv",
        "p2/eval_crowd.csv",
        "p2/eval_labels.csv",
    ]
    _emit_run(out, "synth", resolved, config.seed, artifacts)
    print(f"synthetic data written to {out}")
    return 0


# ---------------------------------------------------------------------------
# p1 / p2


def _trace_matrices(traces, kind):
    """{clip: rater-row matrix} for one rater kind; rows sorted by rater id."""
    per_clip: dict = {}
    for tr in traces:
        if tr.rater_kind != kind:
            continue
        per_clip.setdefault(tr.clip_id, []).append((tr.rater_id, tr.values))
    out = {}
    for clip, rows in per_clip.items():
        rows.sort(key=lambda item: item[0])
        lengths = {vec.size for _, vec in rows}
        if len(lengths) != 1:
            raise DataError(f"clip {clip}: {kind} traces differ in length")
        out[clip] = np.vstack([vec for _, vec in rows])
    return out


def _load_p1_dir(data_dir) -> P1Data:
    p1 = os.path.join(data_dir, "p1")
    features_path = os.path.join(p1, "features.csv")
    crowd_path = os.path.join(p1, "crowd.csv")
    if not os.path.exists(features_path) or not os.path.exists(crowd_path):
        raise DataError(f"{data_dir}: missing p1/features.csv or p1/crowd.csv")
    feats = load_features_csv(features_path)
    crowd = _trace_matrices(load_traces(crowd_path), "crowd")
    expert_path = os.path.join(p1, "expert.csv")
    expert = (
        _trace_matrices(load_traces(expert_path), "expert")
        if os.path.exists(expert_path)
        else {}
    )
    truth_path = os.path.join(p1, "truth.csv")
    truth = {}
    if os.path.exists(truth_path):
        with open(truth_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            if header != ["clip_id", "time_s", "value"]:
                raise DataError(f"{truth_path}: expected header clip_id,time_s,value")
            rows: dict = {}
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    rows.setdefault(row[0].strip(), []).append(
                        (float(row[1]), float(row[2]))
                    )
                except (IndexError, ValueError):
                    raise DataError(f"{truth_path}: line {lineno}: bad row") from None
            for clip, pairs in rows.items():
                pairs.sort(key=lambda p: p[0])
                truth[clip] = np.array([p[1] for p in pairs])
    clip_ids = sorted(feats)
    for clip in clip_ids:
        if clip not in crowd:
            raise DataError(f"clip {clip}: no crowd annotations")
        if feats[clip][1].shape[0] != crowd[clip].shape[1]:
            raise DataError(f"clip {clip}: features and annotations disagree in length")
    truth_list = [
        truth.get(clip, np.median(crowd[clip], axis=0)) for clip in clip_ids
    ]
    return P1Data(
        clip_ids=clip_ids,
        features=[feats[c][1] for c in clip_ids],
        crowd=[crowd[c] for c in clip_ids],
        expert=[expert[c] for c in clip_ids] if expert else [],
        truth=truth_list,
    )


def _load_p2_set(data_dir, crowd_name, labels_name, expert_name=None):
    p2 = os.path.join(data_dir, "p2")
    crowd_path = os.path.join(p2, crowd_name)
    labels_path = os.path.join(p2, labels_name)
    if not os.path.exists(crowd_path) or not os.path.exists(labels_path):
        return None
    crowd = _trace_matrices(load_traces(crowd_path), "crowd")
    labels = load_labels_csv(labels_path)
    clip_ids = sorted(crowd)
    for clip in clip_ids:
        if clip not in labels:
            raise DataError(f"{labels_path}: no label for clip {clip}")
    expert_rows = []
    if expert_name is not None:
        expert_path = os.path.join(p2, expert_name)
        if os.path.exists(expert_path):
            expert = _trace_matrices(load_traces(expert_path), "expert")
            expert_rows = [expert[c] for c in clip_ids if c in expert]
            if expert_rows and len(expert_rows) != len(clip_ids):
                raise DataError(f"{expert_path}: expert rows must cover every clip")
    return P2Data(
        clip_ids=clip_ids,
        crowd_rows=[crowd[c] for c in clip_ids],
        classes=[int(labels[c]) for c in clip_ids],
        expert_rows=expert_rows,
    )


def _resolve_protocol(args, config_cls, flag_map):
    """Shared p1/p2 resolution; data/models/seed resolve like config keys so
    a run can be reproduced from its emitted resolved config alone."""
    file_cfg = _load_config_file(args.config)
    defaults = asdict(config_cls())
    defaults.pop("lambda1_grid")
    defaults.update({"data": None, "models": None, "seed": 0})
    flags = dict(flag_map)
    flags.update({"data": args.data, "models": args.models, "seed": args.seed})
    grid = _parse_grid(args.grid)
    file_grid = file_cfg.pop("lambda1_grid", None)
    resolved = _resolve(defaults, file_cfg, flags)
    resolved["lambda1_grid"] = list(
        grid or (tuple(file_grid) if file_grid else config_cls().lambda1_grid)
    )
    if resolved["data"] is None:
        raise CliUsageError("a data directory is required (--data or config)")
    resolved["models"] = _parse_models(resolved["models"])
    config_kwargs = {
        k: v for k, v in resolved.items() if k not in ("data", "models", "seed")
    }
    config_kwargs["lambda1_grid"] = tuple(config_kwargs["lambda1_grid"])
    config = _usage_guard(config_cls, **config_kwargs)
    return resolved, config


def _cmd_p1(args) -> int:
    resolved, config = _resolve_protocol(
        args,
        P1Config,
        {
            "snippet_s": args.snippet,
            "half": args.half,
            "runs": args.runs,
            "folds": args.folds,
            "level_count": args.levels,
        },
    )
    out = _ensure_out(args.out)
    data = _load_p1_dir(resolved["data"])
    table = run_p1(data, config, resolved["models"], seed=resolved["seed"], jobs=args.jobs)
    table.write_csv(os.path.join(out, "result.csv"))
    with open(os.path.join(out, "result.txt"), "w", encoding="utf-8") as fh:
        fh.write(table.to_text())
    _emit_run(out, "p1", resolved, resolved["seed"], ["result.csv", "result.txt"])
    print(table.to_text(), end="")
    return 0


def _cmd_p2(args) -> int:
    resolved, config = _resolve_protocol(args, P2Config, {"folds": args.folds})
    out = _ensure_out(args.out)
    data_dir = resolved["data"]
    val = _load_p2_set(data_dir, "val_crowd.csv", "val_labels.csv", "val_expert.csv")
    if val is None:
        raise DataError(f"{data_dir}: missing p2 validation files")
    evalset = _load_p2_set(data_dir, "eval_crowd.csv", "eval_labels.csv")
    if evalset is None:
        raise DataError(
            f"{data_dir}: Eval source required (p2/eval_crowd.csv, p2/eval_labels.csv)"
        )
    table = run_p2(
        val, evalset, resolved["models"], config=config, seed=resolved["seed"], jobs=args.jobs
    )
    table.write_csv(os.path.join(out, "result.csv"))
    with open(os.path.join(out, "result.txt"), "w", encoding="utf-8") as fh:
        fh.write(table.to_text())
    _emit_run(out, "p2", resolved, resolved["seed"], ["result.csv", "result.txt"])
    print(table.to_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crowdmtl", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("filter", parents=[], help="quality-filter a trace CSV")
    p.add_argument("--traces", required=True, help="trace CSV file")
    p.add_argument("--static", default=None, help="sidecar static-ratings CSV")
    p.add_argument("--max-missing", type=float, default=0.20, dest="max_missing")
    p.add_argument("--min-active", type=float, default=0.20, dest="min_active")
    p.add_argument("--min-std", type=float, default=0.01, dest="min_std")
    p.add_argument(
        "--require-sign-consistency", action="store_true", dest="require_sign_consistency"
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=_cmd_filter)

    p = sub.add_parser("concordance", help="inter-rater agreement per clip")
    p.add_argument("--traces", required=True)
    p.add_argument("--rate", type=float, default=1.0, help="resampling rate (Hz)")
    p.add_argument("--window", type=float, default=50.0, help="final window (s)")
    p.add_argument(
        "--segment", choices=list(SEGMENTS) + ["all"], default="all"
    )
    p.add_argument("--group-by", choices=["rater_kind", "none"], default="rater_kind")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_concordance)

    p = sub.add_parser("fuse", help="median-fuse raters per clip and attribute")
    p.add_argument("--traces", required=True)
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--window", type=float, default=50.0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_fuse)

    p = sub.add_parser("fit", help="fit one model on feature/label CSVs")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True, help="static labels or fused CSV")
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--levels", type=int, default=5, help="classes for dynamic labels")
    p.add_argument("--label-kind", choices=RATER_KINDS, default=None)
    p.add_argument("--label-attribute", choices=ATTRIBUTES, default=None)
    p.add_argument("--expert-features", default=None)
    p.add_argument("--expert-labels", default=None)
    p.add_argument("--graph", default=None, help="task graph JSON")
    p.add_argument("--standardize", action="store_true")
    for name in ("alpha", "beta", "gamma", "rho1", "rho2", "lambda1", "lambda2", "lambda3"):
        p.add_argument(f"--{name}", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=5000, dest="max_iter")
    p.add_argument("--rel-tol", type=float, default=1e-7, dest="rel_tol")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_fit)

    p = sub.add_parser("synth", help="generate planted synthetic datasets")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("p1", help="snippet regression protocol")
    p.add_argument("--data", default=None, help="directory produced by synth")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--snippet", type=int, default=None, choices=(5, 10, 15))
    p.add_argument("--half", choices=("front", "back"), default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--grid", default=None, help="comma-separated lambda1 grid")
    p.add_argument("--models", default=None, help="comma-separated model list")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_p1)

    p = sub.add_parser("p2", help="transfer classification protocol")
    p.add_argument("--data", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--grid", default=None)
    p.add_argument("--models", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_p2)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "handler", None):
        parser.print_help()
        return 1
    try:
        return args.handler(args) or 0
    except CliUsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
