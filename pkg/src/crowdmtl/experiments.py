"""Desk-scale reproduction of the two evaluation protocols.

P1: regress dynamic rating levels from per-second clip features. A
contiguous test snippet at a shared offset is held out of every clip, the
primary regularizer is cross-validated on the remaining time points, and
the level-decoded predictions are scored by RMSE against the evaluation
signal over several runs.

P2: classify static binary labels from per-rater windowed annotation
vectors, training on one clip set and evaluating on a disjoint one with a
per-clip majority vote.

Synthetic generators stand in for the unavailable annotation corpora; all
randomness flows from one master seed through named substreams.
"""

from __future__ import annotations

import hashlib
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .annotations import median_fuse
from .design import (
    TaskDataset,
    TaskGraph,
    apply_standardizer,
    assemble_design,
    column_standardizer,
    discretize_levels,
    level_midpoints,
)
from .solvers import (
    HYPERPARAMS,
    FitResult,
    ModelSpec,
    SolverConfig,
    fit,
    predict,
    predict_transfer,
)

MODEL_ORDER = (
    "st_lasso",
    "mt_lasso",
    "l21_mtl",
    "dirty_mtl",
    "robust_mtl",
    "sr_mtl",
    "eg_mtl",
    "eg_mtl_7",
)

# the protocol cross-validates one parameter per model and pins the rest
PRIMARY_PARAM = {
    "st_lasso": "alpha",
    "mt_lasso": "alpha",
    "l21_mtl": "alpha",
    "dirty_mtl": "rho1",
    "robust_mtl": "rho1",
    "sr_mtl": "beta",
    "eg_mtl": "lambda1",
}
SECONDARY_VALUE = 1.0


def substream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Named child generator of the master seed; order-independent."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *indices]))


def rmse(predicted, truth) -> float:
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape or predicted.ndim != 1 or predicted.size == 0:
        raise ValueError("predicted and truth must be equal-length vectors")
    return float(np.sqrt(np.mean((predicted - truth) ** 2)))


def accuracy(predicted, truth) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape or predicted.ndim != 1 or predicted.size == 0:
        raise ValueError("predicted and truth must be equal-length vectors")
    return float(np.mean(predicted == truth))


@dataclass(frozen=True)
class SynthConfig:
    """Planted-model generator settings (desk-scale data stand-in)."""

    seed: int = 0
    n_tasks: int = 4
    n_features: int = 8
    samples_per_task: int = 50
    n_crowd: int = 8
    n_expert: int = 16
    crowd_noise_sd: float = 0.5
    expert_noise_sd: float = 0.1
    sparsity_true: float = 0.5
    level_count: int = 5
    p2_clips_per_set: int = 20
    p2_eval_clips: int = 40
    p2_window_len: int = 50
    p2_class_amp: float = 0.20
    p2_mask_len: int = 8
    p2_wiggle: float = 0.3
    p2_offset: float = 0.3
    # per-rater offset sds as fractions of each population's noise sd
    p2_crowd_bias_frac: float = 0.0
    p2_expert_bias_frac: float = 0.6

    def __post_init__(self):
        if self.expert_noise_sd > self.crowd_noise_sd:
            raise ValueError("experts must be at least as consistent as the crowd")
        for name in ("n_tasks", "n_features", "samples_per_task", "n_crowd", "n_expert"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.sparsity_true <= 1.0:
            raise ValueError("sparsity_true must lie in [0, 1]")
        if self.level_count < 2:
            raise ValueError("level_count must be >= 2")


@dataclass
class P1Data:
    """Per-clip features, per-rater annotation matrices, evaluation signal."""

    clip_ids: list
    features: list  # each T x D
    crowd: list  # each n_crowd x T
    expert: list  # each n_expert x T, may be empty list
    truth: list  # each T, the signal test predictions are scored against
    w_true: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.clip_ids)
        if not (len(self.features) == len(self.crowd) == len(self.truth) == n):
            raise ValueError("per-clip lists must have equal length")
        if self.expert and len(self.expert) != n:
            raise ValueError("expert list must cover every clip when present")
        lengths = {f.shape[0] for f in self.features}
        if len(lengths) != 1:
            raise ValueError("all clips must share one timeline length")

    @property
    def n_timepoints(self) -> int:
        return int(self.features[0].shape[0])

    @property
    def n_expert_raters(self) -> int:
        return int(self.expert[0].shape[0]) if self.expert else 0

    def task_datasets(self, which: str = "crowd", level_count: int = 5):
        """Fused-label TaskDatasets (median across raters, discretized)."""
        rows = self.crowd if which == "crowd" else self.expert
        out = []
        for cid, feats, mat in zip(self.clip_ids, self.features, rows):
            fused = median_fuse(list(mat))
            classes, _ = discretize_levels(fused, level_count)
            out.append(TaskDataset(cid, feats, classes))
        return out


@dataclass
class P2Data:
    """Per-clip rater-row matrices plus static binary labels."""

    clip_ids: list
    crowd_rows: list  # each n_raters x window_len
    classes: list  # 1-based binary class per clip
    expert_rows: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.clip_ids)
        if not (len(self.crowd_rows) == len(self.classes) == n):
            raise ValueError("per-clip lists must have equal length")
        if self.expert_rows and len(self.expert_rows) != n:
            raise ValueError("expert rows must cover every clip when present")
        widths = {m.shape[1] for m in self.crowd_rows}
        if len(widths) != 1:
            raise ValueError("all clips must share one window length")

    @property
    def window_len(self) -> int:
        return int(self.crowd_rows[0].shape[1])


@dataclass(frozen=True)
class P1Config:
    snippet_s: int = 5
    half: str = "front"
    runs: int = 5
    lambda1_grid: tuple = (0.1, 1.0, 10.0, 100.0)
    folds: int = 5
    lambda2: float = 1.0
    lambda3: float = 1.0
    level_count: int = 5
    expert_subset_size: int = 7
    attribute: str = "arousal"
    feature_set: str = "synthetic"
    max_iter: int = 2000
    rel_tol: float = 1e-6

    def __post_init__(self):
        if self.snippet_s not in (5, 10, 15):
            raise ValueError("snippet_s must be one of 5, 10, 15")
        if self.half not in ("front", "back"):
            raise ValueError("half must be 'front' or 'back'")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not self.lambda1_grid:
            raise ValueError("empty hyperparameter grid")


@dataclass(frozen=True)
class P2Config:
    lambda1_grid: tuple = (0.1, 1.0, 10.0, 100.0)
    folds: int = 5
    lambda2: float = 1.0
    lambda3: float = 1.0
    expert_subset_size: int = 7
    attribute: str = "arousal"
    feature_set: str = "annotations"
    max_iter: int = 2000
    rel_tol: float = 1e-6


@dataclass(frozen=True)
class ResultRow:
    model: str
    attribute: str
    feature_set: str
    snippet_s: int | None
    half: str | None
    mean: float | None
    sd: float | None
    sparsity: float | None
    status: str = "ok"


@dataclass
class ResultTable:
    rows: list

    CSV_HEADER = "model,attribute,feature_set,snippet_s,half,mean,sd,sparsity,status"

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(self.CSV_HEADER + "\n")
        for r in self.rows:
            cells = [
                r.model,
                r.attribute,
                r.feature_set,
                "" if r.snippet_s is None else str(r.snippet_s),
                "" if r.half is None else r.half,
                "" if r.mean is None else repr(float(r.mean)),
                "" if r.sd is None else repr(float(r.sd)),
                "" if r.sparsity is None else repr(float(r.sparsity)),
                r.status,
            ]
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_text())

    def to_text(self) -> str:
        header = ["model", "attr", "features", "snip", "half", "mean", "sd", "sparsity", "status"]
        rows = [header]
        for r in self.rows:
            rows.append(
                [
                    r.model,
                    r.attribute,
                    r.feature_set,
                    "-" if r.snippet_s is None else str(r.snippet_s),
                    "-" if r.half is None else r.half,
                    "-" if r.mean is None else f"{r.mean:.4f}",
                    "-" if r.sd is None else f"{r.sd:.4f}",
                    "-" if r.sparsity is None else f"{r.sparsity:.3f}",
                    r.status,
                ]
            )
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        lines = [
            "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
            for row in rows
        ]
        return "\n".join(lines) + "\n"

    def cell(self, model: str) -> ResultRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)


def synth_generate(config: SynthConfig) -> P1Data:
    """Plant a row-sparse linear model and sample noisy rater annotations.

    Features are i.i.d. standard normal; the true signal per clip is the
    clipped linear response; each rater observes the truth plus Gaussian
    noise, clipped to [-1, 1].
    """
    rng = substream(config.seed, "synth-p1")
    d, r = config.n_features, config.n_tasks
    w_true = rng.standard_normal((d, r))
    n_zero = int(round(config.sparsity_true * d))
    zero_rows = rng.permutation(d)[:n_zero]
    w_true[zero_rows, :] = 0.0
    # column scale 0.5 keeps the linear response mostly inside [-1, 1]
    norms = np.sqrt(np.sum(w_true * w_true, axis=0))
    w_true = w_true * np.where(norms > 0, 0.5 / np.where(norms > 0, norms, 1.0), 0.0)

    clip_ids, features, crowd, expert, truth = [], [], [], [], []
    for t in range(r):
        x = rng.standard_normal((config.samples_per_task, d))
        signal = np.clip(x @ w_true[:, t], -1.0, 1.0)
        crowd_mat = np.clip(
            signal
            + config.crowd_noise_sd
            * rng.standard_normal((config.n_crowd, config.samples_per_task)),
            -1.0,
            1.0,
        )
        expert_mat = np.clip(
            signal
            + config.expert_noise_sd
            * rng.standard_normal((config.n_expert, config.samples_per_task)),
            -1.0,
            1.0,
        )
        clip_ids.append(f"clip{t + 1:02d}")
        features.append(x)
        crowd.append(crowd_mat)
        expert.append(expert_mat)
        truth.append(signal)
    return P1Data(clip_ids, features, crowd, expert, truth, w_true)


def _smooth_profile(rng: np.random.Generator, length: int, scale: float) -> np.ndarray:
    """Low-frequency wiggle: smoothed random walk rescaled to `scale`."""
    steps = rng.standard_normal(length)
    walk = np.cumsum(steps)
    kernel = np.ones(7) / 7.0
    padded = np.concatenate([np.full(3, walk[0]), walk, np.full(3, walk[-1])])
    smooth = np.convolve(padded, kernel, mode="valid")
    spread = np.max(np.abs(smooth - smooth.mean()))
    if spread <= 0:
        return np.zeros(length)
    return scale * (smooth - smooth.mean()) / spread


def _synth_p2_set(
    config: SynthConfig,
    rng: np.random.Generator,
    prefix: str,
    n_clips: int,
    with_experts: bool,
) -> P2Data:
    win = config.p2_window_len
    mask = np.zeros(win)
    mask[-min(config.p2_mask_len, win) :] = 1.0  # class signal sits late in the window
    clip_ids, crowd_rows, expert_rows, classes = [], [], [], []
    for t in range(n_clips):
        cls = 1 + (t % 2)
        sign = -1.0 if cls == 1 else 1.0
        # clip-specific drift and baseline shift confound the class pattern
        shift = rng.uniform(-config.p2_offset, config.p2_offset)
        profile = np.clip(
            sign * config.p2_class_amp * mask
            + _smooth_profile(rng, win, config.p2_wiggle)
            + shift,
            -1.0,
            1.0,
        )
        crowd_bias = (
            config.p2_crowd_bias_frac
            * config.crowd_noise_sd
            * rng.standard_normal((config.n_crowd, 1))
        )
        crowd_rows.append(
            np.clip(
                profile
                + crowd_bias
                + config.crowd_noise_sd * rng.standard_normal((config.n_crowd, win)),
                -1.0,
                1.0,
            )
        )
        if with_experts:
            expert_bias = (
                config.p2_expert_bias_frac
                * config.expert_noise_sd
                * rng.standard_normal((config.n_expert, 1))
            )
            expert_rows.append(
                np.clip(
                    profile
                    + expert_bias
                    + config.expert_noise_sd
                    * rng.standard_normal((config.n_expert, win)),
                    -1.0,
                    1.0,
                )
            )
        clip_ids.append(f"{prefix}{t + 1:02d}")
        classes.append(cls)
    return P2Data(clip_ids, crowd_rows, classes, expert_rows)


def synth_generate_p2(config: SynthConfig):
    """Planted binary-class annotation sets: (val with experts, eval crowd-only)."""
    val = _synth_p2_set(
        config,
        substream(config.seed, "synth-p2-val"),
        "val",
        config.p2_clips_per_set,
        True,
    )
    evalset = _synth_p2_set(
        config,
        substream(config.seed, "synth-p2-eval"),
        "eval",
        config.p2_eval_clips,
        False,
    )
    return val, evalset


def extract_snippets(n_samples, snippet_s: int, half: str, rng, rate_hz: float = 1.0):
    """Hold out one contiguous test window at a shared offset.

    The offset is drawn uniformly inside the chosen half; train indices are
    the complement. `n_samples` may be a single timeline length or a list
    of per-clip lengths (which must agree).
    """
    if not np.isscalar(n_samples):
        lengths = set(int(n) for n in n_samples)
        if len(lengths) != 1:
            raise ValueError("clips must share one timeline length")
        n_samples = lengths.pop()
    n = int(n_samples)
    if half not in ("front", "back"):
        raise ValueError("half must be 'front' or 'back'")
    span = int(round(snippet_s * rate_hz))
    if span < 1:
        raise ValueError("snippet is shorter than one sample")
    boundary = n // 2
    if half == "front":
        lo, hi = 0, boundary - span
    else:
        lo, hi = boundary, n - span
    if hi < lo:
        raise ValueError(
            f"{snippet_s} s snippet does not fit in the {half} half of {n} samples"
        )
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    offset = int(lo + rng.integers(0, hi - lo + 1))
    test_idx = np.arange(offset, offset + span)
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    return train_idx, test_idx


def contiguous_folds(indices, folds: int):
    """Partition per-task index arrays into contiguous chunks.

    Returns a list of (fit_idx_per_task, val_idx_per_task) pairs, one per
    fold; chunk f of every task forms fold f's validation set.
    """
    if isinstance(indices, np.ndarray):
        indices = [indices]
    indices = [np.asarray(ix) for ix in indices]
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if min(ix.size for ix in indices) < folds:
        raise ValueError("more folds than rows in the smallest task")
    chunked = [np.array_split(ix, folds) for ix in indices]
    out = []
    for f in range(folds):
        val = [chunks[f] for chunks in chunked]
        fit_ = [
            np.concatenate([chunks[g] for g in range(folds) if g != f])
            for chunks in chunked
        ]
        out.append((fit_, val))
    return out


def crossval_lambda1(fit_and_score, grid, train_indices, folds: int, maximize: bool = False):
    """Pick the grid value with the best mean validation score.

    `fit_and_score(value, fit_idx_per_task, val_idx_per_task)` returns the
    fold score (RMSE or accuracy). Ties go to the smaller value.
    """
    fold_splits = contiguous_folds(train_indices, folds)
    best_value, best_score = None, None
    for value in sorted(float(g) for g in grid):
        scores = [fit_and_score(value, fit_, val) for fit_, val in fold_splits]
        mean_score = float(np.mean(scores))
        better = (
            best_score is None
            or (maximize and mean_score > best_score)
            or (not maximize and mean_score < best_score)
        )
        if better:
            best_value, best_score = value, mean_score
    return best_value


def _model_spec(kind: str, primary_value: float, config) -> ModelSpec:
    params = {}
    for name in HYPERPARAMS[kind]:
        if name == PRIMARY_PARAM[kind]:
            params[name] = float(primary_value)
        elif kind == "st_lasso":
            params[name] = 0.0  # plain single-task Lasso carries no ridge
        elif kind == "eg_mtl" and name == "lambda2":
            params[name] = float(config.lambda2)
        elif kind == "eg_mtl" and name == "lambda3":
            params[name] = float(config.lambda3)
        else:
            params[name] = SECONDARY_VALUE
    return ModelSpec(kind, params)


def _solver_config(config) -> SolverConfig:
    return SolverConfig(max_iter=config.max_iter, rel_tol=config.rel_tol)


# ---------------------------------------------------------------------------
# P1


def _p1_fit_once(data, config, kind, lam, fused_crowd, fused_expert, fit_idx):
    """Assemble the standardized design on fit_idx and fit one model."""
    level = config.level_count
    train_feats = np.vstack([f[fit_idx] for f in data.features])
    mean, std = column_standardizer(train_feats)
    crowd_tasks, expert_tasks = [], []
    for cid, feats, crowd_sig, expert_sig in zip(
        data.clip_ids, data.features, fused_crowd, fused_expert
    ):
        z = apply_standardizer(feats[fit_idx], mean, std)
        classes, _ = discretize_levels(crowd_sig[fit_idx], level)
        crowd_tasks.append(TaskDataset(cid, z, classes))
        if kind == "eg_mtl":
            eclasses, _ = discretize_levels(expert_sig[fit_idx], level)
            expert_tasks.append(TaskDataset(cid, z, eclasses))
    graph = TaskGraph.complete(len(data.clip_ids))
    design = assemble_design(
        crowd_tasks,
        level,
        expert_tasks=expert_tasks if kind == "eg_mtl" else None,
        graph=graph,
    )
    spec = _model_spec(kind, lam, config)
    result = fit(spec, design, _solver_config(config))
    return result, (mean, std)


def _p1_predict(data, config, result, scaler, eval_idx):
    """Level-decoded predictions on eval_idx, pooled over clips."""
    mean, std = scaler
    midpoints = level_midpoints(config.level_count)
    preds = []
    for pos, feats in enumerate(data.features, start=1):
        z = apply_standardizer(feats[eval_idx], mean, std)
        preds.append(
            predict(
                result.W, z, pos, config.level_count, mode="level", midpoints=midpoints
            )
        )
    return np.concatenate(preds)


def _p1_cell(payload):
    """One (model, run) cell: snippet draw, cross-validation, fit, test RMSE."""
    data, config, master_seed, model_name, run_idx, expert_subset = payload
    kind = "eg_mtl" if model_name == "eg_mtl_7" else model_name
    rng = substream(master_seed, "snippets", run_idx)
    train_idx, test_idx = extract_snippets(
        data.n_timepoints, config.snippet_s, config.half, rng
    )
    fused_crowd = [median_fuse(list(mat)) for mat in data.crowd]
    if kind == "eg_mtl":
        if not data.expert:
            raise ValueError("eg_mtl requested but the data has no expert raters")
        raters = expert_subset if model_name == "eg_mtl_7" else None
        fused_expert = [
            median_fuse(list(mat if raters is None else mat[list(raters)]))
            for mat in data.expert
        ]
    else:
        fused_expert = [None] * len(data.clip_ids)

    def fold_score(lam, fit_per_task, val_per_task):
        fit_idx, val_idx = fit_per_task[0], val_per_task[0]
        result, scaler = _p1_fit_once(
            data, config, kind, lam, fused_crowd, fused_expert, fit_idx
        )
        preds = _p1_predict(data, config, result, scaler, val_idx)
        target = np.concatenate([sig[val_idx] for sig in fused_crowd])
        return rmse(preds, target)

    best = crossval_lambda1(
        fold_score, config.lambda1_grid, [train_idx], config.folds
    )
    result, scaler = _p1_fit_once(
        data, config, kind, best, fused_crowd, fused_expert, train_idx
    )
    preds = _p1_predict(data, config, result, scaler, test_idx)
    target = np.concatenate([sig[test_idx] for sig in data.truth])
    return model_name, run_idx, rmse(preds, target), result.sparsity, best


def _expand_models(models, subset_size: int, n_expert: int):
    """Validate requested models and append the expert-subset condition."""
    out = []
    for name in models:
        if name not in MODEL_ORDER:
            raise ValueError(f"unknown model {name!r}")
        if name not in out:
            out.append(name)
    if "eg_mtl" in out and "eg_mtl_7" not in out and n_expert > subset_size:
        out.append("eg_mtl_7")
    return [name for name in MODEL_ORDER if name in out]


def _expert_subset(master_seed: int, n_expert: int, size: int):
    """First `size` expert rater indices under the master permutation."""
    rng = substream(master_seed, "expert-subset")
    return tuple(int(i) for i in rng.permutation(n_expert)[:size])


def _run_cells(cell_fn, payloads, jobs: int):
    if jobs <= 1:
        return [cell_fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(cell_fn, payloads))


def run_p1(data: P1Data, config: P1Config, models, seed: int = 0, jobs: int = 1) -> ResultTable:
    """RMSE mean +- sd over runs per model, at one snippet/half condition."""
    names = _expand_models(models, config.expert_subset_size, data.n_expert_raters)
    if any(n.startswith("eg_mtl") for n in names) and not data.expert:
        raise ValueError("eg_mtl requested but the data has no expert annotations")
    subset = _expert_subset(seed, data.n_expert_raters, config.expert_subset_size)
    payloads = [
        (data, config, seed, name, run, subset)
        for name in names
        for run in range(config.runs)
    ]
    outcomes = {}
    failures = {}
    results = []
    try:
        results = _run_cells(_p1_cell, payloads, jobs)
    except Exception:
        # fall back to sequential execution to attribute the failure per cell
        results = []
        for p in payloads:
            try:
                results.append(_p1_cell(p))
            except Exception as exc:  # cell marked failed, table still emitted
                failures[p[3]] = type(exc).__name__
    for model_name, run_idx, err, sparsity, best in results:
        outcomes.setdefault(model_name, []).append((run_idx, err, sparsity, best))

    rows = []
    for name in names:
        if name in failures or name not in outcomes:
            rows.append(
                ResultRow(
                    name,
                    config.attribute,
                    config.feature_set,
                    config.snippet_s,
                    config.half,
                    None,
                    None,
                    None,
                    status=f"failed:{failures.get(name, 'missing')}",
                )
            )
            continue
        cells = sorted(outcomes[name])
        errs = np.array([c[1] for c in cells])
        spars = np.array([c[2] for c in cells])
        rows.append(
            ResultRow(
                name,
                config.attribute,
                config.feature_set,
                config.snippet_s,
                config.half,
                float(errs.mean()),
                float(errs.std(ddof=1)) if errs.size > 1 else 0.0,
                float(spars.mean()),
            )
        )
    return ResultTable(rows)


# ---------------------------------------------------------------------------
# P2


def _p2_design(val: P2Data, kind: str, row_subset_per_task=None, expert_raters=None):
    """Standardize rows and stack the validation-set classification design."""
    crowd_rows = []
    for pos, mat in enumerate(val.crowd_rows):
        take = (
            np.arange(mat.shape[0])
            if row_subset_per_task is None
            else np.asarray(row_subset_per_task[pos])
        )
        crowd_rows.append(mat[take])
    mean, std = column_standardizer(np.vstack(crowd_rows))
    crowd_tasks = [
        TaskDataset(cid, apply_standardizer(rows, mean, std), np.full(rows.shape[0], cls))
        for cid, rows, cls in zip(val.clip_ids, crowd_rows, val.classes)
    ]
    expert_tasks = None
    if kind == "eg_mtl":
        if not val.expert_rows:
            raise ValueError("eg_mtl requested but the validation set has no experts")
        expert_tasks = []
        for cid, rows, cls in zip(val.clip_ids, val.expert_rows, val.classes):
            take = (
                np.arange(rows.shape[0])
                if expert_raters is None
                else np.asarray(list(expert_raters))
            )
            sub = rows[take]
            expert_tasks.append(
                TaskDataset(
                    cid, apply_standardizer(sub, mean, std), np.full(sub.shape[0], cls)
                )
            )
    graph = TaskGraph.complete(len(val.clip_ids))
    design = assemble_design(crowd_tasks, 2, expert_tasks=expert_tasks, graph=graph)
    return design, (mean, std)


def majority_vote(row_classes, row_scores):
    """Per-clip decision: majority over rater rows, ties to the class with
    the higher summed score."""
    row_classes = np.asarray(row_classes)
    counts = np.bincount(row_classes, minlength=3)[1:]
    top = counts.max()
    tied = np.nonzero(counts == top)[0] + 1
    if tied.size == 1:
        return int(tied[0])
    sums = np.asarray(row_scores).sum(axis=0)
    tied_scores = [(sums[cls - 1], -cls) for cls in tied]
    return int(-max(tied_scores)[1])


def _p2_eval_accuracy(result: FitResult, scaler, dataset: P2Data) -> float:
    mean, std = scaler
    correct = []
    for rows, cls in zip(dataset.crowd_rows, dataset.classes):
        z = apply_standardizer(rows, mean, std)
        classes, scores = predict_transfer(result.W, z, 2)
        correct.append(majority_vote(classes, scores) == cls)
    return float(np.mean(correct))


def _p2_subset(data: P2Data, clip_idx) -> P2Data:
    clip_idx = [int(i) for i in clip_idx]
    return P2Data(
        clip_ids=[data.clip_ids[i] for i in clip_idx],
        crowd_rows=[data.crowd_rows[i] for i in clip_idx],
        classes=[data.classes[i] for i in clip_idx],
        expert_rows=[data.expert_rows[i] for i in clip_idx] if data.expert_rows else [],
    )


def _p2_cell(payload):
    """One model's P2 cell: cross-validate, refit, evaluate on the held set.

    Folds hold out contiguous blocks of clips, so validation measures the
    same clip-level transfer the final evaluation performs (held-out rows
    are scored per row, not per clip, for resolution).
    """
    val, evalset, config, master_seed, model_name, expert_subset = payload
    kind = "eg_mtl" if model_name == "eg_mtl_7" else model_name
    expert_raters = expert_subset if model_name == "eg_mtl_7" else None
    if evalset.window_len != val.window_len:
        raise ValueError("window length mismatch between Val and Eval sets")
    clip_indices = np.arange(len(val.clip_ids))

    def fold_score(lam, fit_clips, held_clips):
        design, scaler = _p2_design(_p2_subset(val, fit_clips[0]), kind, None, expert_raters)
        spec = _model_spec(kind, lam, config)
        result = fit(spec, design, _solver_config(config))
        mean, std = scaler
        preds, truths = [], []
        for i in held_clips[0]:
            z = apply_standardizer(val.crowd_rows[int(i)], mean, std)
            classes, _ = predict_transfer(result.W, z, 2)
            preds.append(classes)
            truths.append(np.full(classes.size, val.classes[int(i)]))
        return accuracy(np.concatenate(preds), np.concatenate(truths))

    best = crossval_lambda1(
        fold_score, config.lambda1_grid, [clip_indices], config.folds, maximize=True
    )
    design, scaler = _p2_design(val, kind, None, expert_raters)
    spec = _model_spec(kind, best, config)
    result = fit(spec, design, _solver_config(config))
    acc = _p2_eval_accuracy(result, scaler, evalset)
    return model_name, 0, acc, result.sparsity, best


def run_p2(
    val: P2Data,
    evalset: P2Data,
    models,
    config: P2Config | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> ResultTable:
    """Static binary recognition accuracy on the evaluation set per model."""
    if config is None:
        config = P2Config()
    n_expert = val.expert_rows[0].shape[0] if val.expert_rows else 0
    names = _expand_models(models, config.expert_subset_size, n_expert)
    if any(n.startswith("eg_mtl") for n in names) and not val.expert_rows:
        raise ValueError("eg_mtl requested but the validation set has no experts")
    if evalset.window_len != val.window_len:
        raise ValueError("window length mismatch between Val and Eval sets")
    subset = _expert_subset(seed, n_expert, config.expert_subset_size)
    payloads = [(val, evalset, config, seed, name, subset) for name in names]
    failures = {}
    try:
        results = _run_cells(_p2_cell, payloads, jobs)
    except Exception:
        results = []
        for p in payloads:
            try:
                results.append(_p2_cell(p))
            except Exception as exc:
                failures[p[4]] = type(exc).__name__
    by_name = {r[0]: r for r in results}
    rows = []
    for name in names:
        if name not in by_name:
            rows.append(
                ResultRow(
                    name,
                    config.attribute,
                    config.feature_set,
                    None,
                    None,
                    None,
                    None,
                    None,
                    status=f"failed:{failures.get(name, 'missing')}",
                )
            )
            continue
        _, _, acc, sparsity, _ = by_name[name]
        rows.append(
            ResultRow(
                name,
                config.attribute,
                config.feature_set,
                None,
                None,
                acc,
                None,
                sparsity,
            )
        )
    return ResultTable(rows)
