"""Time-continuous affect annotation handling.

A trace is one rater's arousal-or-valence signal for one clip. This module
loads traces from CSV, applies slider quality control, resamples onto
uniform grids, windows and fuses them, and computes inter-rater agreement
statistics (Kendall's W, Pearson correlation).

Ratings are kept on the canonical [-1, 1] scale in memory. Crowd slider
values live in [-2, 2] on disk and are rescaled at load time; writing
traces back inverts the rescale, so files always carry raw slider units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

RATER_KINDS = ("crowd", "expert")
ATTRIBUTES = ("arousal", "valence")
SEGMENTS = ("full", "first_half", "second_half")

CANONICAL_RANGE = (-1.0, 1.0)
RAW_RANGES = {"crowd": (-2.0, 2.0), "expert": (-1.0, 1.0)}

TRACE_COLUMNS = ("clip_id", "rater_id", "rater_kind", "attribute", "time_s", "value")
STATIC_COLUMNS = ("clip_id", "rater_id", "attribute", "static_value")


@dataclass
class AnnotationTrace:
    """One rater's continuous rating signal for one clip and attribute."""

    clip_id: str
    rater_id: str
    rater_kind: str
    attribute: str
    times: np.ndarray
    values: np.ndarray
    value_range: tuple[float, float] = CANONICAL_RANGE
    static_rating: float | None = None
    missing_fraction: float = 0.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.rater_kind not in RATER_KINDS:
            raise ValueError(f"unknown rater_kind {self.rater_kind!r}")
        if self.attribute not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {self.attribute!r}")
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if self.times.size >= 2 and not np.all(np.diff(self.times) > 0):
            raise ValueError("sample times must be strictly increasing")
        lo, hi = self.value_range
        if self.values.size and (
            self.values.min() < lo - 1e-12 or self.values.max() > hi + 1e-12
        ):
            raise ValueError(f"values outside declared range [{lo}, {hi}]")
        if not 0.0 <= self.missing_fraction <= 1.0:
            raise ValueError("missing_fraction must lie in [0, 1]")

    @property
    def n_samples(self) -> int:
        return int(self.times.size)

    @property
    def samples(self) -> list[tuple[float, float]]:
        """(time_s, value) pairs."""
        return list(zip(self.times.tolist(), self.values.tolist()))

    @property
    def duration(self) -> float:
        """Span between first and last sample, in seconds."""
        if self.n_samples < 2:
            return 0.0
        return float(self.times[-1] - self.times[0])

    def key(self) -> tuple[str, str, str]:
        return (self.clip_id, self.rater_id, self.attribute)


@dataclass(frozen=True)
class QcPolicy:
    """Thresholds for discarding bad-quality annotations.

    A trace is rejected when too much of it is missing, when the slider
    barely moved (low active fraction or near-zero spread), or -- with the
    sign rule on -- when the overall self-report contradicts the sign of
    the extremal continuous value.
    """

    max_missing_fraction: float = 0.20
    min_active_fraction: float = 0.20
    min_std: float = 0.01
    require_sign_consistency: bool = False

    def __post_init__(self):
        for name in ("max_missing_fraction", "min_active_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.min_std < 0:
            raise ValueError("min_std must be >= 0")


@dataclass(frozen=True)
class QcVerdict:
    accepted: bool
    reason: str | None = None  # "missing" | "inactivity" | "sign"

    def __bool__(self) -> bool:
        return self.accepted


@dataclass(frozen=True)
class ConcordanceReport:
    kendalls_w: float
    n_raters: int
    n_items: int
    segment: str


def _active_fraction(times: np.ndarray, values: np.ndarray) -> float:
    """Fraction of the trace span during which the slider value changes."""
    if values.size < 2:
        return 0.0
    span = float(times[-1] - times[0])
    if span <= 0:
        return 0.0
    dt = np.diff(times)
    moved = np.abs(np.diff(values)) > 0
    return float(np.sum(dt[moved]) / span)


def quality_filter(trace: AnnotationTrace, policy: QcPolicy) -> QcVerdict:
    """Accept or reject one trace; the reason names the first failing rule."""
    if trace.missing_fraction > policy.max_missing_fraction:
        return QcVerdict(False, "missing")
    std = float(np.std(trace.values)) if trace.n_samples else 0.0
    if _active_fraction(trace.times, trace.values) < policy.min_active_fraction:
        return QcVerdict(False, "inactivity")
    if std < policy.min_std:
        return QcVerdict(False, "inactivity")
    if policy.require_sign_consistency:
        if trace.static_rating is None:
            return QcVerdict(False, "sign")
        extremal = float(trace.values[np.argmax(np.abs(trace.values))])
        # a zero on either side carries no sign evidence
        if trace.static_rating != 0 and extremal != 0:
            if np.sign(trace.static_rating) != np.sign(extremal):
                return QcVerdict(False, "sign")
    return QcVerdict(True)


def resample_trace(trace: AnnotationTrace, rate_hz: float = 1.0) -> AnnotationTrace:
    """Linearly interpolate onto a uniform grid spanning [first, last] time.

    Interior gaps are interpolated; grid points never extend past the
    sampled span, so boundary values are held rather than extrapolated.
    """
    if trace.n_samples < 2:
        raise ValueError("resampling requires at least 2 samples")
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    t0, t1 = float(trace.times[0]), float(trace.times[-1])
    n = int(np.floor((t1 - t0) * rate_hz + 1e-9)) + 1
    grid = t0 + np.arange(n) / rate_hz
    vals = np.interp(grid, trace.times, trace.values)
    return replace(trace, times=grid, values=vals)


def window_last(trace: AnnotationTrace, window_s: float = 50.0) -> np.ndarray:
    """Return the ratings covering the final `window_s` seconds.

    The trace must be uniformly sampled; each sample counts for one
    sampling period, so a trace of n samples at rate f covers n/f seconds.
    """
    if trace.n_samples < 2:
        raise ValueError("windowing requires a uniform trace with >= 2 samples")
    dt = np.diff(trace.times)
    if np.max(np.abs(dt - dt[0])) > 1e-9 * max(1.0, abs(dt[0])):
        raise ValueError("trace is not uniformly sampled")
    rate = 1.0 / float(dt[0])
    n_need = int(round(window_s * rate))
    if abs(window_s * rate - n_need) > 1e-9:
        raise ValueError("window_s must be a whole number of samples")
    if trace.n_samples < n_need:
        raise ValueError(
            f"trace covers {trace.n_samples / rate:g} s, shorter than the "
            f"{window_s:g} s window"
        )
    return trace.values[-n_need:].copy()


def median_fuse(vectors) -> np.ndarray:
    """Element-wise median of aligned rating vectors (robust to outliers)."""
    vectors = [np.asarray(v, dtype=float) for v in vectors]
    if not vectors:
        raise ValueError("median_fuse requires at least one vector")
    n = vectors[0].size
    for v in vectors:
        if v.ndim != 1 or v.size != n:
            raise ValueError("all vectors must be 1-D and of equal length")
    return np.median(np.vstack(vectors), axis=0)


def kendalls_w(ratings) -> float:
    """Kendall's coefficient of concordance for an m-raters x n-items matrix.

    Uses the rank-sum form 12*S / (m^2 (n^3 - n) - m * T) with average
    ranks for ties and the usual per-rater tie correction T.
    """
    ratings = np.asarray(ratings, dtype=float)
    if ratings.ndim != 2:
        raise ValueError("ratings must be a 2-D matrix (raters x items)")
    m, n = ratings.shape
    if m < 2 or n < 2:
        raise ValueError("need at least 2 raters and 2 items")
    ranks = rankdata(ratings, axis=1)
    rank_sums = ranks.sum(axis=0)
    s = float(np.sum((rank_sums - rank_sums.mean()) ** 2))
    tie_term = 0.0
    for row in ratings:
        _, counts = np.unique(row, return_counts=True)
        tie_term += float(np.sum(counts**3 - counts))
    denom = m * m * (n**3 - n) - m * tie_term
    if denom <= 0:
        raise ValueError("degenerate ratings: every rater ties all items")
    w = 12.0 * s / denom
    return float(min(max(w, 0.0), 1.0))


def pearson(a, b) -> float:
    """Sample Pearson correlation; raises on constant input."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 1 or b.ndim != 1 or a.size != b.size:
        raise ValueError("inputs must be 1-D vectors of equal length")
    if a.size < 2:
        raise ValueError("need at least 2 points")
    da = a - a.mean()
    db = b - b.mean()
    sa = float(np.sqrt(np.sum(da * da)))
    sb = float(np.sqrt(np.sum(db * db)))
    if sa == 0.0 or sb == 0.0:
        raise ValueError("correlation undefined for a constant vector")
    r = float(np.sum(da * db) / (sa * sb))
    return float(min(max(r, -1.0), 1.0))


def segment_slice(vector: np.ndarray, segment: str) -> np.ndarray:
    """Slice a windowed vector into its full / first-half / second-half part."""
    if segment not in SEGMENTS:
        raise ValueError(f"unknown segment {segment!r}")
    vector = np.asarray(vector)
    half = vector.shape[-1] // 2
    if segment == "first_half":
        return vector[..., :half]
    if segment == "second_half":
        return vector[..., half:]
    return vector


def concordance(ratings, segment: str = "full") -> ConcordanceReport:
    """Kendall's W over the chosen segment of a raters x items matrix."""
    part = segment_slice(np.asarray(ratings, dtype=float), segment)
    w = kendalls_w(part)
    return ConcordanceReport(
        kendalls_w=w,
        n_raters=int(part.shape[0]),
        n_items=int(part.shape[1]),
        segment=segment,
    )


def _missing_fraction(times: np.ndarray, clip_duration: float) -> float:
    """Gap mass (leading + oversized interior + trailing) over the clip span.

    Interior gaps count only their excess past the nominal step, taken as
    the median inter-sample interval.
    """
    if clip_duration <= 0:
        return 0.0
    if times.size < 2:
        return 1.0
    dt = np.diff(times)
    nominal = float(np.median(dt))
    gaps = float(times[0]) + float(np.sum(np.maximum(dt - nominal, 0.0)))
    gaps += max(clip_duration - float(times[-1]), 0.0)
    return float(min(max(gaps / clip_duration, 0.0), 1.0))


def _rescale(value: float, raw_range: tuple[float, float]) -> float:
    lo, hi = raw_range
    clo, chi = CANONICAL_RANGE
    return clo + (value - lo) * (chi - clo) / (hi - lo)


def _unscale(value: float, raw_range: tuple[float, float]) -> float:
    lo, hi = raw_range
    clo, chi = CANONICAL_RANGE
    return lo + (value - clo) * (hi - lo) / (chi - clo)


def _read_csv_rows(path, expected_columns):
    """Yield (line_number, row_dict); raises DataError on schema problems."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header") from None
        header = [h.strip() for h in header]
        if set(header) != set(expected_columns):
            raise DataError(
                f"{path}: line 1: expected columns {','.join(expected_columns)}, "
                f"got {','.join(header)}"
            )
        idx = {name: header.index(name) for name in expected_columns}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields")
            yield lineno, {name: row[idx[name]].strip() for name in expected_columns}


def _parse_float(text: str, path, lineno: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(
            f"{path}: line {lineno}: cannot parse {column}={text!r} as a number"
        ) from None


def load_static_ratings(path) -> dict[tuple[str, str, str], float]:
    """Load the sidecar static-ratings CSV, values rescaled to [-1, 1].

    Static ratings are crowd self-reports on the raw [-2, 2] slider scale.
    """
    out: dict[tuple[str, str, str], float] = {}
    for lineno, row in _read_csv_rows(path, STATIC_COLUMNS):
        if row["attribute"] not in ATTRIBUTES:
            raise DataError(
                f"{path}: line {lineno}: unknown attribute {row['attribute']!r}"
            )
        value = _parse_float(row["static_value"], path, lineno, "static_value")
        key = (row["clip_id"], row["rater_id"], row["attribute"])
        if key in out:
            raise DataError(f"{path}: line {lineno}: duplicate static rating for {key}")
        out[key] = _rescale(value, RAW_RANGES["crowd"])
    return out


def load_traces(path, static_path=None, clip_durations=None) -> list[AnnotationTrace]:
    """Parse a trace CSV into canonical-scale traces.

    One trace per contiguous (clip_id, rater_id, attribute) block of rows;
    a key reappearing in a later block is a duplicate. The missing fraction
    is computed against the declared clip duration, or, if `clip_durations`
    is not given, against the latest sample time seen for that clip.
    """
    statics = load_static_ratings(static_path) if static_path else {}

    blocks: list[dict] = []
    finalized: set[tuple[str, str, str]] = set()
    current = None
    for lineno, row in _read_csv_rows(path, TRACE_COLUMNS):
        kind = row["rater_kind"]
        if kind not in RATER_KINDS:
            raise DataError(f"{path}: line {lineno}: unknown rater_kind {kind!r}")
        if row["attribute"] not in ATTRIBUTES:
            raise DataError(
                f"{path}: line {lineno}: unknown attribute {row['attribute']!r}"
            )
        t = _parse_float(row["time_s"], path, lineno, "time_s")
        v = _parse_float(row["value"], path, lineno, "value")
        if t < 0:
            raise DataError(f"{path}: line {lineno}: negative time_s")
        lo, hi = RAW_RANGES[kind]
        if not lo - 1e-9 <= v <= hi + 1e-9:
            raise DataError(
                f"{path}: line {lineno}: value {v} outside the {kind} range "
                f"[{lo:g}, {hi:g}]"
            )
        key = (row["clip_id"], row["rater_id"], row["attribute"])
        if current is None or current["key"] != key:
            if current is not None:
                finalized.add(current["key"])
                blocks.append(current)
            if key in finalized:
                raise DataError(
                    f"{path}: line {lineno}: duplicate trace for "
                    f"(clip_id={key[0]}, rater_id={key[1]}, attribute={key[2]})"
                )
            current = {"key": key, "kind": kind, "times": [], "values": []}
        if current["times"] and t <= current["times"][-1]:
            raise DataError(
                f"{path}: line {lineno}: non-monotone timestamp {t} for "
                f"(clip_id={key[0]}, rater_id={key[1]}, attribute={key[2]})"
            )
        current["times"].append(t)
        current["values"].append(_rescale(v, RAW_RANGES[kind]))
    if current is not None:
        blocks.append(current)

    clip_end: dict[str, float] = dict(clip_durations or {})
    if clip_durations is None:
        for blk in blocks:
            cid = blk["key"][0]
            end = blk["times"][-1]
            clip_end[cid] = max(clip_end.get(cid, 0.0), end)

    traces = []
    for blk in blocks:
        clip_id, rater_id, attribute = blk["key"]
        times = np.asarray(blk["times"], dtype=float)
        traces.append(
            AnnotationTrace(
                clip_id=clip_id,
                rater_id=rater_id,
                rater_kind=blk["kind"],
                attribute=attribute,
                times=times,
                values=np.asarray(blk["values"], dtype=float),
                value_range=CANONICAL_RANGE,
                static_rating=statics.get(blk["key"]),
                missing_fraction=_missing_fraction(times, clip_end.get(clip_id, 0.0)),
            )
        )
    return traces


def write_traces(traces, path) -> None:
    """Write traces back to CSV in raw slider units (inverse of load)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for tr in traces:
            raw_range = RAW_RANGES[tr.rater_kind]
            for t, v in zip(tr.times, tr.values):
                writer.writerow(
                    [
                        tr.clip_id,
                        tr.rater_id,
                        tr.rater_kind,
                        tr.attribute,
                        repr(float(t)),
                        repr(_unscale(float(v), raw_range)),
                    ]
                )
