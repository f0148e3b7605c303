import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

TRACE_HEADER = "clip_id,rater_id,rater_kind,attribute,time_s,value\n"


def run_cli(*args, cwd=None):
    proc = subprocess.run(
        [sys.executable, "-m", "crowdmtl", *args],
        capture_output=True,
        text=True,
        cwd=cwd,
    )
    return proc.returncode, proc.stdout, proc.stderr


def write_traces(path, rows):
    path.write_text(TRACE_HEADER + "".join(rows))
    return str(path)


def good_traces(n_raters=3, n_seconds=20, kind="expert"):
    rows = []
    for r in range(n_raters):
        for t in range(n_seconds):
            value = np.sin(t / 3.0) * 0.8
            rows.append(f"c1,{kind}{r},{kind},arousal,{t},{value:.6f}\n")
    return rows


def test_filter_all_pass(tmp_path):
    traces = write_traces(tmp_path / "t.csv", good_traces())
    code, out, err = run_cli("filter", "--traces", traces, "--out", str(tmp_path / "o"))
    assert code == 0, err
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["n_rejected"] == 0
    assert report["rejected"] == []


def test_filter_malformed_csv(tmp_path):
    traces = write_traces(
        tmp_path / "t.csv",
        ["c1,r1,expert,arousal,0,0.5\n", "c1,r1,expert,arousal,1,oops\n"],
    )
    code, out, err = run_cli("filter", "--traces", traces, "--out", str(tmp_path / "o"))
    assert code == 2
    assert "line 3" in err


def test_filter_flag_in_resolved_config(tmp_path):
    traces = write_traces(tmp_path / "t.csv", good_traces())
    out_dir = tmp_path / "o"
    code, *_ = run_cli(
        "filter", "--traces", traces, "--max-missing", "0.35", "--out", str(out_dir)
    )
    assert code == 0
    resolved = json.loads((out_dir / "resolved_config.json").read_text())
    assert resolved["max_missing_fraction"] == 0.35


def test_filter_rejects_flatliner(tmp_path):
    rows = good_traces() + [f"c1,flat,crowd,arousal,{t},0.5\n" for t in range(20)]
    traces = write_traces(tmp_path / "t.csv", rows)
    out_dir = tmp_path / "o"
    code, *_ = run_cli("filter", "--traces", traces, "--out", str(out_dir))
    assert code == 0
    report = json.loads((out_dir / "report.json").read_text())
    assert report["rejected"] == [
        {"clip_id": "c1", "rater_id": "flat", "attribute": "arousal", "reason": "inactivity"}
    ]


def test_concordance_identical_raters(tmp_path):
    traces = write_traces(tmp_path / "t.csv", good_traces())
    out_dir = tmp_path / "o"
    code, out, err = run_cli(
        "concordance",
        "--traces", traces,
        "--window", "10",
        "--out", str(out_dir),
    )
    assert code == 0, err
    payload = json.loads((out_dir / "concordance.json").read_text())
    assert len(payload["reports"]) == 3  # full, first_half, second_half
    for report in payload["reports"]:
        assert report["kendalls_w"] == pytest.approx(1.0)
        assert report["n_raters"] == 3
        assert set(report) == {
            "clip_set", "attribute", "segment", "rater_kind",
            "n_raters", "n_items", "kendalls_w",
        }


def test_concordance_single_segment(tmp_path):
    traces = write_traces(tmp_path / "t.csv", good_traces())
    out_dir = tmp_path / "o"
    code, *_ = run_cli(
        "concordance",
        "--traces", traces,
        "--window", "10",
        "--segment", "second_half",
        "--out", str(out_dir),
    )
    assert code == 0
    payload = json.loads((out_dir / "concordance.json").read_text())
    assert [r["segment"] for r in payload["reports"]] == ["second_half"]
    assert payload["reports"][0]["n_items"] == 5


def test_concordance_group_by_kind(tmp_path):
    rows = good_traces(kind="expert") + [
        f"c1,w{r},crowd,arousal,{t},{np.cos(t / 2.0):.4f}\n"
        for r in range(2)
        for t in range(20)
    ]
    traces = write_traces(tmp_path / "t.csv", rows)
    out_dir = tmp_path / "o"
    code, *_ = run_cli(
        "concordance", "--traces", traces, "--window", "10",
        "--segment", "full", "--out", str(out_dir),
    )
    assert code == 0
    payload = json.loads((out_dir / "concordance.json").read_text())
    kinds = {r["rater_kind"] for r in payload["reports"]}
    assert kinds == {"expert", "crowd"}


def test_fuse_median(tmp_path):
    rows = []
    for rater, offset in (("a", -0.2), ("b", 0.0), ("c", 0.9)):
        for t in range(10):
            rows.append(f"c1,{rater},expert,arousal,{t},{offset:.2f}\n")
    # second clip with an even rater count: median is the middle-pair mean
    for rater, offset in (("d", 0.0), ("e", 0.5)):
        for t in range(10):
            rows.append(f"c2,{rater},expert,arousal,{t},{offset:.2f}\n")
    # third clip with a single rater: fused vector is the trace itself
    for t in range(10):
        rows.append(f"c3,solo,expert,arousal,{t},{0.1 * t - 0.4:.2f}\n")
    traces = write_traces(tmp_path / "t.csv", rows)
    out_dir = tmp_path / "o"
    code, *_ = run_cli(
        "fuse", "--traces", traces, "--window", "10", "--out", str(out_dir)
    )
    assert code == 0
    per_clip = {}
    for line in (out_dir / "fused.csv").read_text().splitlines()[1:]:
        cells = line.split(",")
        per_clip.setdefault(cells[0], []).append(float(cells[4]))
    assert per_clip["c1"] == [0.0] * 10  # median robust to the outlier rater
    assert per_clip["c2"] == [0.25] * 10  # even count: mean of the two middles
    assert np.allclose(per_clip["c3"], [0.1 * t - 0.4 for t in range(10)])


def make_fit_inputs(tmp_path, n=30, d=3, clips=("c1",)):
    rng = np.random.default_rng(0)
    feature_lines = ["clip_id,time_s," + ",".join(f"f{i+1}" for i in range(d))]
    label_lines = ["clip_id,label"]
    for ci, clip in enumerate(clips):
        x = rng.normal(size=(n, d))
        for t in range(n):
            feature_lines.append(f"{clip},{t}," + ",".join(repr(float(v)) for v in x[t]))
        label_lines.append(f"{clip},{1 + ci % 2}")
    fpath = tmp_path / "features.csv"
    lpath = tmp_path / "labels.csv"
    fpath.write_text("\n".join(feature_lines) + "\n")
    lpath.write_text("\n".join(label_lines) + "\n")
    return str(fpath), str(lpath)


def test_fit_egmtl_requires_expert_inputs(tmp_path):
    fpath, lpath = make_fit_inputs(tmp_path)
    code, out, err = run_cli(
        "fit", "--features", fpath, "--labels", lpath,
        "--model", "eg_mtl", "--out", str(tmp_path / "o"),
    )
    assert code == 1
    assert "--expert-features" in err and "--expert-labels" in err


def test_fit_least_squares_oracle(tmp_path):
    fpath, lpath = make_fit_inputs(tmp_path, n=40, d=3, clips=("c1",))
    out_dir = tmp_path / "o"
    code, out, err = run_cli(
        "fit", "--features", fpath, "--labels", lpath,
        "--model", "mt_lasso", "--alpha", "0", "--beta", "0",
        "--rel-tol", "1e-13", "--max-iter", "30000",
        "--out", str(out_dir),
    )
    assert code == 0, err
    w = np.loadtxt(out_dir / "W.csv", delimiter=",", ndmin=2)
    # independent direct solve of the normal equations; the single clip is
    # labelled class 1, so the target is one column of ones
    x = np.loadtxt(fpath, delimiter=",", skiprows=1, usecols=(2, 3, 4))
    y = np.ones((x.shape[0], 1))
    w_star = np.linalg.solve(x.T @ x, x.T @ y)
    assert np.linalg.norm(w - w_star) / np.linalg.norm(w_star) < 1e-6


def test_fit_deterministic(tmp_path):
    fpath, lpath = make_fit_inputs(tmp_path, clips=("c1", "c2"))
    outputs = []
    for name in ("o1", "o2"):
        out_dir = tmp_path / name
        code, *_ = run_cli(
            "fit", "--features", fpath, "--labels", lpath,
            "--model", "mt_lasso", "--alpha", "0.2", "--beta", "0.1",
            "--out", str(out_dir),
        )
        assert code == 0
        outputs.append(
            (
                (out_dir / "fit.json").read_bytes(),
                (out_dir / "W.csv").read_bytes(),
            )
        )
    assert outputs[0] == outputs[1]


def test_fit_dirty_emits_parts(tmp_path):
    fpath, lpath = make_fit_inputs(tmp_path, clips=("c1", "c2"))
    out_dir = tmp_path / "o"
    code, *_ = run_cli(
        "fit", "--features", fpath, "--labels", lpath,
        "--model", "dirty_mtl", "--rho1", "0.3", "--rho2", "0.2",
        "--out", str(out_dir),
    )
    assert code == 0
    shared = np.loadtxt(out_dir / "shared_part.csv", delimiter=",")
    sparse = np.loadtxt(out_dir / "sparse_part.csv", delimiter=",")
    w = np.loadtxt(out_dir / "W.csv", delimiter=",")
    assert np.allclose(shared + sparse, w)


SYNTH_CONFIG = {
    "n_tasks": 3,
    "n_features": 5,
    "samples_per_task": 40,
    "n_crowd": 4,
    "n_expert": 4,
    "p2_clips_per_set": 6,
    "p2_eval_clips": 6,
    "p2_window_len": 16,
}


def synth_dir(tmp_path, seed=3, noiseless=False):
    tmp_path.mkdir(parents=True, exist_ok=True)
    cfg_path = tmp_path / "synth.json"
    cfg_path.write_text(json.dumps(SYNTH_CONFIG))
    data_dir = tmp_path / "data"
    args = [
        "synth", "--config", str(cfg_path), "--seed", str(seed),
        "--out", str(data_dir),
    ]
    if noiseless:
        args.insert(1, "--noiseless")
    code, out, err = run_cli(*args)
    assert code == 0, err
    return data_dir


def test_synth_writes_layout(tmp_path):
    data_dir = synth_dir(tmp_path)
    for name in (
        "p1/features.csv", "p1/crowd.csv", "p1/expert.csv", "p1/truth.csv",
        "p2/val_crowd.csv", "p2/val_expert.csv", "p2/val_labels.csv",
        "p2/eval_crowd.csv", "p2/eval_labels.csv",
        "manifest.json", "resolved_config.json",
    ):
        assert (data_dir / name).exists(), name


def test_manifest_digest_recomputable(tmp_path):
    data_dir = synth_dir(tmp_path)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    digest = hashlib.sha256((data_dir / "resolved_config.json").read_bytes()).hexdigest()
    assert manifest["config_digest"] == digest
    assert manifest["command"] == "synth"
    assert manifest["master_seed"] == 3


def test_synth_deterministic(tmp_path):
    d1 = synth_dir(tmp_path / "a")
    d2 = synth_dir(tmp_path / "b")
    assert (d1 / "p1" / "crowd.csv").read_bytes() == (d2 / "p1" / "crowd.csv").read_bytes()
    assert (d1 / "p2" / "val_crowd.csv").read_bytes() == (d2 / "p2" / "val_crowd.csv").read_bytes()


def p1_args(data_dir, out_dir, seed=7, extra=()):
    return [
        "p1", "--data", str(data_dir), "--out", str(out_dir),
        "--seed", str(seed), "--runs", "2", "--folds", "3",
        "--grid", "0.1,1", "--models", "mt_lasso,eg_mtl",
        *extra,
    ]


def test_p1_seeded_reruns_identical(tmp_path):
    data_dir = synth_dir(tmp_path)
    code1, *_ = run_cli(*p1_args(data_dir, tmp_path / "r1"))
    code2, *_ = run_cli(*p1_args(data_dir, tmp_path / "r2"))
    assert code1 == 0 and code2 == 0
    assert (tmp_path / "r1" / "result.csv").read_bytes() == (
        tmp_path / "r2" / "result.csv"
    ).read_bytes()


def test_p1_rerun_from_resolved_config(tmp_path):
    # the emitted resolved config alone reproduces the run byte for byte
    data_dir = synth_dir(tmp_path)
    code, *_ = run_cli(*p1_args(data_dir, tmp_path / "r1", seed=9))
    assert code == 0
    code, out, err = run_cli(
        "p1",
        "--config", str(tmp_path / "r1" / "resolved_config.json"),
        "--out", str(tmp_path / "r2"),
    )
    assert code == 0, err
    assert (tmp_path / "r1" / "result.csv").read_bytes() == (
        tmp_path / "r2" / "result.csv"
    ).read_bytes()
    assert (tmp_path / "r1" / "resolved_config.json").read_bytes() == (
        tmp_path / "r2" / "resolved_config.json"
    ).read_bytes()


def test_p1_noiseless_ceiling(tmp_path):
    data_dir = synth_dir(tmp_path, noiseless=True)
    out_dir = tmp_path / "r"
    code, out, err = run_cli(
        "p1", "--data", str(data_dir), "--out", str(out_dir),
        "--seed", "1", "--runs", "2", "--folds", "3",
        "--grid", "0.001,0.1", "--levels", "2",
    )
    assert code == 0, err
    lines = (out_dir / "result.csv").read_text().splitlines()[1:]
    for line in lines:
        cells = line.split(",")
        assert cells[-1] == "ok"
        assert float(cells[5]) <= 0.5 + 1e-6, line


def test_p2_requires_eval_source(tmp_path):
    data_dir = synth_dir(tmp_path)
    (data_dir / "p2" / "eval_crowd.csv").unlink()
    code, out, err = run_cli(
        "p2", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--seed", "1"
    )
    assert code == 2
    assert "Eval source required" in err


def test_p2_runs_and_reports(tmp_path):
    data_dir = synth_dir(tmp_path)
    out_dir = tmp_path / "r"
    code, out, err = run_cli(
        "p2", "--data", str(data_dir), "--out", str(out_dir), "--seed", "1",
        "--folds", "3", "--grid", "0.1,1", "--models", "mt_lasso",
    )
    assert code == 0, err
    lines = (out_dir / "result.csv").read_text().splitlines()
    assert lines[0].startswith("model,attribute")
    cells = lines[1].split(",")
    assert cells[0] == "mt_lasso"
    assert 0.0 <= float(cells[5]) <= 1.0


def test_usage_errors_exit_1(tmp_path):
    code, out, err = run_cli("p1", "--data", "nowhere")  # missing --out
    assert code == 1
    code, out, err = run_cli("fit", "--features", "x", "--labels", "y",
                             "--model", "bogus", "--out", str(tmp_path / "o"))
    assert code == 1


def test_unknown_config_key_rejected(tmp_path):
    cfg_path = tmp_path / "synth.json"
    cfg_path.write_text(json.dumps({"not_a_key": 1}))
    code, out, err = run_cli(
        "synth", "--config", str(cfg_path), "--out", str(tmp_path / "d")
    )
    assert code == 1
    assert "not_a_key" in err


def test_numerical_failure_exit_3(tmp_path):
    lines = ["clip_id,time_s,f1,f2"]
    for t in range(10):
        sign = -1 if t % 2 else 1
        lines.append(f"c1,{t},1e200,{sign}e200")
    fpath = tmp_path / "f.csv"
    fpath.write_text("\n".join(lines) + "\n")
    lpath = tmp_path / "l.csv"
    lpath.write_text("clip_id,label\nc1,1\n")
    code, out, err = run_cli(
        "fit", "--features", str(fpath), "--labels", str(lpath),
        "--model", "mt_lasso", "--alpha", "0.1", "--beta", "0.1",
        "--out", str(tmp_path / "o"),
    )
    assert code == 3
    assert "numerical failure" in err


def test_version_flag():
    code, out, err = run_cli("--version")
    assert code == 0


def test_concordance_group_by_none_pools_populations(tmp_path):
    rows = good_traces(n_raters=2, kind="expert") + [
        f"c1,w{r},crowd,arousal,{t},{np.sin(t / 3.0) * 1.6:.4f}\n"
        for r in range(2)
        for t in range(20)
    ]
    traces = write_traces(tmp_path / "t.csv", rows)
    out_dir = tmp_path / "o"
    code, *_ = run_cli(
        "concordance", "--traces", traces, "--window", "10",
        "--segment", "full", "--group-by", "none", "--out", str(out_dir),
    )
    assert code == 0
    payload = json.loads((out_dir / "concordance.json").read_text())
    assert len(payload["reports"]) == 1
    report = payload["reports"][0]
    assert report["rater_kind"] == "all"
    assert report["n_raters"] == 4
