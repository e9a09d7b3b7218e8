import json
import warnings

import numpy as np
import pytest

from projscrub import cli, io
from projscrub.data import RealignmentParams
from projscrub.ica import IcaConvergenceError
from projscrub.projection import ConvergenceWarning
from projscrub.scrub import motion_scrub
from projscrub.synth import score_flags

SPEC = {"T": 200, "V": 300, "P": 10, "n_subjects": 3, "n_runs": 2, "burst_spatial_fraction": 0.2}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    spec = root / "spec_in.json"
    spec.write_text(json.dumps(SPEC))
    assert cli.main(["simulate", str(spec), "--out", str(root / "data"), "--seed", "3"]) == 0
    return root / "data"


def _bursts(path):
    text = path.read_text().split()
    return np.array([int(x) for x in text], dtype=int)


def test_simulate_files_and_determinism(dataset, tmp_path):
    man = io.read_json(dataset / "manifest.json")
    assert len(man["runs"]) == 6 and len(man["true_fc"]) == 3
    # per run: bold, rp, bursts, two noise ROIs; plus truth, parcellation, spec, manifest
    assert len(list(dataset.iterdir())) == 6 * 5 + 3 + 3
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps(SPEC))
    assert cli.main(["simulate", str(spec), "--out", str(tmp_path / "again"), "--seed", "3"]) == 0
    for f in dataset.iterdir():
        assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes()
    vals, tr = io.read_matrix(dataset / man["runs"][0]["scan"])
    assert vals.shape == (200, 300) and tr == pytest.approx(0.72)
    assert io.read_json(dataset / "spec.json")["seed"] == 3


def test_scrub_ica_finds_bursts(dataset, tmp_path):
    run = io.read_json(dataset / "manifest.json")["runs"][0]
    assert cli.main(["scrub", str(dataset / run["scan"]), "--method", "ica", "--out", str(tmp_path)]) == 0
    flags = io.read_flags_csv(tmp_path / "flags.csv")
    score = score_flags(flags, _bursts(dataset / run["bursts"]))
    assert score["sensitivity"] >= 0.9 and score["specificity"] >= 0.97
    decision = io.read_json(tmp_path / "decision.json")
    assert decision["n_flagged"] == flags.sum() and decision["method"] == "leverage"


def test_scrub_dvars_constant_input(tmp_path):
    io.write_matrix(tmp_path / "c.bin", np.full((50, 20), 4.0))
    assert cli.main(["scrub", str(tmp_path / "c.bin"), "--method", "dvars", "--out", str(tmp_path)]) == 0
    assert not io.read_flags_csv(tmp_path / "flags.csv").any()


def test_scrub_modfd_matches_library(dataset, tmp_path):
    run = io.read_json(dataset / "manifest.json")["runs"][1]
    args = ["scrub", str(dataset / run["scan"]), "--method", "modfd", "--rp", str(dataset / run["rp"])]
    assert cli.main(args + ["--out", str(tmp_path)]) == 0
    rp = RealignmentParams(io.read_matrix(dataset / run["rp"])[0], 0.72)
    ref = motion_scrub(rp, "modfd", lag=4, filter_kind="chebyshev2")
    assert np.array_equal(io.read_flags_csv(tmp_path / "flags.csv"), ref.flags)
    assert np.allclose(io.read_json(tmp_path / "decision.json")["metric"], ref.metric)


def test_config_precedence(dataset, tmp_path):
    run = io.read_json(dataset / "manifest.json")["runs"][0]
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("method = 'fd'\ncutoff-mm = 100.0\n")
    base = ["scrub", str(dataset / run["scan"]), "--rp", str(dataset / run["rp"]), "--config", str(cfg)]
    assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
    a = io.read_json(tmp_path / "a" / "decision.json")
    assert a["method"] == "fd" and a["n_flagged"] == 0 and a["threshold_spec"]["cutoff_mm"] == 100.0
    assert cli.main(base + ["--cutoff-mm", "0.05", "--out", str(tmp_path / "b")]) == 0
    b = io.read_json(tmp_path / "b" / "decision.json")
    assert b["threshold_spec"]["cutoff_mm"] == 0.05 and b["n_flagged"] > 0


def test_denoise_paths(dataset, tmp_path):
    run = io.read_json(dataset / "manifest.json")["runs"][0]
    scan = str(dataset / run["scan"])
    common = ["--rp", str(dataset / run["rp"])]
    for name, path in run["noise_rois"].items():
        common += ["--noise-roi", f"{name}={dataset / path}"]
    assert cli.main(["scrub", scan, *common, "--out", str(tmp_path)]) == 0
    flags = io.read_flags_csv(tmp_path / "flags.csv")
    assert flags.any()
    flag_arg = ["--flags", str(tmp_path / "flags.csv")]
    assert cli.main(["denoise", scan, *common, *flag_arg, "--out", str(tmp_path / "spike")]) == 0
    assert cli.main(["denoise", scan, *common, *flag_arg, "--censor", "--out", str(tmp_path / "cens")]) == 0
    spike = io.read_matrix(tmp_path / "spike" / "residuals.bin")[0]
    cens = io.read_matrix(tmp_path / "cens" / "residuals.bin")[0]
    assert np.all(spike[flags] == 0) and np.all(cens[flags] == 0)
    assert np.max(np.abs(spike - cens)) < 1e-8
    audit = io.read_json(tmp_path / "spike" / "audit.json")
    assert audit["orthogonal"] and audit["strategy"] == "cc2mp6"
    assert len(audit["columns"]) == 1 + 4 + 4 + 6 + int(flags.sum())
    design = (tmp_path / "spike" / "design.csv").read_text().splitlines()
    assert len(design) == 201


def test_fc_command(dataset, tmp_path):
    run = io.read_json(dataset / "manifest.json")["runs"][0]
    args = ["fc", str(dataset / run["scan"]), "--parcellation", str(dataset / "parcellation.csv")]
    assert cli.main(args + ["--out", str(tmp_path)]) == 0
    z = io.read_matrix(tmp_path / "fc.bin")[0]
    assert z.shape == (10, 10) and np.allclose(z, z.T)
    assert io.read_json(tmp_path / "fc.json")["n_volumes_used"] == 200
    assert cli.main(["fc", str(dataset / run["scan"]), "--out", str(tmp_path)]) == 2


def test_evaluate_identical_runs(dataset, tmp_path):
    man = io.read_json(dataset / "manifest.json")
    for entry in man["runs"]:
        if entry["session"] == "ses-02":
            twin = next(e for e in man["runs"] if e["subject"] == entry["subject"] and e["session"] == "ses-01")
            for key in ("scan", "rp", "noise_rois"):
                entry[key] = twin[key]
    path = dataset / "twins.json"
    path.write_text(json.dumps(man))
    args = ["evaluate", str(path), "--method", "dvars", "--mac-permutations", "2", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    metrics = {m["metric"]: m["value"] for m in io.read_json(tmp_path / "metrics.json")}
    assert metrics["icc"] == pytest.approx(1.0)
    assert metrics["fingerprint"] == 1.0
    assert metrics["rmse"] > 0 and metrics["mac"] >= 0


def test_evaluate_full(dataset, tmp_path):
    args = ["evaluate", str(dataset / "manifest.json"), "--method", "ica", "--mac-permutations", "2"]
    assert cli.main(args + ["--out", str(tmp_path)]) == 0
    report = io.read_json(tmp_path / "metrics.json")
    names = [m["metric"] for m in report]
    assert names == ["icc", "fingerprint", "rmse", "mac", "censoring_rate"]
    metrics = {m["metric"]: m["value"] for m in report}
    assert 0 < metrics["censoring_rate"] < 0.2
    assert report[0]["config"]["method"] == "ica" and report[0]["n"] == 3


def test_render(dataset, tmp_path):
    run = io.read_json(dataset / "manifest.json")["runs"][0]
    scan = dataset / run["scan"]
    assert cli.main(["scrub", str(scan), "--method", "ica", "--out", str(tmp_path)]) == 0
    assert cli.main(["render", str(scan), "--decision", str(tmp_path / "decision.json"), "--out", str(tmp_path)]) == 0
    img = cli.read_pgm((tmp_path / "grayplot.pgm").read_bytes())
    assert img.shape == (300, 200)
    spiky = np.random.default_rng(2).standard_normal((60, 40))
    spiky[17, :10] += 25.0
    column = np.mean(np.isin(cli.read_pgm(cli.grayplot_pgm(spiky)), (0, 255)), axis=0)
    assert column[17] >= 0.25 and np.delete(column, 17).max() < 0.2
    svg = (tmp_path / "decision_trace.svg").read_text()
    assert svg.startswith("<svg") and "stroke-dasharray" in svg and "polyline" in svg

    io.write_matrix(tmp_path / "flat.bin", np.full((30, 8), 2.5))
    assert cli.main(["render", str(tmp_path / "flat.bin"), "--out", str(tmp_path / "flat")]) == 0
    assert np.all(cli.read_pgm((tmp_path / "flat" / "grayplot.pgm").read_bytes()) == 128)


def test_exit_codes_invalid(tmp_path):
    assert cli.main(["scrub", str(tmp_path / "missing.bin"), "--out", str(tmp_path)]) == 2
    io.write_matrix(tmp_path / "x.bin", np.random.default_rng(0).standard_normal((40, 10)))
    assert cli.main(["scrub", str(tmp_path / "x.bin"), "--method", "modfd", "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.csv").write_text("a,b\nx,y\n")
    assert cli.main(["scrub", str(tmp_path / "bad.csv"), "--out", str(tmp_path)]) == 2
    assert cli.main(["render", "--out", str(tmp_path)]) == 2


def test_exit_codes_numerical(tmp_path, monkeypatch):
    io.write_matrix(tmp_path / "x.bin", np.random.default_rng(1).standard_normal((40, 10)))
    args = ["scrub", str(tmp_path / "x.bin"), "--method", "ica", "--out", str(tmp_path)]

    def fail(*a, **k):
        raise IcaConvergenceError("no convergence", {})

    monkeypatch.setattr(cli, "preliminary_then_final", fail)
    assert cli.main(args) == 3

    def warn(*a, **k):
        warnings.warn("slow", ConvergenceWarning)
        raise AssertionError("warning should have been raised as an error")

    monkeypatch.setattr(cli, "preliminary_then_final", warn)
    assert cli.main(args + ["--strict"]) == 3
