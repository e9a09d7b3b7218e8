import numpy as np
import pytest

from projscrub.data import ValidationError
from projscrub.fc import fc
from projscrub.scrub import dvars_dual
from projscrub.synth import SynthSpec, draw_burst_times, generate, generate_run, parcellation, score_flags, true_fc

SMALL = SynthSpec(T=120, V=200, P=10, n_subjects=2, n_runs=2)


def test_zero_amplitude_equals_clean():
    run = generate_run(SMALL.with_(burst_amplitude_sd=0.0), 0, 0)
    assert np.array_equal(run.scan.values, run.clean_scan.values)


def test_deterministic_and_burst_independent_clean():
    a = generate(SMALL)
    b = generate(SMALL)
    for x, y in zip(a.runs, b.runs):
        assert np.array_equal(x.scan.values, y.scan.values)
        assert np.array_equal(x.rp.values, y.rp.values)
    other = generate_run(SMALL.with_(burst_amplitude_sd=9.0, n_bursts=3, burst_spatial_fraction=0.4), 1, 1)
    assert np.array_equal(other.clean_scan.values, a.run(1, 1).clean_scan.values)
    assert not np.array_equal(generate_run(SMALL.with_(seed=1), 0, 0).clean_scan.values, a.run(0, 0).clean_scan.values)


def test_bursts_only_at_burst_times():
    run = generate_run(SMALL, 0, 1)
    diff = np.any(run.scan.values != run.clean_scan.values, axis=1)
    assert np.array_equal(np.flatnonzero(diff), run.burst_times)
    assert run.burst_times.size == SMALL.n_bursts
    assert np.all(np.diff(run.burst_times) >= SMALL.min_burst_spacing)


def test_explicit_burst_times():
    spec = SMALL.with_(burst_times=[[5, 50], [], [10], [119]])
    assert draw_burst_times(spec, 0, 0).tolist() == [5, 50]
    assert draw_burst_times(spec, 1, 1).tolist() == [119]
    with pytest.raises(ValidationError):
        SMALL.with_(burst_times=[[5], [], [10], [120]])
    with pytest.raises(ValidationError):
        SMALL.with_(burst_times=[[5]])


def test_spec_dict_roundtrip_and_validation():
    spec = SMALL.with_(burst_times=[[1], [2], [3], [4]])
    assert SynthSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValidationError):
        SynthSpec.from_dict({"T": 100, "bogus": 1})
    with pytest.raises(ValidationError):
        SynthSpec(P=1)
    with pytest.raises(ValidationError):
        SynthSpec(burst_coherence=1.5)


def test_clean_fc_converges_to_truth():
    spec = SynthSpec(T=20000, V=200, P=8, n_subjects=1, n_runs=1, drift_amplitude=0.0, burst_amplitude_sd=0.0)
    run = generate_run(spec, 0, 0)
    est = fc(run.clean_scan, parcellation(spec))
    ref = true_fc(spec, 0)
    iu = np.triu_indices(spec.P, 1)
    assert np.sqrt(np.mean((est.z[iu] - ref.z[iu]) ** 2)) < 0.02


def test_true_fc_subject_specific():
    a, b = true_fc(SMALL, 0).z, true_fc(SMALL, 1).z
    assert np.allclose(a, a.T) and np.all(np.diag(a) == 0)
    assert np.max(np.abs(a - b)) > 0.05


def test_motion_locked_steps():
    run = generate_run(SMALL.with_(motion_locked_fraction=1.0, step_mm=2.0), 0, 0)
    assert run.motion_locked.all()
    jumps = np.abs(np.diff(run.rp.values[:, :3], axis=0)).sum(axis=1)
    top = np.sort(np.argsort(jumps)[-SMALL.n_bursts:] + 1)
    assert np.array_equal(top, run.burst_times)


def test_score_flags_examples():
    flags = np.zeros(20, bool)
    flags[[5, 11, 17]] = True
    out = score_flags(flags, [4, 12], halo=1)
    assert out["sensitivity"] == 1.0
    # far volumes: 20 - 6 near; one far flag (17)
    assert out["specificity"] == pytest.approx(1 - 1 / 14)
    assert score_flags(flags, [4, 12], halo=0)["sensitivity"] == 0.0
    with pytest.raises(ValidationError):
        score_flags(flags, [20])


def test_score_flags_halo_monotone():
    rng = np.random.default_rng(0)
    flags = rng.random(200) < 0.1
    times = np.sort(rng.choice(200, 10, replace=False))
    sens = [score_flags(flags, times, h)["sensitivity"] for h in range(6)]
    assert all(a <= b for a, b in zip(sens, sens[1:]))


def test_dvars_detects_planted_bursts():
    spec = SynthSpec(T=300, V=400, P=10, n_subjects=1, n_runs=1, burst_spatial_fraction=0.2)
    run = generate_run(spec, 0, 0)
    d = dvars_dual(run.scan)
    assert score_flags(d, run.burst_times)["sensitivity"] >= 0.9
