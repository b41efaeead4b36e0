import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prism_rm import eval_harness as eh
from prism_rm.phantom import PhantomSpec, generate


# --- TRE ----------------------------------------------------------------------------------

def test_tre_identical_lists():
    pts = np.random.default_rng(0).normal(size=(6, 3))
    r = eh.tre(pts, pts)
    assert r.mean == 0.0 and not r.distances.any()


def test_tre_three_four_five():
    pts = np.random.default_rng(1).normal(size=(5, 3))
    r = eh.tre(pts, pts + [3.0, 4.0, 0.0])
    np.testing.assert_allclose(r.distances, 5.0)
    assert r.std == pytest.approx(0.0, abs=1e-12)


def test_tre_population_std():
    r = eh.tre([[0, 0, 0], [0, 0, 0]], [[1, 0, 0], [0, 3, 0]])
    assert (r.mean, r.std) == (2.0, 1.0)


def test_tre_length_mismatch():
    with pytest.raises(ValueError):
        eh.tre(np.zeros((3, 3)), np.zeros((4, 3)))


def test_paired_ttest():
    a = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    assert eh.paired_ttest(a, a) == (0.0, 1.0)
    b = a + np.array([0.9, 1.1, 1.0, 0.95, 1.05])
    t, p = eh.paired_ttest(a, b)
    assert t < 0 and p < 0.05


# --- splits ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fourteen():
    return generate(PhantomSpec(dims=(8, 8, 8), spacing=6.0, a_max=4.0, h_max=1.0, frames_per_cycle=14,
                                n_landmarks=4, render_steps=2))


def test_split_sizes_ten_frames(small_dataset):
    for sc in ("MI", "ME"):
        s = eh.build_split(small_dataset, sc)
        assert len(s.train) == 9 and len(s.held_out) == 1
        assert small_dataset.frame(s.target).phase == sc
    s = eh.build_split(small_dataset, "EE")
    assert len(s.train) == 7 and len(s.held_out) == 3
    assert s.reference in s.train and s.target in s.held_out
    held = [small_dataset.frame(i) for i in s.held_out if i != s.target]
    assert sorted(f.is_inhale for f in held) == [False, True]


def test_split_sizes_fourteen_frames(fourteen):
    s = eh.build_split(fourteen, "EE")
    assert len(s.train) == 9 and len(s.held_out) == 5
    assert eh.neighbours_per_phase(14) == 2 and eh.neighbours_per_phase(10) == 1


def test_ee_neighbours_are_nearest_in_amplitude(small_dataset):
    s = eh.build_split(small_dataset, "EE")
    for inhale in (True, False):
        phase = [f for f in small_dataset.frames if f.phase not in ("EI", "EE") and f.is_inhale == inhale]
        nearest = min(phase, key=lambda f: f.volume_norm)
        assert nearest.frame_id in s.held_out


def test_split_is_deterministic(small_dataset):
    for sc in eh.SCENARIOS:
        assert eh.build_split(small_dataset, sc) == eh.build_split(small_dataset, sc)


def test_split_rejects_unknown_scenario(small_dataset):
    with pytest.raises(ValueError):
        eh.build_split(small_dataset, "XX")


# --- access tracking -------------------------------------------------------------------------

def test_tracker_records_and_blocks(small_dataset):
    tracker = eh.AccessTracker(forbidden={3}, strict=True)
    wrapped = tracker.wrap(small_dataset)
    _ = wrapped.frame(1).image
    _ = wrapped.frame(2).landmarks
    _ = wrapped.frame(3).time  # metadata is not guarded
    assert tracker.frames_read() == {1, 2}
    with pytest.raises(eh.ProtocolViolation):
        _ = wrapped.frame(3).image
    lax = eh.AccessTracker(forbidden={3}, strict=False)
    _ = lax.wrap(small_dataset).frame(3).landmarks
    assert lax.violations() == [(3, "landmarks")]


def test_training_never_reads_held_out_frames(small_dataset):
    overrides = {"hidden": [16, 16], "points_per_epoch": 200, "epochs": 3, "val_every": 1, "lr": 1e-3}
    for mode in ("trajectory", "integrated"):
        spec = eh.ExperimentSpec("EE", mode=mode, overrides=overrides)
        run = eh.train_experiment(spec, small_dataset, strict=False)
        assert run.tracker.violations() == []
        assert run.tracker.frames_read() == set(run.split.train)


# --- reports ----------------------------------------------------------------------------------

def test_identity_report_equals_initial(small_dataset):
    rep = eh.run_experiment(eh.ExperimentSpec("MI", mode="identity"), small_dataset)
    assert rep.mean == rep.initial_mean and rep.per_landmark == rep.initial_per_landmark
    assert rep.check_integrity()


def test_oracle_report_is_near_zero(small_dataset):
    rep = eh.run_experiment(eh.ExperimentSpec("MI", mode="oracle"), small_dataset)
    assert rep.mean <= 1e-3 and rep.initial_mean > 0.5


def test_report_roundtrip_and_outputs(tmp_path, small_dataset):
    rep = eh.run_experiment(eh.ExperimentSpec("EE", mode="identity"), small_dataset)
    paths = eh.write_report(rep, tmp_path / "report.json")
    assert [p.name for p in paths] == ["report.json", "report.txt", "report.csv"]
    back = eh.ExperimentReport.from_dict(json.loads(paths[0].read_text()))
    assert back == rep and back.check_integrity()
    csv = paths[2].read_text().splitlines()
    assert csv[0] == "landmark,initial_tre_mm,tre_mm" and len(csv) == 1 + len(rep.per_landmark)
    assert "initial" in paths[1].read_text()


def test_integrity_detects_tampering(small_dataset):
    rep = eh.run_experiment(eh.ExperimentSpec("ME", mode="identity"), small_dataset)
    rep.mean += 1e-6
    assert not rep.check_integrity()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=40))
def test_report_statistics_recompute(values):
    d = np.asarray(values)
    r = eh.tre(np.zeros((len(d), 3)), np.column_stack([d, np.zeros((len(d), 2))]))
    assert abs(r.mean - d.mean()) <= 1e-9 and abs(r.std - d.std()) <= 1e-9


def test_ablation_weights():
    from prism_rm.losses import LossWeights
    w = LossWeights()
    assert eh.ablation_weights(w, "full") == w
    assert eh.ablation_weights(w, "spatial_only").alpha_t == 0 and eh.ablation_weights(w, "spatial_only").alpha_ph
    assert eh.ablation_weights(w, "temporal_only").alpha_ph == 0
    none = eh.ablation_weights(w, "none")
    assert none.alpha_ph == none.alpha_t == 0
    with pytest.raises(ValueError):
        eh.ablation_weights(w, "other")


def test_ablation_table_shape_and_logs(small_dataset):
    overrides = {"hidden": [16, 16], "points_per_epoch": 200, "epochs": 2, "val_every": 1, "lr": 1e-3}
    cells = {}
    logs = {}
    for var in ("full", "spatial_only", "temporal_only"):
        spec = eh.ExperimentSpec("EE", mode="trajectory", ablation=var, overrides=overrides)
        run = eh.train_experiment(spec, small_dataset)
        cells[f"EE/{var}"] = eh.evaluate(run, small_dataset).to_dict()
        logs[var] = run.state.log
    assert all(r[4] == 0.0 for r in logs["spatial_only"])
    assert all(r[3] == 0.0 for r in logs["temporal_only"])
    assert all(r[3] > 0 and r[4] > 0 for r in logs["full"])
    table = eh.ablation_table(cells, ["EE"], ["full", "spatial_only", "temporal_only"])
    assert set(table["rows"]) == {"mean", "std"}
    assert set(table["paired_tests"]) == {"EE: full vs spatial_only", "EE: temporal_only vs spatial_only",
                                          "EE: full vs temporal_only"}
    text = eh.format_table_text(table)
    assert text.splitlines()[1].startswith("mean") and text.splitlines()[2].startswith("std")
    csv = eh.format_table_csv(table).splitlines()
    assert csv[0] == "scenario,variant,mean_mm,std_mm" and len(csv) == 4


def test_experiment_spec_validation():
    with pytest.raises(ValueError):
        eh.ExperimentSpec("MI", mode="bogus")
    with pytest.raises(ValueError):
        eh.ExperimentSpec("MI", ablation="bogus")
    spec = eh.ExperimentSpec("EE", mode="trajectory", ablation="spatial_only", overrides={"epochs": 5}, seed=3)
    cfg = spec.model_config()
    assert cfg.seed == 3 and cfg.epochs == 5 and cfg.weights.alpha_t == 0.0
