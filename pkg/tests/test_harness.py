import numpy as np
import pytest

from droneacoustics import AttackConfig, DroneState, GridSpec, Room, default_drone, generate_dataset
from droneacoustics.errors import EmptyGrid
from droneacoustics.harness import (HEATMAP_HEADER, ExperimentConfig, HeatmapReport, cell_rms, evaluate, grid_cells,
                                    noise_sweep, num_threads, parallel_map, read_csv, resource_log, run_campaign,
                                    time_ratio)
from droneacoustics.io import export_waveforms, import_waveforms


def point_drone():
    """A drone small enough that only the cell margin matters."""
    return default_drone(rotor_square=0.02, mic_circle=0.03)


def test_hand_counted_grid():
    # 1 m square, 0.5 m cells -> centers at 0.25 and 0.75, each 0.25 m from two walls
    room = Room.rectangle(1.0, 1.0, 0.5)
    cells = grid_cells(room, point_drone(), GridSpec(0.5, 1, 0.2))
    np.testing.assert_allclose(sorted(map(tuple, cells)), [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)])
    assert len(grid_cells(room, point_drone(), GridSpec(0.5, 1, 0.3))) == 0
    # the full-size drone (0.15 m mic radius) fits at 0.25 m from the walls too
    assert len(grid_cells(room, default_drone(), GridSpec(0.5, 1, 0.2))) == 4


def test_empty_grid_and_grid_validation():
    room = Room.rectangle(1.0, 1.0, 0.5)
    with pytest.raises(EmptyGrid):
        generate_dataset(room, point_drone(), GridSpec(0.5, 1, 0.3))
    with pytest.raises(ValueError):
        GridSpec(resolution=0)
    with pytest.raises(ValueError):
        GridSpec(orientations=0)


def test_single_orientation_and_determinism():
    room = Room.rectangle(1.5, 1.0, 0.5, max_reflection_order=1)
    drone = default_drone(period_samples=400, fundamental_index=2)
    a = generate_dataset(room, drone, GridSpec(0.5, 1, 0.2), seed=0)
    b = generate_dataset(room, drone, GridSpec(0.5, 1, 0.2), seed=0)
    assert len(a) == 6 and np.all(a.headings == 0)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    c = generate_dataset(room, drone, GridSpec(0.5, 4, 0.2))
    assert len(c) == 24
    np.testing.assert_allclose(sorted(set(np.round(c.headings, 12))), np.round(np.pi / 2 * np.arange(4), 12))


def test_thread_count_env_and_parallel_map(monkeypatch):
    monkeypatch.setenv("DRONEACOUSTICS_THREADS", "3")
    assert num_threads() == 3
    assert parallel_map(lambda x: x * x, range(10)) == [x * x for x in range(10)]
    monkeypatch.setenv("DRONEACOUSTICS_THREADS", "bogus")
    assert num_threads() == 1


def test_threaded_dataset_equals_serial(monkeypatch):
    room = Room.rectangle(1.5, 1.0, 0.5, max_reflection_order=1)
    drone = default_drone(period_samples=400, fundamental_index=2)
    serial = generate_dataset(room, drone, GridSpec(0.5, 2, 0.2))
    monkeypatch.setenv("DRONEACOUSTICS_THREADS", "4")
    threaded = generate_dataset(room, drone, GridSpec(0.5, 2, 0.2))
    np.testing.assert_array_equal(serial.inputs, threaded.inputs)


def test_cell_rms_groups_orientations():
    loc = np.array([[0, 0], [0, 0], [1, 1], [1, 1]], dtype=float)
    truth = np.zeros((4, 2))
    pred = np.array([[0.3, 0.4], [0.0, 0.0], [0.1, 0.0], [0.1, 0.0]])
    cells, rms, counts = cell_rms(pred, truth, loc)
    np.testing.assert_allclose(cells, [[0, 0], [1, 1]])
    np.testing.assert_allclose(rms, [np.sqrt(0.25 / 2), 0.1])
    np.testing.assert_array_equal(counts, [2, 2])


def test_campaign_artifacts_round_trip(toy, tmp_path):
    exp = ExperimentConfig(bounds=[(0.01, 0.1), (0.5, 1.0)], attack=AttackConfig(max_iters=3),
                           output_dir=tmp_path / "run")
    reports = run_campaign(toy.problem, exp)
    assert len(reports) == 2
    summary = read_csv(tmp_path / "run" / "summary.csv")
    assert [(r["beta"], r["gamma"]) for r in summary] == [(0.01, 0.1), (0.5, 1.0)]
    for rep, row in zip(reports, summary):
        assert row["attacked_mean"] == rep.mean("attacked")
        back = HeatmapReport.from_csv(tmp_path / "run" / f"heatmap_b{rep.beta:g}_g{rep.gamma:g}.csv")
        np.testing.assert_array_equal(back.cells, rep.cells)
        for c in ("clean", "attacked", "recovered"):
            np.testing.assert_array_equal(back.rms[c], rep.rms[c])
        # the three conditions share one cell list
        assert len(back.rms["clean"]) == len(back.rms["recovered"]) == len(back.cells)
        # recovery never makes the batch worse on average
        assert rep.mean("recovered") <= rep.mean("attacked") + 1e-12
    header = (tmp_path / "run" / "heatmap_b0.01_g0.1.csv").read_text().splitlines()[0]
    assert header == ",".join(HEATMAP_HEADER)


def test_noise_sweep_zero_noise_reproduces_campaign(toy, tmp_path):
    exp = ExperimentConfig(bounds=[(0.5, 1.0)], attack=AttackConfig(max_iters=3), output_dir=tmp_path)
    camp = run_campaign(toy.problem, exp)[0]
    rows = noise_sweep(toy.problem, exp, [0.0, 0.05])
    attacked0 = [r for r in rows if r[0] == "attacked" and r[3] == 0.0][0]
    clean0 = [r for r in rows if r[0] == "clean" and r[3] == 0.0][0]
    assert attacked0[5] == camp.mean("attacked")
    assert clean0[5] == camp.mean("clean")
    back = read_csv(tmp_path / "noise_sweep.csv")
    assert len(back) == len(rows) == 4
    with pytest.raises(ValueError):
        noise_sweep(toy.problem, exp, [-0.1])


def test_clean_error_grows_with_noise(toy, tmp_path):
    exp = ExperimentConfig(bounds=[], output_dir=tmp_path)
    rows = noise_sweep(toy.problem, exp, [0.0, 0.1, 0.25, 0.5])
    means = [r[5] for r in rows]
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_resource_log(toy, tmp_path):
    rows = resource_log(toy.problem, AttackConfig(), batch_sizes=(1, 2, 3), iterations=2, path=tmp_path / "r.csv")
    back = read_csv(tmp_path / "r.csv")
    assert len(back) == len(rows) == 2 * 3 * 2
    assert all(r["seconds"] > 0 for r in back)
    for mode in ("fixed", "optimized"):
        peak = [max(r["peak_bytes"] for r in back if r["mode"] == mode and r["batch_size"] == b) for b in (1, 2, 3)]
        assert peak == sorted(peak)
    assert time_ratio(rows) > 0


def test_evaluate_without_attack_has_clean_only(toy):
    rep = evaluate(toy.problem)
    assert set(rep.rms) == {"clean"}
    assert np.isnan(rep.summary_row()[5])


@pytest.mark.parametrize("suffix", [".csv", ".wav"])
def test_waveform_export_round_trip(tmp_path, rng, suffix):
    x = rng.normal(0, 0.1, (4, 200))
    export_waveforms(x, tmp_path / f"w{suffix}", 16000)
    back, rate = import_waveforms(tmp_path / f"w{suffix}")
    tol = 1e-7 if suffix == ".wav" else 0
    np.testing.assert_allclose(back, x, atol=tol)
    assert rate == (16000 if suffix == ".wav" else None)
