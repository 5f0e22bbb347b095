import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from droneacoustics import (AttackConfig, AttackProblem, DroneState, PerturbationSpec, adversarial_objective,
                            build_basis, constraint_loss, pgd_attack, synth_perturbation, targeted_attack)
from droneacoustics.attack import project_amplitudes
from droneacoustics.errors import EmptyBasis, EmptyDataset, TargetOutsideRoom
from droneacoustics.localizer import forward, scaled_rms

FS = 16000


def test_default_band_has_196_harmonics():
    b = build_basis(0.1, 50, 2000, FS)
    assert len(b) == 196
    np.testing.assert_allclose(b.frequencies, np.arange(50, 2001, 10))


def test_singleton_and_empty_bands():
    assert build_basis(0.1, 120, 120, FS).frequencies.tolist() == [120.0]
    with pytest.raises(EmptyBasis):
        build_basis(0.1, 1, 9, FS)
    with pytest.raises(EmptyBasis):
        build_basis(0.1, 101, 109, FS)
    with pytest.raises(ValueError):
        build_basis(0.1, 50, 9000, FS)


@given(st.integers(1, 40), st.floats(1, 400), st.floats(0, 3000))
def test_basis_invariants(period_ms, f_min, width):
    T = period_ms / 1000
    f_max = min(f_min + width, FS / 2)
    try:
        b = build_basis(T, f_min, f_max, FS)
    except EmptyBasis:
        m = np.arange(1, int(f_max * T) + 2)
        assert not np.any((m / T >= f_min) & (m / T <= f_max))
        return
    m = b.frequencies * T
    np.testing.assert_allclose(m, np.round(m), atol=1e-9)
    assert np.all(b.frequencies >= f_min - 1e-9) and np.all(b.frequencies <= f_max + 1e-9)
    # every basis row continues exactly into the next period
    t = np.arange(2 * b.period_samples)
    direct = np.sin(2 * np.pi * np.outer(b.frequencies, t) / FS)
    np.testing.assert_allclose(np.tile(b.matrix, 2), direct, atol=1e-9)


def test_synth_examples(rng):
    b = build_basis(0.1)
    zero = synth_perturbation(PerturbationSpec(np.zeros(len(b)), (1, 1), b))
    assert np.all(zero.samples == 0) and zero.period_samples == 1600
    one = np.zeros(len(b))
    one[0] = 1.0  # 50 Hz
    s = synth_perturbation(PerturbationSpec(one, (1, 1), b)).samples
    assert np.abs(s).max() == pytest.approx(1.0, abs=1e-12)
    alpha = rng.normal(size=len(b))
    s = synth_perturbation(PerturbationSpec(alpha, (1, 1), b)).samples
    t = np.arange(1600)
    want = np.array([sum(a * np.sin(2 * np.pi * k * ti / FS) for a, k in zip(alpha, b.frequencies)) for ti in t])
    np.testing.assert_allclose(s, want, atol=1e-12 * np.abs(want).max() * 10)


def test_spec_validation_and_round_trip(tmp_path):
    b = build_basis(0.1)
    with pytest.raises(ValueError):
        PerturbationSpec(np.zeros(3), (1, 1), b)
    with pytest.raises(ValueError):
        PerturbationSpec(np.full(len(b), np.inf), (1, 1), b)
    spec = PerturbationSpec(np.linspace(-1, 1, len(b)), (1.5, 2.0), b)
    spec.save(tmp_path / "s.npz")
    back = PerturbationSpec.load(tmp_path / "s.npz")
    np.testing.assert_array_equal(back.amplitudes, spec.amplitudes)
    np.testing.assert_array_equal(back.basis.matrix, b.matrix)


def test_constraint_loss_examples(toy):
    room = toy.room
    b = build_basis(0.1)
    cfg = AttackConfig(beta=0.3, gamma=1e6, lambda_amp=2.0)
    val, res = constraint_loss(PerturbationSpec(np.zeros(len(b)), room.centroid, b), room, cfg)
    assert val == 0 and all(v == 0 for v in res.values())
    alpha = np.zeros(len(b))
    alpha[0] = 2 * cfg.beta
    val, res = constraint_loss(PerturbationSpec(alpha, room.centroid, b), room, cfg)
    assert res["amplitude_excess"] == pytest.approx(cfg.beta, abs=1e-12)
    assert val == pytest.approx(2.0 * cfg.beta, abs=1e-12)
    # a pure sine over one period has energy a^2 T / 2
    for a, active in ((0.2, False), (0.3, True)):
        alpha[0] = a
        cfg = AttackConfig(beta=10, gamma=0.25**2 * 1600 / 2)
        _, res = constraint_loss(PerturbationSpec(alpha, room.centroid, b), room, cfg)
        assert (res["power_excess"] > 0) == active
        if active:
            assert res["power_excess"] == pytest.approx(a * a * 1600 / 2 - cfg.gamma, rel=1e-12)
    _, res = constraint_loss(PerturbationSpec(np.zeros(len(b)), (-0.5, 1.0), b), room, AttackConfig())
    assert res["sdf_penalty"] == pytest.approx(0.5 + 0.1, abs=1e-12)


def test_zero_perturbation_objective_is_clean_mse(toy):
    b = build_basis(0.1)
    spec = PerturbationSpec(np.zeros(len(b)), toy.room.centroid, b)
    res = adversarial_objective(toy.model, toy.room, toy.drone, toy.states, spec, AttackConfig())
    pred = forward(toy.model, toy.dataset.inputs)
    assert res.value == pytest.approx(np.mean(np.sum((pred - toy.dataset.targets) ** 2, axis=1)), rel=1e-12)


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_alpha_gradient_matches_finite_differences(toy, rng):
    b = build_basis(0.1)
    cfg = AttackConfig(beta=0.05, gamma=0.5)
    for _ in range(5):
        spec = PerturbationSpec(rng.normal(0, 0.01, len(b)), rng.uniform([1.0, 1.0], [3.0, 2.0]), b)
        res = toy.problem.objective(spec, cfg)
        v = rng.normal(size=len(b))
        h = 1e-6
        f = lambda a: toy.problem.objective(PerturbationSpec(a, spec.source_location, b), cfg).value
        fd = (f(spec.amplitudes + h * v) - f(spec.amplitudes - h * v)) / (2 * h)
        assert abs(res.grad_alpha @ v - fd) / abs(fd) < 1e-4
        # full-coordinate check on a few entries
        idx = rng.choice(len(b), 5, replace=False)
        fds = []
        for i in idx:
            e = np.zeros(len(b))
            e[i] = h
            fds.append((f(spec.amplitudes + e) - f(spec.amplitudes - e)) / (2 * h))
        assert rel_err(res.grad_alpha[idx], np.array(fds)) < 1e-4


def test_location_gradient_matches_finite_differences(toy, rng):
    b = build_basis(0.1)
    cfg = AttackConfig(optimize_location=True)
    for _ in range(3):
        spec = PerturbationSpec(rng.normal(0, 0.02, len(b)), rng.uniform([1.0, 1.0], [3.0, 2.0]), b)
        res = toy.problem.objective(spec, cfg)
        h = 1e-5
        fd = []
        for c in range(2):
            e = np.zeros(2)
            e[c] = h
            f = lambda p: toy.problem.objective(PerturbationSpec(spec.amplitudes, p, b), cfg, want_location=False).value
            fd.append((f(spec.source_location + e) - f(spec.source_location - e)) / (2 * h))
        assert rel_err(res.grad_location, np.array(fd)) < 1e-3


def test_targeted_at_truth_matches_untargeted_loss(toy):
    room, drone = toy.room, toy.drone
    states = [DroneState((2.0, 1.6), h) for h in (0.0, 1.0, 2.0)]
    prob = AttackProblem(toy.model, room, drone, states)
    b = build_basis(0.1)
    spec = PerturbationSpec(np.full(len(b), 0.003), (2.5, 1.0), b)
    u = prob.objective(spec, AttackConfig())
    t = prob.objective(spec, AttackConfig(target=(2.0, 1.6)))
    assert t.localization_loss == pytest.approx(u.localization_loss, rel=1e-14)
    # the targeted objective is the negated loss, so gradients flip sign
    np.testing.assert_allclose(t.grad_alpha, -u.grad_alpha, rtol=1e-12, atol=1e-14)


def test_projection_meets_both_bounds(rng):
    b = build_basis(0.1)
    for _ in range(20):
        alpha = rng.normal(0, 0.1, len(b))
        beta, gamma = rng.uniform(0.01, 1), rng.uniform(0.01, 2)
        s = project_amplitudes(alpha, b, beta, gamma) @ b.matrix
        assert np.abs(s).max() <= beta * (1 + 1e-12) and np.sum(s * s) <= gamma * (1 + 1e-12)


def test_constraint_dominated_attack_stays_clean(toy):
    for project in (True, False):
        cfg = AttackConfig(beta=1e-6, gamma=1e-6, lambda_amp=1e3, lambda_power=1e3, lambda_sdf=1e3,
                           max_iters=10, project=project)
        rep = pgd_attack(toy.model, toy.room, toy.drone, toy.problem, cfg)
        s = synth_perturbation(rep.spec).samples
        assert np.sum(s * s) <= 1e-6 * (1 + 1e-9)
        assert rep.rms_truth == pytest.approx(rep.clean_rms, rel=0.05)


def test_report_shapes_monotone_best_and_determinism(toy, tmp_path):
    cfg = AttackConfig(beta=0.5, gamma=1.0, max_iters=12, noise_std=1e-3, seed=3)
    a = pgd_attack(toy.model, toy.room, toy.drone, toy.problem, cfg)
    b = pgd_attack(toy.model, toy.room, toy.drone, toy.problem, cfg)
    assert len(a.objective) == len(a.best_objective) == len(a.localization_loss) == a.iterations <= 12
    assert np.all(np.diff(a.best_objective) >= 0)
    assert a.best_objective[-1] == max(a.objective)
    np.testing.assert_array_equal(a.spec.amplitudes, b.spec.amplitudes)
    assert a.objective == b.objective
    assert a.spec.amplitudes.shape == (196,) and a.spec.source_location.shape == (2,)
    assert all(np.isfinite(v) for v in a.residuals.values())
    a.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,objective,best_objective") and len(lines) == a.iterations + 1


def test_early_stop_after_patience(toy):
    # a zero step never changes the loss, so patience runs out right away
    cfg = AttackConfig(step_size=0.0, max_iters=50, early_stop_patience=3)
    rep = pgd_attack(toy.model, toy.room, toy.drone, toy.problem, cfg)
    assert rep.stopped_early and rep.iterations == 4


def test_attack_errors(toy):
    with pytest.raises(TargetOutsideRoom):
        targeted_attack(toy.model, toy.room, toy.drone, toy.problem, AttackConfig(max_iters=1), (9.0, 9.0))
    with pytest.raises(EmptyDataset):
        AttackProblem(toy.model, toy.room, toy.drone, [])
    with pytest.raises(ValueError):
        AttackConfig(beta=-1)
    with pytest.raises(ValueError):
        AttackConfig(max_iters=0)


def test_minibatched_objective_matches_full_batch(toy, rng):
    b = build_basis(0.1)
    spec = PerturbationSpec(rng.normal(0, 0.01, len(b)), (2.2, 1.1), b)
    full = toy.problem.objective(spec, AttackConfig(optimize_location=True))
    mini = toy.problem.objective(spec, AttackConfig(optimize_location=True, batch_size=2))
    assert mini.value == pytest.approx(full.value, rel=1e-12)
    np.testing.assert_allclose(mini.grad_alpha, full.grad_alpha, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(mini.grad_location, full.grad_location, rtol=1e-10, atol=1e-14)


@pytest.fixture(scope="module")
def centroid_runs(desk):
    p = desk.problem
    centroid = tuple(desk.dataset.locations.mean(axis=0))
    cfg = AttackConfig(beta=1.0, gamma=2.0)
    unt = pgd_attack(p.model, p.room, p.drone, p, cfg)
    tgt = targeted_attack(p.model, p.room, p.drone, p, cfg, centroid)
    return p, desk.dataset.normalize(centroid), unt, tgt


@pytest.mark.slow
def test_targeted_attack_beats_untargeted_toward_target(centroid_runs):
    p, target, unt, tgt = centroid_runs
    unt_to_target = scaled_rms(p.predict(unt.spec), np.broadcast_to(target, (len(p), 2)))
    assert tgt.rms_target < unt_to_target


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="power-limited at desk scale: the bounded source is far quieter than the "
                                       "drone's own rotors at its microphones, so predictions cannot be herded "
                                       "to one point; see the decisions ledger")
def test_targeted_attack_halves_distance_to_low_certainty_target(desk):
    from droneacoustics.harness import cell_rms

    p = desk.problem
    cells, rms, _ = cell_rms(p.predict(), p.truth, desk.dataset.locations)
    target = tuple(cells[np.argmax(rms)])
    tgt = targeted_attack(p.model, p.room, p.drone, p, AttackConfig(beta=1.0, gamma=2.0), target)
    assert tgt.rms_target < 0.5 * tgt.clean_rms_target
