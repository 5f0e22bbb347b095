import numpy as np
import pytest

from droneacoustics import (DroneConfig, LocalizerModel, PerturbationSpec, SceneTransfer, build_basis, compute_rir,
                            delineate, delta_sensitivity, forward, propagate, recover_and_localize, synth_perturbation)
from droneacoustics.acoustics import Waveform
from droneacoustics.drone import harmonic_waveform, world_positions
from droneacoustics.errors import PeriodMismatch, ShapeMismatch


def sigma_reference(room, drone, state, spec):
    """Perturbation at each mic via per-mic RIRs and steady-state propagation."""
    _, mics = world_positions(drone, state)
    s = synth_perturbation(spec)
    return np.stack([propagate(s, compute_rir(room, spec.source_location, m, drone.sample_rate), True).samples
                     for m in mics])


def random_spec(rng, room, scale=0.05):
    b = build_basis(0.1)
    return PerturbationSpec(rng.normal(0, scale, len(b)), rng.uniform([0.8, 0.8], [3.6, 2.4]), b)


def test_zero_perturbation_recovers_zero(toy):
    b = build_basis(0.1)
    res = delineate(toy.room, toy.drone, toy.states[0], PerturbationSpec(np.zeros(len(b)), (1, 1), b))
    # the probes differ from the reference only by FFT rounding
    assert np.abs(res.array).max() < 1e-12 * np.abs(toy.dataset.inputs[0]).max()


def test_recovers_sigma_minus_its_first_sample(toy, rng):
    for state in toy.states:
        spec = random_spec(rng, toy.room)
        sigma = sigma_reference(toy.room, toy.drone, state, spec)
        tr = SceneTransfer.build(toy.room, toy.drone, state)
        res = delineate(toy.room, toy.drone, state, spec, transfer=tr)
        want = sigma - sigma[:, :1]
        assert np.abs(res.array - want).max() < 1e-9 * np.abs(sigma).max()
        assert res.num_probes == tr.evaluations == toy.drone.period_samples
        assert np.all(res.array[:, 0] == 0)
        assert res.array.shape == (toy.drone.num_mics, toy.drone.period_samples)
        assert np.all(res.residual < 1e-9 * np.abs(sigma).max())


def test_recovery_is_independent_of_rotor_sound(toy, rng):
    spec = random_spec(rng, toy.room)
    other = DroneConfig(toy.drone.rotor_offsets, toy.drone.mic_offsets,
                        harmonic_waveform(1600, 16000, fundamental_index=11, num_harmonics=3, amplitude=0.3, seed=9))
    a = delineate(toy.room, toy.drone, toy.states[1], spec).array
    b = delineate(toy.room, other, toy.states[1], spec).array
    assert np.abs(a - b).max() < 1e-9 * np.abs(a).max()


def test_period_mismatch(toy):
    b = build_basis(700 / 16000, 50, 2000)
    with pytest.raises(PeriodMismatch):
        delineate(toy.room, toy.drone, toy.states[0], PerturbationSpec(np.ones(len(b)), (1, 1), b))
    with pytest.raises(PeriodMismatch):
        delineate(toy.room, toy.drone, toy.states[0], sigma=np.zeros((4, 800)))


def test_sub_period_perturbation_is_tiled(toy, rng):
    b = build_basis(800 / 16000, 50, 2000)
    spec = PerturbationSpec(rng.normal(0, 0.05, len(b)), (2.0, 1.0), b)
    res = delineate(toy.room, toy.drone, toy.states[0], spec)
    assert res.array.shape == (4, 1600)
    np.testing.assert_allclose(res.array[:, :800] + 0, res.array[:, 800:], atol=1e-12)


def test_noisy_probes_average_down(toy, rng):
    spec = random_spec(rng, toy.room)
    sigma = sigma_reference(toy.room, toy.drone, toy.states[0], spec)
    want = sigma - sigma[:, :1]
    err = {}
    for reps in (1, 16):
        res = delineate(toy.room, toy.drone, toy.states[0], spec, noise_std=0.01, repeats=reps,
                        rng=np.random.default_rng(0))
        err[reps] = np.sqrt(np.mean((res.array - want) ** 2))
    assert err[16] < 0.5 * err[1]


def test_exact_cancellation_restores_clean_estimate(toy, rng):
    clean = toy.dataset.inputs[0]
    sigma = rng.normal(0, 0.05, clean.shape)
    sigma[:, 0] = 0.0
    res = delineate(toy.room, toy.drone, toy.states[0], sigma=sigma)
    np.testing.assert_allclose(recover_and_localize(toy.model, clean + sigma, res), forward(toy.model, clean),
                               atol=1e-12)
    with pytest.raises(ShapeMismatch):
        recover_and_localize(toy.model, clean[:, :10], res)


def test_dc_residual_shift_is_bounded(toy, rng):
    clean = toy.dataset.inputs[1]
    sigma = rng.normal(0, 0.01, clean.shape)
    c = 1e-4
    sigma[:, 0] = c  # constant left behind after recovery on every sample
    res = delineate(toy.room, toy.drone, toy.states[1], sigma=sigma)
    got = recover_and_localize(toy.model, clean + sigma, res)
    base = forward(toy.model, clean)
    np.testing.assert_allclose(toy.dataset.inputs[1] + sigma - res.array, clean + c, atol=1e-15)
    bound = delta_sensitivity(toy.model, clean) * c * clean.size
    assert np.abs(got - base).max() <= bound


def test_delta_sensitivity_linear_and_zero_models(rng):
    m = LocalizerModel.create(2, 6, subsample=None, hidden=(), seed=1)
    assert delta_sensitivity(m, rng.normal(size=(2, 6))) == pytest.approx(np.abs(m.params["W0"]).max(), rel=1e-15)
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    assert delta_sensitivity(m, rng.normal(size=(2, 6))) == 0.0
    with pytest.raises(ShapeMismatch):
        delta_sensitivity(m, rng.normal(size=(3, 2, 6)))


def test_delta_sensitivity_bounds_constant_offsets(rng):
    for seed in range(10):
        m = LocalizerModel.create(3, 40, subsample=6, hidden=(12, 8), seed=seed)
        x = rng.normal(size=(3, 40))
        bound = delta_sensitivity(m, x)
        for c in (1e-4, 1e-3):
            shift = np.abs(forward(m, x + c) - forward(m, x)).max()
            assert shift <= bound * c * x.size
