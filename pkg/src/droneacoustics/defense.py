"""Perturbation delineation by constant phase-offset probing, and the δ-sensitivity bound."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .acoustics import Room, Waveform, fold_taps, rir_batch
from .attack import PerturbationSpec, synth_perturbation
from .drone import DroneConfig, DroneState, SceneTransfer, world_positions
from .errors import PeriodMismatch, ShapeMismatch
from .localizer import LocalizerModel, _as_batch, forward, input_gradient

PROBE_CHUNK = 128


@dataclass
class DelineationResult:
    recovered: list[Waveform]
    num_probes: int
    residual: np.ndarray | None = None

    @property
    def array(self) -> np.ndarray:
        return np.stack([w.samples for w in self.recovered])

    def to_csv(self, path):
        arr = self.array
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample"] + [f"mic{m}" for m in range(len(arr))])
            for t in range(arr.shape[1]):
                w.writerow([t] + [repr(float(v)) for v in arr[:, t]])


def perturbation_response(room: Room, config: DroneConfig, state: DroneState,
                          spec: PerturbationSpec) -> np.ndarray:
    """Steady-state perturbation ``sigma_p`` at each microphone, ``(mics, T_drone)``."""
    P = config.period_samples
    if P % spec.basis.period_samples:
        raise PeriodMismatch(
            f"perturbation period {spec.basis.period_samples} does not divide drone period {P}")
    _, mics = world_positions(config, state)
    taps, off = rir_batch(room, spec.source_location, mics, config.sample_rate)
    src = np.tile(synth_perturbation(spec).samples, P // spec.basis.period_samples)
    H = np.fft.rfft(fold_taps(taps, off, P), axis=-1)
    return np.fft.irfft(np.fft.rfft(src) * H, P, axis=-1)


def delineate(room: Room, config: DroneConfig, state: DroneState, spec: PerturbationSpec | None = None,
              noise_std: float = 0.0, repeats: int = 1, rng=None,
              transfer: SceneTransfer | None = None, sigma: np.ndarray | None = None) -> DelineationResult:
    """Sweep constant rotor offsets ``j = 0..T-1`` and read sample ``j`` of each probe.

    ``s(t=j; j) - s(t=0; 0)`` cancels the (shifted) self-sound and leaves
    ``sigma_p(j) - sigma_p(0)``.  With ``noise_std > 0`` each probe is
    repeated ``repeats`` times with fresh sensor noise and averaged.
    ``sigma`` may be passed instead of ``spec`` to probe an arbitrary
    periodic perturbation already sampled at the microphones.
    """
    P = config.period_samples
    if sigma is None:
        if spec is None:
            raise ValueError("need a perturbation spec or a sampled perturbation")
        sigma = perturbation_response(room, config, state, spec)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (config.num_mics, P):
        raise PeriodMismatch(f"perturbation shape {sigma.shape} does not match ({config.num_mics}, {P})")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    if noise_std > 0 and rng is None:
        rng = np.random.default_rng(0)
    transfer = transfer or SceneTransfer.build(room, config, state)
    reps = repeats if noise_std > 0 else 1
    picked = np.zeros((config.num_mics, P))
    for start in range(0, P, PROBE_CHUNK):
        js = np.arange(start, min(P, start + PROBE_CHUNK))
        acc = np.zeros((config.num_mics, len(js)))
        for _ in range(reps):
            obs = transfer.responses_constant(js) + sigma[None]
            if noise_std > 0:
                obs = obs + rng.normal(0.0, noise_std, obs.shape)
            acc += obs[np.arange(len(js)), :, js].T
        picked[:, js] = acc / reps
    # under the δ = 0 convention the reference is sample 0 of the j = 0 probe
    rec = picked - picked[:, :1]
    truth = sigma - sigma[:, :1]
    return DelineationResult(
        [Waveform(ch, config.sample_rate, P) for ch in rec],
        num_probes=P,
        residual=np.abs(rec - truth).max(axis=1),
    )


def recover_and_localize(model: LocalizerModel, s_mu, result: DelineationResult) -> np.ndarray:
    """Subtract the delineated perturbation and localize (normalized coordinates)."""
    x = np.asarray(s_mu, dtype=float)
    rec = result.array
    if x.shape != rec.shape:
        raise ShapeMismatch(f"observation shape {x.shape} vs recovered {rec.shape}")
    return forward(model, x - rec)


def delta_sensitivity(model: LocalizerModel, x) -> float:
    """Largest absolute input-gradient entry over both outputs.

    Adding a constant ``c`` to every input sample moves each output by at
    most about ``bound * |c| * num_inputs`` to first order.
    """
    x = np.asarray(x, dtype=float)
    xb, single = _as_batch(model, x)
    if not single:
        raise ShapeMismatch("delta_sensitivity takes a single input")
    return float(max(np.abs(input_gradient(model, xb[0], e)).max() for e in np.eye(2)))
