"""Drone self-sound, phase modulation and per-microphone scene responses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .acoustics import DEFAULT_SAMPLE_RATE, Room, Waveform, circular_convolve, fold_taps, rir_batch
from .errors import IndexOutOfRange

DEFAULT_PERIOD = 1600


@dataclass(frozen=True, eq=False)
class DroneConfig:
    rotor_offsets: np.ndarray
    mic_offsets: np.ndarray
    rotor_waveform: Waveform

    def __post_init__(self):
        rotors = np.array(self.rotor_offsets, dtype=float).reshape(-1, 2)
        mics = np.array(self.mic_offsets, dtype=float).reshape(-1, 2)
        if len(rotors) < 1 or len(mics) < 1:
            raise ValueError("drone needs at least one rotor and one microphone")
        if len({tuple(m) for m in mics}) != len(mics):
            raise ValueError("microphone offsets must be distinct")
        wf = self.rotor_waveform
        if wf.period_samples is None or len(wf) != wf.period_samples:
            raise ValueError("rotor waveform must hold exactly one period")
        if abs(wf.samples.mean()) > 1e-9 * max(1.0, np.abs(wf.samples).max()):
            raise ValueError("rotor waveform must have zero mean")
        object.__setattr__(self, "rotor_offsets", rotors)
        object.__setattr__(self, "mic_offsets", mics)

    @property
    def num_rotors(self) -> int:
        return len(self.rotor_offsets)

    @property
    def num_mics(self) -> int:
        return len(self.mic_offsets)

    @property
    def period_samples(self) -> int:
        return self.rotor_waveform.period_samples

    @property
    def sample_rate(self) -> float:
        return self.rotor_waveform.sample_rate

    @property
    def radius(self) -> float:
        """Distance from the center to the farthest rotor or microphone."""
        pts = np.vstack([self.rotor_offsets, self.mic_offsets])
        return float(np.linalg.norm(pts, axis=1).max())


@dataclass(frozen=True)
class DroneState:
    center: tuple[float, float]
    heading: float = 0.0


@dataclass(frozen=True)
class PhaseModulation:
    """Per-rotor integer sample offsets."""

    offsets: tuple[int, ...]

    @classmethod
    def constant(cls, j: int, num_rotors: int) -> "PhaseModulation":
        return cls(tuple([int(j)] * num_rotors))

    @classmethod
    def none(cls, num_rotors: int) -> "PhaseModulation":
        return cls.constant(0, num_rotors)


def harmonic_waveform(period_samples=DEFAULT_PERIOD, sample_rate=DEFAULT_SAMPLE_RATE,
                      fundamental_index=8, num_harmonics=6, amplitude=1.0, seed=0) -> Waveform:
    """One period of a harmonic series with 1/k amplitudes and seeded random phases.

    The fundamental is ``fundamental_index`` times the cycle frequency
    ``sample_rate / period_samples`` so the waveform is exactly periodic.
    The result is scaled to peak ``amplitude``.
    """
    if fundamental_index * num_harmonics >= period_samples / 2:
        raise ValueError("harmonics exceed Nyquist")
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, num_harmonics)
    t = np.arange(period_samples)
    w = np.zeros(period_samples)
    for k in range(1, num_harmonics + 1):
        w += np.sin(2 * np.pi * k * fundamental_index * t / period_samples + phases[k - 1]) / k
    w -= w.mean()
    w *= amplitude / np.abs(w).max()
    return Waveform(w, sample_rate, period_samples)


def default_drone(sample_rate=DEFAULT_SAMPLE_RATE, period_samples=DEFAULT_PERIOD,
                  fundamental_index=8, num_harmonics=6, amplitude=0.1, seed=0,
                  rotor_square=0.2, mic_circle=0.3, num_mics=4) -> DroneConfig:
    """Quadrotor with rotors on a square and microphones on a circle (diameters in meters)."""
    h = rotor_square / 2
    rotors = np.array([[h, h], [-h, h], [-h, -h], [h, -h]])
    ang = 2 * np.pi * np.arange(num_mics) / num_mics
    mics = (mic_circle / 2) * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    wf = harmonic_waveform(period_samples, sample_rate, fundamental_index, num_harmonics, amplitude, seed)
    return DroneConfig(rotors, mics, wf)


def shift_waveform(samples, j: int) -> np.ndarray:
    """Circular delay by ``j`` samples: ``out[t] = samples[(t - j) mod T]``."""
    return np.roll(np.asarray(samples), int(j) % len(samples))


def rotor_sound(config: DroneConfig, rotor: int, mod: PhaseModulation | None = None) -> Waveform:
    if not 0 <= rotor < config.num_rotors:
        raise IndexOutOfRange(f"rotor {rotor} not in [0, {config.num_rotors})")
    j = 0 if mod is None else mod.offsets[rotor]
    wf = config.rotor_waveform
    return Waveform(shift_waveform(wf.samples, j), wf.sample_rate, wf.period_samples)


def _rotation(heading):
    c, s = np.cos(heading), np.sin(heading)
    return np.array([[c, -s], [s, c]])


def world_positions(config: DroneConfig, state: DroneState) -> tuple[np.ndarray, np.ndarray]:
    rot = _rotation(state.heading)
    center = np.asarray(state.center, dtype=float)
    return config.rotor_offsets @ rot.T + center, config.mic_offsets @ rot.T + center


@dataclass(eq=False)
class SceneTransfer:
    """Steady-state transfer spectra from every rotor to every microphone.

    Evaluating a modulated response only needs phase ramps on the cached
    spectra, so sweeping many modulations at a fixed state is cheap.
    ``evaluations`` counts scene evaluations for instrumentation.
    """

    config: DroneConfig
    spectra: np.ndarray  # (rotors, mics, freqs) complex
    evaluations: int = field(default=0)

    @classmethod
    def build(cls, room: Room, config: DroneConfig, state: DroneState) -> "SceneTransfer":
        rotors, mics = world_positions(config, state)
        P = config.period_samples
        folded = np.empty((config.num_rotors, config.num_mics, P))
        for r, pos in enumerate(rotors):
            taps, off = rir_batch(room, pos, mics, config.sample_rate)
            folded[r] = fold_taps(taps, off, P)
        return cls(config, np.fft.rfft(folded, axis=-1))

    def response(self, mod: PhaseModulation | None = None) -> np.ndarray:
        """Per-microphone steady-state signal, shape ``(mics, period)``."""
        return self.responses_constant([0])[0] if mod is None else self._modulated(mod)

    def _modulated(self, mod):
        self.evaluations += 1
        P = self.config.period_samples
        src = np.stack([rotor_sound(self.config, r, mod).samples for r in range(self.config.num_rotors)])
        S = np.fft.rfft(src, axis=-1)
        return np.fft.irfft(np.einsum("rf,rmf->mf", S, self.spectra), P, axis=-1)

    def responses_constant(self, shifts) -> np.ndarray:
        """Responses under constant all-rotor modulation, one per shift: ``(len(shifts), mics, period)``."""
        shifts = np.asarray(shifts, dtype=int)
        self.evaluations += len(shifts)
        P = self.config.period_samples
        W = np.fft.rfft(self.config.rotor_waveform.samples)
        base = np.einsum("f,rmf->mf", W, self.spectra)
        f = np.arange(base.shape[-1])
        ramp = np.exp(-2j * np.pi * np.outer(shifts % P, f) / P)
        return np.fft.irfft(ramp[:, None, :] * base[None], P, axis=-1)


def scene_response(room: Room, config: DroneConfig, state: DroneState,
                   mod: PhaseModulation | None = None) -> list[Waveform]:
    """Steady-state signal at each microphone: sum over rotors of RIR * rotor sound."""
    rotors, mics = world_positions(config, state)
    P = config.period_samples
    out = np.zeros((config.num_mics, P))
    for r, pos in enumerate(rotors):
        taps, off = rir_batch(room, pos, mics, config.sample_rate)
        src = rotor_sound(config, r, mod).samples
        out += circular_convolve(src[None, :], fold_taps(taps, off, P))
    return [Waveform(ch, config.sample_rate, P) for ch in out]
