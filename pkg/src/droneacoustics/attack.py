"""Universal sine-basis perturbation attack against a trained localizer.

The attacker emits ``s_p = sum_k alpha_k sin(2 pi k t / fs)`` from a single
point ``x_p``.  Optimization is gradient ascent on

    objective = mean ||F(clean + sigma_p) - x_d||^2 - L_q            (untargeted)
    objective = -mean ||F(clean + sigma_p) - target||^2 - L_q        (targeted)

where ``sigma_p`` is the steady-state response of ``s_p`` at every
microphone and ``L_q`` holds the amplitude, power and location hinge
penalties.  Signs are arranged so the penalties always discourage
infeasible perturbations.
"""

from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import dataclass, field, replace

import numpy as np

from .acoustics import Room, fold_taps, image_sources, rir_batch, sdf, sdf_gradient
from .drone import DroneConfig, DroneState, world_positions
from .errors import EmptyBasis, EmptyDataset, TargetOutsideRoom
from .localizer import (Dataset, LocalizerModel, forward, normalize_locations, scaled_rms,
                        value_and_input_gradient)

F_MIN = 50.0
F_MAX = 2000.0


@dataclass(frozen=True, eq=False)
class FrequencyBasis:
    """Sines at whole multiples of the drone cycle frequency."""

    frequencies: np.ndarray
    period_samples: int
    sample_rate: float

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float).reshape(-1)
        if len(f) == 0:
            raise EmptyBasis("frequency basis is empty")
        m = f * self.period_samples / self.sample_rate
        if np.any(np.abs(m - np.round(m)) > 1e-9):
            raise ValueError("basis frequencies must be whole multiples of the cycle frequency")
        object.__setattr__(self, "frequencies", f)
        t = np.arange(self.period_samples)
        harm = np.round(m).astype(int)
        # integer arithmetic in the phase keeps every row exactly periodic
        matrix = np.sin(2 * np.pi * ((np.outer(harm, t)) % self.period_samples) / self.period_samples)
        object.__setattr__(self, "harmonics", harm)
        object.__setattr__(self, "matrix", matrix)

    def __len__(self):
        return len(self.frequencies)


def build_basis(period_seconds: float, f_min: float = F_MIN, f_max: float = F_MAX,
                sample_rate: float = 16000) -> FrequencyBasis:
    """Every harmonic ``m / period_seconds`` inside ``[f_min, f_max]``."""
    if not (0 < f_min <= f_max <= sample_rate / 2):
        raise ValueError("need 0 < f_min <= f_max <= sample_rate / 2")
    period = period_seconds * sample_rate
    if abs(period - round(period)) > 1e-6:
        raise ValueError("period must be a whole number of samples")
    period = int(round(period))
    lo = int(np.ceil(f_min * period_seconds - 1e-9))
    hi = int(np.floor(f_max * period_seconds + 1e-9))
    if hi < max(lo, 1):
        raise EmptyBasis(f"no harmonic of {1 / period_seconds:g} Hz in [{f_min}, {f_max}] Hz")
    m = np.arange(max(lo, 1), hi + 1)
    return FrequencyBasis(m * sample_rate / period, period, sample_rate)


@dataclass(eq=False)
class PerturbationSpec:
    amplitudes: np.ndarray
    source_location: np.ndarray
    basis: FrequencyBasis

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=float).reshape(-1)
        self.source_location = np.asarray(self.source_location, dtype=float).reshape(2)
        if len(self.amplitudes) != len(self.basis):
            raise ValueError("one amplitude per basis frequency is required")
        if not np.all(np.isfinite(self.amplitudes)):
            raise ValueError("amplitudes must be finite")

    def copy(self) -> "PerturbationSpec":
        return PerturbationSpec(self.amplitudes.copy(), self.source_location.copy(), self.basis)

    def save(self, path):
        np.savez(path, amplitudes=self.amplitudes, source_location=self.source_location,
                 frequencies=self.basis.frequencies,
                 period_samples=np.array(self.basis.period_samples),
                 sample_rate=np.array(self.basis.sample_rate))

    @classmethod
    def load(cls, path) -> "PerturbationSpec":
        with np.load(path) as z:
            basis = FrequencyBasis(z["frequencies"], int(z["period_samples"]), float(z["sample_rate"]))
            return cls(z["amplitudes"], z["source_location"], basis)


def synth_perturbation(spec: PerturbationSpec):
    """One period of the source-side perturbation waveform."""
    from .acoustics import Waveform

    b = spec.basis
    return Waveform(spec.amplitudes @ b.matrix, b.sample_rate, b.period_samples)


@dataclass
class AttackConfig:
    beta: float = 1.0
    gamma: float = 2.0
    lambda_amp: float = 1.0
    lambda_power: float = 1.0
    lambda_sdf: float = 1.0
    max_iters: int = 100
    early_stop_patience: int = 5
    step_size: float = 0.01
    location_step: float = 0.005
    optimize_location: bool = False
    target: tuple[float, float] | None = None
    noise_std: float = 0.0
    sdf_margin: float = 0.1
    f_min: float = F_MIN
    f_max: float = F_MAX
    project: bool = True
    source_location: tuple[float, float] | None = None
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("beta", "gamma", "lambda_amp", "lambda_power", "lambda_sdf", "noise_std",
                     "step_size", "location_step", "sdf_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def constraint_loss(spec: PerturbationSpec, room: Room, cfg: AttackConfig):
    """Hinge penalty ``L_q`` on the source-side waveform and source location.

    Returns ``(value, residuals)``; residuals hold the raw amplitude excess,
    power excess and SDF penalty before weighting.
    """
    s = synth_perturbation(spec).samples
    amp = max(0.0, float(np.abs(s).max()) - cfg.beta)
    power = max(0.0, float(np.sum(s * s)) - cfg.gamma)
    loc = max(0.0, float(sdf(room, spec.source_location)) + cfg.sdf_margin)
    value = cfg.lambda_amp * amp + cfg.lambda_power * power + cfg.lambda_sdf * loc
    return value, {"amplitude_excess": amp, "power_excess": power, "sdf_penalty": loc}


def _constraint_grad(spec, room, cfg):
    B = spec.basis.matrix
    s = spec.amplitudes @ B
    g_alpha = np.zeros(len(B))
    t = int(np.argmax(np.abs(s)))
    if np.abs(s[t]) > cfg.beta:
        g_alpha += cfg.lambda_amp * np.sign(s[t]) * B[:, t]
    if np.sum(s * s) > cfg.gamma:
        g_alpha += cfg.lambda_power * 2.0 * (B @ s)
    g_loc = np.zeros(2)
    if sdf(room, spec.source_location) + cfg.sdf_margin > 0:
        g_loc = cfg.lambda_sdf * sdf_gradient(room, spec.source_location)
    return g_alpha, g_loc


@dataclass
class ObjectiveResult:
    value: float
    localization_loss: float
    constraint: float
    grad_alpha: np.ndarray
    grad_location: np.ndarray | None
    predictions: np.ndarray


class AttackProblem:
    """Fixed ingredients of an attack: model, scene, evaluation states and clean inputs.

    Perturbation transfer spectra are cached per source location.
    """

    def __init__(self, model: LocalizerModel, room: Room, drone: DroneConfig,
                 states: list[DroneState], clean: np.ndarray | None = None):
        if len(states) == 0:
            raise EmptyDataset("attack needs at least one drone state")
        self.model, self.room, self.drone = model, room, drone
        self.states = list(states)
        self.mics = np.stack([world_positions(drone, s)[1] for s in self.states])
        if clean is None:
            from .drone import SceneTransfer

            clean = np.stack([SceneTransfer.build(room, drone, s).response() for s in self.states])
        self.clean = np.asarray(clean, dtype=float)
        self.truth = normalize_locations([s.center for s in self.states], room.bounds)
        self._cache_key = None
        self._cache = None

    @classmethod
    def from_dataset(cls, model, room, drone, dataset: Dataset) -> "AttackProblem":
        states = [DroneState((float(x), float(y)), float(h))
                  for (x, y), h in zip(dataset.locations, dataset.headings)]
        return cls(model, room, drone, states, dataset.inputs)

    def __len__(self):
        return len(self.states)

    @property
    def period(self) -> int:
        return self.drone.period_samples

    def transfer(self, location, idx=None, jacobian=False):
        """Spectra of the folded RIRs from ``location`` to the microphones of states ``idx``.

        Returns ``H`` shaped ``(n, mics, freqs)`` and, with ``jacobian``,
        ``dH`` shaped ``(n, mics, freqs, 2)``.
        """
        location = np.asarray(location, dtype=float)
        key = (tuple(location), jacobian)
        if idx is None and self._cache_key == key:
            return self._cache
        sel = slice(None) if idx is None else idx
        mics = self.mics[sel]
        n, m = mics.shape[:2]
        images = image_sources(self.room, location)
        res = rir_batch(self.room, location, mics.reshape(-1, 2), self.drone.sample_rate,
                        jacobian=jacobian, images=images)
        P = self.period
        H = np.fft.rfft(fold_taps(res[0], res[-1], P), axis=-1).reshape(n, m, -1)
        out = (H, None)
        if jacobian:
            J = np.moveaxis(res[1], -1, 1)  # (n*m, 2, L)
            dH = np.fft.rfft(fold_taps(J, res[-1], P), axis=-1).reshape(n, m, 2, -1)
            out = (H, np.moveaxis(dH, 2, -1))
        if idx is None:
            self._cache_key, self._cache = key, out
        return out

    def perturbation_at_mics(self, spec: PerturbationSpec, idx=None) -> np.ndarray:
        H, _ = self.transfer(spec.source_location, idx)
        S = np.fft.rfft(synth_perturbation(spec).samples)
        return np.fft.irfft(S * H, self.period, axis=-1)

    def objective(self, spec: PerturbationSpec, cfg: AttackConfig, rng=None,
                  want_location: bool | None = None) -> ObjectiveResult:
        """Objective value and exact gradients with respect to amplitudes (and location)."""
        if want_location is None:
            want_location = cfg.optimize_location
        n = len(self)
        reference = self.truth if cfg.target is None else np.broadcast_to(
            normalize_locations(cfg.target, self.room.bounds), self.truth.shape)
        sign = 1.0 if cfg.target is None else -1.0
        S = np.fft.rfft(synth_perturbation(spec).samples)
        P = self.period
        bs = cfg.batch_size or n
        # cache spectra across iterations only when the whole set is one batch
        whole = bs >= n
        g_sp = np.zeros(len(S), dtype=complex)
        g_loc = np.zeros(2)
        loss = 0.0
        preds = np.empty((n, 2))
        for start in range(0, n, bs):
            idx = None if whole else np.arange(start, min(n, start + bs))
            sel = slice(None) if whole else idx
            H, dH = self.transfer(spec.source_location, idx, jacobian=want_location)
            sigma = np.fft.irfft(S * H, P, axis=-1)
            x = self.clean[sel] + sigma
            if cfg.noise_std > 0:
                x = x + rng.normal(0.0, cfg.noise_std, x.shape)
            ref = reference[sel]
            y, gx = value_and_input_gradient(self.model, x, lambda y: sign * 2.0 * (y - ref) / n)
            preds[sel] = y
            loss += float(np.sum((y - ref) ** 2))
            GX = np.fft.rfft(gx, axis=-1)
            g_sp += np.einsum("bmf,bmf->f", np.conj(H), GX)
            if want_location:
                for c in range(2):
                    dsig = np.fft.irfft(S * dH[..., c], P, axis=-1)
                    g_loc[c] += float(np.sum(gx * dsig))
        loss /= n
        grad_sp = np.fft.irfft(g_sp, P)
        grad_alpha = spec.basis.matrix @ grad_sp
        lq, _ = constraint_loss(spec, self.room, cfg)
        ca, cl = _constraint_grad(spec, self.room, cfg)
        return ObjectiveResult(
            value=sign * loss - lq,
            localization_loss=loss,
            constraint=lq,
            grad_alpha=grad_alpha - ca,
            grad_location=(g_loc - cl) if want_location else None,
            predictions=preds,
        )

    def predict(self, spec: PerturbationSpec | None = None, noise_std: float = 0.0, rng=None) -> np.ndarray:
        x = self.clean if spec is None else self.clean + self.perturbation_at_mics(spec)
        if noise_std > 0:
            x = x + rng.normal(0.0, noise_std, x.shape)
        return forward(self.model, x)


def project_amplitudes(alpha, basis: FrequencyBasis, beta: float, gamma: float) -> np.ndarray:
    """Shrink ``alpha`` radially until the source waveform meets both signal bounds."""
    s = alpha @ basis.matrix
    peak = float(np.abs(s).max())
    power = float(np.sum(s * s))
    scale = 1.0
    if peak > beta:
        scale = min(scale, beta / peak)
    if power > gamma:
        scale = min(scale, np.sqrt(gamma / power))
    return alpha * scale


def project_location(room: Room, p, clearance: float = 0.01) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    for _ in range(10):
        d = sdf(room, p)
        if d <= -clearance:
            break
        p = p - (d + clearance) * sdf_gradient(room, p)
    return p


@dataclass
class AttackReport:
    objective: list[float]
    best_objective: list[float]
    localization_loss: list[float]
    spec: PerturbationSpec
    clean_rms: float
    rms_truth: float
    rms_target: float | None
    clean_rms_target: float | None
    residuals: dict[str, float]
    stopped_early: bool
    iteration_seconds: list[float] = field(default_factory=list)
    peak_bytes: list[int] = field(default_factory=list)
    locations: list[tuple[float, float]] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.objective)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "best_objective", "localization_loss",
                        "source_x", "source_y", "seconds", "peak_bytes"])
            for i in range(self.iterations):
                loc = self.locations[i] if self.locations else (float("nan"), float("nan"))
                sec = self.iteration_seconds[i] if self.iteration_seconds else float("nan")
                mem = self.peak_bytes[i] if self.peak_bytes else -1
                w.writerow([i, repr(self.objective[i]), repr(self.best_objective[i]),
                            repr(self.localization_loss[i]), repr(loc[0]), repr(loc[1]),
                            repr(sec), mem])

    def summary(self) -> dict:
        out = {"iterations": self.iterations, "clean_rms": self.clean_rms, "rms_truth": self.rms_truth,
               "stopped_early": self.stopped_early,
               "source_x": float(self.spec.source_location[0]),
               "source_y": float(self.spec.source_location[1])}
        if self.rms_target is not None:
            out["rms_target"] = self.rms_target
            out["clean_rms_target"] = self.clean_rms_target
        out.update(self.residuals)
        return out


def pgd_attack(model: LocalizerModel, room: Room, drone: DroneConfig, dataset: Dataset | AttackProblem,
               cfg: AttackConfig | None = None, track_memory: bool = False) -> AttackReport:
    """Universal perturbation by gradient ascent over the full dataset each iteration.

    Each step moves the amplitudes by ``step_size`` (and the source by
    ``location_step`` meters) along the normalized gradient, then projects
    back onto the signal bounds when ``cfg.project`` is set.  Stops after
    ``early_stop_patience`` iterations without improving the best objective
    and returns the best iterate.
    """
    cfg = cfg or AttackConfig()
    problem = dataset if isinstance(dataset, AttackProblem) else AttackProblem.from_dataset(
        model, room, drone, dataset)
    if len(problem) == 0:
        raise EmptyDataset("attack needs a nonempty dataset")
    if cfg.target is not None and sdf(room, cfg.target) >= 0:
        raise TargetOutsideRoom(f"target {cfg.target} is outside the room")
    rng = np.random.default_rng(cfg.seed)
    basis = build_basis(drone.period_samples / drone.sample_rate, cfg.f_min, cfg.f_max, drone.sample_rate)
    start = room.centroid if cfg.source_location is None else np.asarray(cfg.source_location, float)
    spec = PerturbationSpec(np.zeros(len(basis)), start, basis)

    sign = 1.0 if cfg.target is None else -1.0
    objective, best_hist, losses, seconds, peaks, locs = [], [], [], [], [], []
    best, best_spec, stopped = -np.inf, spec.copy(), False
    best_loss, stall = -np.inf, 0
    for _ in range(cfg.max_iters):
        t0 = time.perf_counter()
        if track_memory:
            tracemalloc.start()
        res = problem.objective(spec, cfg, rng)
        if track_memory:
            peaks.append(tracemalloc.get_traced_memory()[1])
            tracemalloc.stop()
        objective.append(res.value)
        losses.append(res.localization_loss)
        locs.append(tuple(float(v) for v in spec.source_location))
        if res.value > best:
            best, best_spec = res.value, spec.copy()
        best_hist.append(best)
        # patience counts iterations where the (signed) localization loss does not improve
        if sign * res.localization_loss > best_loss:
            best_loss, stall = sign * res.localization_loss, 0
        else:
            stall += 1
        if stall >= cfg.early_stop_patience:
            seconds.append(time.perf_counter() - t0)
            stopped = True
            break

        g = res.grad_alpha
        norm = np.linalg.norm(g)
        alpha = spec.amplitudes + (cfg.step_size * g / norm if norm > 0 else 0.0)
        if cfg.project:
            alpha = project_amplitudes(alpha, basis, cfg.beta, cfg.gamma)
        loc = spec.source_location
        if cfg.optimize_location:
            gl = res.grad_location
            gn = np.linalg.norm(gl)
            if gn > 0:
                loc = loc + cfg.location_step * gl / gn
            loc = project_location(room, loc)
        spec = PerturbationSpec(alpha, loc, basis)
        seconds.append(time.perf_counter() - t0)

    eval_rng = np.random.default_rng(cfg.seed + 1)
    clean_pred = problem.predict(None, cfg.noise_std, eval_rng)
    adv_pred = problem.predict(best_spec, cfg.noise_std, eval_rng)
    rms_target = clean_target = None
    if cfg.target is not None:
        tgt = np.broadcast_to(normalize_locations(cfg.target, room.bounds), adv_pred.shape)
        rms_target, clean_target = scaled_rms(adv_pred, tgt), scaled_rms(clean_pred, tgt)
    _, residuals = constraint_loss(best_spec, room, cfg)
    return AttackReport(objective, best_hist, losses, best_spec, scaled_rms(clean_pred, problem.truth),
                        scaled_rms(adv_pred, problem.truth), rms_target, clean_target, residuals, stopped,
                        seconds, peaks, locs)


def targeted_attack(model, room, drone, dataset, cfg: AttackConfig | None, target) -> AttackReport:
    """Pull predictions toward ``target`` (world coordinates) instead of away from the truth."""
    cfg = replace(cfg or AttackConfig(), target=tuple(float(v) for v in target))
    return pgd_attack(model, room, drone, dataset, cfg)


def adversarial_objective(model, room, drone, states, spec, cfg, clean=None, rng=None) -> ObjectiveResult:
    """Objective and gradients for a batch of drone states."""
    return AttackProblem(model, room, drone, states, clean).objective(spec, cfg, rng)
