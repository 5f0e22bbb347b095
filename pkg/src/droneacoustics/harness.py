"""Experiment orchestration: grid datasets, campaigns, noise sweeps and resource logs."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .acoustics import Room, sdf
from .drone import DroneConfig, DroneState, SceneTransfer, world_positions
from .errors import EmptyGrid
from .localizer import Dataset

THREADS_ENV = "DRONEACOUSTICS_THREADS"


def default_room() -> Room:
    """Irregular convex pentagon, roughly 4.6 m x 3.6 m."""
    verts = [(0.0, 0.0), (4.0, 0.0), (4.6, 2.2), (2.8, 3.6), (0.0, 3.0)]
    return Room(np.array(verts), [0.7, 0.6, 0.75, 0.65, 0.7], max_reflection_order=3)


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map, threaded when the thread-count variable asks for it."""
    n = num_threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as ex:
        return list(ex.map(fn, items))


@dataclass(frozen=True)
class GridSpec:
    resolution: float = 0.25
    orientations: int = 8
    margin: float = 0.3

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("grid resolution must be positive")
        if self.orientations < 1:
            raise ValueError("need at least one orientation")


def grid_cells(room: Room, config: DroneConfig, grid: GridSpec) -> np.ndarray:
    """Cell centers at least ``margin`` inside the room with the whole drone inside for every heading."""
    xmin, ymin, xmax, ymax = room.bounds
    xs = np.arange(xmin + grid.resolution / 2, xmax, grid.resolution)
    ys = np.arange(ymin + grid.resolution / 2, ymax, grid.resolution)
    cells = np.array([(x, y) for y in ys for x in xs]).reshape(-1, 2)
    keep = sdf(room, cells) <= -grid.margin
    for i, c in enumerate(cells):
        if keep[i]:
            keep[i] = all(_footprint_inside(room, config, DroneState(tuple(c), h)) for h in headings(grid))
    return cells[keep]


def headings(grid: GridSpec) -> np.ndarray:
    return 2 * np.pi * np.arange(grid.orientations) / grid.orientations


def _footprint_inside(room, config, state):
    rotors, mics = world_positions(config, state)
    return bool(np.all(sdf(room, np.vstack([rotors, mics])) < 0))


def grid_states(room: Room, config: DroneConfig, grid: GridSpec) -> list[DroneState]:
    cells = grid_cells(room, config, grid)
    if len(cells) == 0:
        raise EmptyGrid("no grid cell keeps the drone inside the room")
    return [DroneState((float(x), float(y)), float(h)) for x, y in cells for h in headings(grid)]


def generate_dataset(room: Room, config: DroneConfig, grid: GridSpec | None = None, seed: int = 0) -> Dataset:
    """Scene responses for every interior cell and heading.

    The enumeration is deterministic; ``seed`` is accepted for interface
    symmetry and is unused because the noiseless simulation has no randomness.
    """
    grid = grid or GridSpec()
    states = grid_states(room, config, grid)
    inputs = parallel_map(lambda s: SceneTransfer.build(room, config, s).response(), states)
    return Dataset(
        np.stack(inputs),
        np.array([s.center for s in states]),
        np.array([s.heading for s in states]),
        room.bounds,
    )


def dataset_states(dataset: Dataset) -> list[DroneState]:
    return [DroneState((float(x), float(y)), float(h)) for (x, y), h in zip(dataset.locations, dataset.headings)]


# ---------------------------------------------------------------- evaluation

CONDITIONS = ("clean", "attacked", "recovered")
HEATMAP_HEADER = ["x", "y", "clean_rms", "attacked_rms", "recovered_rms", "orientations"]
SUMMARY_HEADER = ["beta", "gamma", "iterations", "clean_mean", "clean_std", "attacked_mean",
                  "attacked_std", "recovered_mean", "recovered_std"]
NOISE_HEADER = ["row", "beta", "gamma", "noise_fraction", "noise_std", "rms_mean", "rms_std"]
RESOURCE_HEADER = ["mode", "batch_size", "iteration", "seconds", "peak_bytes"]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    """Parse a harness CSV back into dicts, converting numeric fields."""
    def conv(s):
        for kind in (int, float):
            try:
                return kind(s)
            except ValueError:
                pass
        return s

    with open(path, newline="") as fh:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def cell_rms(predictions, truth, locations):
    """Per-cell scaled RMS over orientations.

    Returns ``(cells, rms, counts)`` with cells in first-appearance order.
    """
    err = np.sum((np.asarray(predictions) - np.asarray(truth)) ** 2, axis=1)
    keys, first, inverse, counts = np.unique(np.round(locations, 9), axis=0, return_index=True,
                                             return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.bincount(inverse, weights=err, minlength=len(keys))
    order = np.argsort(first)
    return np.asarray(locations)[first[order]], np.sqrt(sums / counts)[order], counts[order]


@dataclass
class HeatmapReport:
    """Per-cell scaled RMS for the clean, attacked and recovered conditions."""

    cells: np.ndarray
    rms: dict[str, np.ndarray]
    counts: np.ndarray
    beta: float = float("nan")
    gamma: float = float("nan")
    iterations: int = 0

    def summary(self) -> dict[str, tuple[float, float]]:
        return {c: (float(np.mean(v)), float(np.std(v))) for c, v in self.rms.items()}

    def mean(self, condition: str) -> float:
        return float(np.mean(self.rms[condition]))

    def rows(self):
        for i, (x, y) in enumerate(self.cells):
            yield [float(x), float(y)] + [float(self.rms[c][i]) if c in self.rms else float("nan")
                                         for c in CONDITIONS] + [int(self.counts[i])]

    def to_csv(self, path):
        write_csv(path, HEATMAP_HEADER, self.rows())

    def summary_row(self):
        s = self.summary()
        row = [self.beta, self.gamma, self.iterations]
        for c in CONDITIONS:
            row += list(s.get(c, (float("nan"), float("nan"))))
        return row

    @classmethod
    def from_csv(cls, path) -> "HeatmapReport":
        rows = read_csv(path)
        cells = np.array([[r["x"], r["y"]] for r in rows])
        rms = {c: np.array([r[f"{c}_rms"] for r in rows]) for c in CONDITIONS}
        return cls(cells, rms, np.array([r["orientations"] for r in rows]))


def recover_batch(problem, sigma, noise_std=0.0, repeats=1, seed=0):
    """Delineate and subtract the perturbation for every state; returns recovered predictions."""
    from .defense import delineate

    model, room, drone = problem.model, problem.room, problem.drone

    def one(i):
        rng = np.random.default_rng([seed, i])
        res = delineate(room, drone, problem.states[i], sigma=sigma[i], noise_std=noise_std,
                        repeats=repeats, rng=rng)
        return res.array

    rec = np.stack(parallel_map(one, range(len(problem))))
    from .localizer import forward

    return forward(model, problem.clean + sigma - rec)


def evaluate(problem, spec=None, recover=True, noise_std=0.0, repeats=1, seed=0,
             beta=float("nan"), gamma=float("nan"), iterations=0) -> HeatmapReport:
    """Clean, attacked and (optionally) delineation-recovered predictions aggregated per cell."""
    from .localizer import forward

    locations = np.array([s.center for s in problem.states])
    preds = {"clean": forward(problem.model, problem.clean)}
    if spec is not None:
        sigma = problem.perturbation_at_mics(spec)
        preds["attacked"] = forward(problem.model, problem.clean + sigma)
        if recover:
            preds["recovered"] = recover_batch(problem, sigma, noise_std, repeats, seed)
    rms = {}
    for c, p in preds.items():
        cells, rms[c], counts = cell_rms(p, problem.truth, locations)
    return HeatmapReport(cells, rms, counts, beta, gamma, iterations)


# ---------------------------------------------------------------- campaigns

@dataclass
class ExperimentConfig:
    bounds: list[tuple[float, float]] = field(default_factory=lambda: [(0.01, 0.1), (1.0, 2.0)])
    attack: object = None
    output_dir: Path = Path("runs")
    seed: int = 0
    defense_noise_std: float = 0.0
    defense_repeats: int = 1

    def __post_init__(self):
        if any(b < 0 or g < 0 for b, g in self.bounds):
            raise ValueError("bound pairs must be nonnegative")
        self.output_dir = Path(self.output_dir)


def _tag(beta, gamma):
    return f"b{beta:g}_g{gamma:g}"


def run_campaign(problem, exp: ExperimentConfig) -> list[HeatmapReport]:
    """Attack, evaluate and recover for every (beta, gamma) pair, flushing CSVs after each pair."""
    from .attack import AttackConfig, pgd_attack

    out = exp.output_dir
    out.mkdir(parents=True, exist_ok=True)
    base = exp.attack or AttackConfig()
    reports, summary = [], []
    for beta, gamma in exp.bounds:
        cfg = replace(base, beta=beta, gamma=gamma, seed=exp.seed)
        rep = pgd_attack(problem.model, problem.room, problem.drone, problem, cfg)
        tag = _tag(beta, gamma)
        rep.to_csv(out / f"attack_{tag}.csv")
        rep.spec.save(out / f"spec_{tag}.npz")
        heat = evaluate(problem, rep.spec, True, exp.defense_noise_std, exp.defense_repeats, exp.seed,
                        beta, gamma, rep.iterations)
        heat.to_csv(out / f"heatmap_{tag}.csv")
        reports.append(heat)
        summary.append(heat.summary_row())
        write_csv(out / "summary.csv", SUMMARY_HEADER, summary)
    return reports


def noise_sweep(problem, exp: ExperimentConfig, fractions=(0.0, 0.025, 0.05, 0.1)) -> list[list]:
    """Attacked scaled RMS versus sensor-noise std (given as fractions of the clean signal std).

    The first block is the clean model under noise; then one block per bound pair.
    """
    from .attack import AttackConfig, pgd_attack
    from .localizer import forward

    if any(f < 0 for f in fractions):
        raise ValueError("noise levels must be nonnegative")
    s = float(np.std(problem.clean))
    locations = np.array([st.center for st in problem.states])
    base = exp.attack or AttackConfig()
    rows = []
    for f in fractions:
        sigma = f * s
        rng = np.random.default_rng(exp.seed + 1)
        x = problem.clean + (rng.normal(0.0, sigma, problem.clean.shape) if sigma > 0 else 0.0)
        _, r, _ = cell_rms(forward(problem.model, x), problem.truth, locations)
        rows.append(["clean", float("nan"), float("nan"), f, sigma, float(np.mean(r)), float(np.std(r))])
    for beta, gamma in exp.bounds:
        for f in fractions:
            sigma = f * s
            cfg = replace(base, beta=beta, gamma=gamma, noise_std=sigma, seed=exp.seed)
            rep = pgd_attack(problem.model, problem.room, problem.drone, problem, cfg)
            pert = problem.perturbation_at_mics(rep.spec)
            rng = np.random.default_rng(exp.seed + 1)
            x = problem.clean + pert + (rng.normal(0.0, sigma, pert.shape) if sigma > 0 else 0.0)
            _, r, _ = cell_rms(forward(problem.model, x), problem.truth, locations)
            rows.append(["attacked", beta, gamma, f, sigma, float(np.mean(r)), float(np.std(r))])
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    write_csv(exp.output_dir / "noise_sweep.csv", NOISE_HEADER, rows)
    return rows


def resource_log(problem, attack_cfg=None, batch_sizes=(1, 2, 3), iterations=3, path=None) -> list[list]:
    """Wall time and peak traced memory per PGD iteration, fixed vs. optimized source location.

    Each batch size ``b`` attacks the first ``b`` dataset samples.
    """
    from .attack import AttackConfig, AttackProblem, pgd_attack

    base = attack_cfg or AttackConfig()
    rows = []
    for mode, opt in (("fixed", False), ("optimized", True)):
        for b in batch_sizes:
            sub = AttackProblem(problem.model, problem.room, problem.drone, problem.states[:b], problem.clean[:b])
            cfg = replace(base, optimize_location=opt, max_iters=iterations, early_stop_patience=iterations + 1)
            rep = pgd_attack(problem.model, problem.room, problem.drone, sub, cfg, track_memory=True)
            for i, (sec, mem) in enumerate(zip(rep.iteration_seconds, rep.peak_bytes)):
                rows.append([mode, b, i, sec, mem])
    if path is not None:
        write_csv(path, RESOURCE_HEADER, rows)
    return rows


def time_ratio(rows) -> float:
    """Mean optimized-location iteration time over mean fixed-location iteration time."""
    t = {m: np.mean([r[3] for r in rows if r[0] == m]) for m in ("fixed", "optimized")}
    return float(t["optimized"] / t["fixed"])
