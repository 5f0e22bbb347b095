"""Waveform export to CSV or WAV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.io import wavfile


def export_waveforms(samples, path, sample_rate: int = 16000):
    """Write ``(channels, samples)`` as CSV (one column per channel) or 32-bit float WAV."""
    arr = np.atleast_2d(np.asarray(samples, dtype=float))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".wav":
        wavfile.write(path, int(sample_rate), arr.T.astype(np.float32))
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample"] + [f"ch{c}" for c in range(len(arr))])
        for t in range(arr.shape[1]):
            w.writerow([t] + [repr(float(v)) for v in arr[:, t]])


def import_waveforms(path) -> tuple[np.ndarray, int | None]:
    """Inverse of ``export_waveforms``; the sample rate is ``None`` for CSV."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        rate, data = wavfile.read(path)
        return np.atleast_2d(np.asarray(data, dtype=float).T), int(rate)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1:].T.copy(), None
