"""Differentiable location regressor over stacked microphone waveforms.

Architecture: global input scaling, a learned linear temporal subsampling
shared by all channels, then a small dense network.  Gradients are written
out by hand for this fixed operator set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, LengthMismatch, ShapeMismatch

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, h: 1.0 - h * h),
    "softplus": (lambda a: np.logaddexp(0.0, a), lambda a, h: 0.5 * (1.0 + np.tanh(a / 2))),
    "identity": (lambda a: a, lambda a, h: np.ones_like(a)),
}


@dataclass(eq=False)
class Dataset:
    """Stacked microphone inputs ``(N, mics, samples)`` with world locations ``(N, 2)``."""

    inputs: np.ndarray
    locations: np.ndarray
    headings: np.ndarray
    bounds: tuple[float, float, float, float]

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        self.headings = np.asarray(self.headings, dtype=float).reshape(-1)
        if not (len(self.inputs) == len(self.locations) == len(self.headings)):
            raise LengthMismatch("inputs, locations and headings differ in length")
        self.bounds = tuple(float(b) for b in self.bounds)
        if len(self.bounds) != 4 or self.bounds[2] <= self.bounds[0] or self.bounds[3] <= self.bounds[1]:
            raise ValueError("bounds must be (xmin, ymin, xmax, ymax) with positive extent")
        t = self.targets
        if len(t) and (t.min() < 0 or t.max() > 1):
            raise ValueError("locations must lie inside the bounds")

    def __len__(self):
        return len(self.inputs)

    def normalize(self, xy) -> np.ndarray:
        return normalize_locations(xy, self.bounds)

    @property
    def targets(self) -> np.ndarray:
        return self.normalize(self.locations)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.locations[idx], self.headings[idx], self.bounds)

    def save(self, path):
        np.savez(path, inputs=self.inputs.astype("<f8"), locations=self.locations.astype("<f8"),
                 headings=self.headings.astype("<f8"), bounds=np.array(self.bounds, dtype="<f8"))

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            return cls(z["inputs"], z["locations"], z["headings"], tuple(z["bounds"]))


def normalize_locations(xy, bounds) -> np.ndarray:
    xmin, ymin, xmax, ymax = bounds
    xy = np.asarray(xy, dtype=float)
    return (xy - np.array([xmin, ymin])) / np.array([xmax - xmin, ymax - ymin])


def denormalize_locations(uv, bounds) -> np.ndarray:
    xmin, ymin, xmax, ymax = bounds
    return np.asarray(uv, dtype=float) * np.array([xmax - xmin, ymax - ymin]) + np.array([xmin, ymin])


@dataclass(eq=False)
class LocalizerModel:
    num_mics: int
    num_samples: int
    subsample: int | None = 32
    hidden: tuple[int, ...] = (128, 64)
    activation: str = "tanh"
    input_scale: float = 1.0
    params: dict[str, np.ndarray] = field(default_factory=dict)
    input_offset: np.ndarray | None = None

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_offset is not None:
            self.input_offset = np.asarray(self.input_offset, dtype=float)
            if self.input_offset.shape != (self.num_mics, self.num_samples):
                raise ShapeMismatch("input_offset must have shape (mics, samples)")
        if self.params:
            expected = self.param_shapes()
            got = {k: v.shape for k, v in self.params.items()}
            if got != expected:
                raise ShapeMismatch(f"parameter shapes {got} do not match architecture {expected}")

    @property
    def layer_sizes(self) -> list[int]:
        width = self.num_mics * (self.subsample or self.num_samples)
        return [width, *self.hidden, 2]

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        if self.subsample:
            shapes["sub"] = (self.num_samples, self.subsample)
        sizes = self.layer_sizes
        for i in range(self.num_layers):
            shapes[f"W{i}"] = (sizes[i], sizes[i + 1])
            shapes[f"b{i}"] = (sizes[i + 1],)
        return shapes

    @classmethod
    def create(cls, num_mics, num_samples, subsample=32, hidden=(128, 64), activation="tanh",
               input_scale=1.0, seed=0, input_offset=None) -> "LocalizerModel":
        model = cls(num_mics, num_samples, subsample, tuple(hidden), activation, float(input_scale),
                    input_offset=input_offset)
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in model.param_shapes().items():
            if name == "sub":
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            elif name.startswith("W"):
                params[name] = rng.normal(0.0, np.sqrt(2.0 / sum(shape)), shape)
            else:
                params[name] = np.zeros(shape)
        model.params = params
        return model

    @classmethod
    def for_dataset(cls, dataset: "Dataset", subsample=32, hidden=(128, 64), activation="tanh",
                    seed=0) -> "LocalizerModel":
        """Model whose input normalization is fitted to ``dataset``.

        Inputs are centered on the dataset mean waveform and divided by the
        global RMS of the centered data.
        """
        offset = dataset.inputs.mean(axis=0)
        scale = float(np.sqrt(np.mean((dataset.inputs - offset) ** 2)))
        if not scale > 0:
            # a single sample (or identical samples) has no spread; fall back to the raw level
            scale = float(np.sqrt(np.mean(dataset.inputs**2))) or 1.0
        _, m, t = dataset.inputs.shape
        return cls.create(m, t, subsample, hidden, activation, scale, seed, offset)

    def copy(self) -> "LocalizerModel":
        return LocalizerModel(self.num_mics, self.num_samples, self.subsample, self.hidden,
                              self.activation, self.input_scale,
                              {k: v.copy() for k, v in self.params.items()},
                              None if self.input_offset is None else self.input_offset.copy())

    @property
    def input_size(self) -> int:
        return self.num_mics * self.num_samples

    def save(self, path):
        """Write an ``.npz`` checkpoint: a JSON architecture record plus little-endian float64 arrays."""
        meta = dict(num_mics=self.num_mics, num_samples=self.num_samples, subsample=self.subsample,
                    hidden=list(self.hidden), activation=self.activation, input_scale=self.input_scale)
        arrays = {k: v.astype("<f8") for k, v in self.params.items()}
        if self.input_offset is not None:
            arrays["__offset__"] = self.input_offset.astype("<f8")
        np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "LocalizerModel":
        with np.load(Path(path)) as z:
            meta = json.loads(str(z["__meta__"]))
            params = {k: z[k].astype(float) for k in z.files if not k.startswith("__")}
            offset = z["__offset__"].astype(float) if "__offset__" in z.files else None
        return cls(meta["num_mics"], meta["num_samples"], meta["subsample"], tuple(meta["hidden"]),
                   meta["activation"], meta["input_scale"], params, offset)


def _as_batch(model, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    xb = x[None] if single else x
    if xb.ndim != 3 or xb.shape[1:] != (model.num_mics, model.num_samples):
        raise ShapeMismatch(
            f"expected input (..., {model.num_mics}, {model.num_samples}), got {x.shape}"
        )
    return xb, single


def _forward(model, xb):
    act = _ACTIVATIONS[model.activation][0]
    p = model.params
    xn = xb if model.input_offset is None else xb - model.input_offset
    xn = xn / model.input_scale
    if model.subsample:
        z = (xn @ p["sub"]).reshape(len(xb), -1)
    else:
        z = xn.reshape(len(xb), -1)
    hs, pre = [z], []
    h = z
    for i in range(model.num_layers):
        a = h @ p[f"W{i}"] + p[f"b{i}"]
        pre.append(a)
        h = act(a) if i < model.num_layers - 1 else a
        hs.append(h)
    return h, (xn, hs, pre)


def _backward(model, cache, g, want_params=True):
    dact = _ACTIVATIONS[model.activation][1]
    p = model.params
    xn, hs, pre = cache
    grads = {}
    for i in reversed(range(model.num_layers)):
        if i < model.num_layers - 1:
            g = g * dact(pre[i], hs[i + 1])
        if want_params:
            grads[f"W{i}"] = hs[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
        g = g @ p[f"W{i}"].T
    if model.subsample:
        g = g.reshape(len(xn), model.num_mics, model.subsample)
        if want_params:
            grads["sub"] = np.einsum("bmt,bmk->tk", xn, g)
        gx = g @ p["sub"].T
    else:
        gx = g.reshape(xn.shape)
    return grads, gx / model.input_scale


def forward(model: LocalizerModel, x) -> np.ndarray:
    """Normalized 2D location estimate; ``x`` is ``(mics, samples)`` or a batch of them."""
    xb, single = _as_batch(model, x)
    y, _ = _forward(model, xb)
    return y[0] if single else y


def input_gradient(model: LocalizerModel, x, cotangent) -> np.ndarray:
    """Gradient of ``<cotangent, forward(x)>`` with respect to every input sample."""
    xb, single = _as_batch(model, x)
    ct = np.asarray(cotangent, dtype=float)
    ct = np.broadcast_to(ct[None] if single else ct, (len(xb), 2))
    _, cache = _forward(model, xb)
    _, gx = _backward(model, cache, ct, want_params=False)
    return gx[0] if single else gx


def value_and_input_gradient(model, xb, loss_grad_fn):
    """Forward a batch, then pull back ``loss_grad_fn(outputs)`` to the inputs."""
    y, cache = _forward(model, xb)
    g = loss_grad_fn(y)
    _, gx = _backward(model, cache, g, want_params=False)
    return y, gx


def input_jacobian(model: LocalizerModel, x) -> np.ndarray:
    """Full Jacobian ``(2, mics, samples)`` of a single input."""
    return np.stack([input_gradient(model, x, e) for e in np.eye(2)])


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dc_augment: float = 0.0
    noise_augment: float = 0.0
    schedule: str = "constant"

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def mse(model, dataset: Dataset) -> float:
    y = forward(model, dataset.inputs)
    return float(np.mean(np.sum((y - dataset.targets) ** 2, axis=1)))


def train(model: LocalizerModel, dataset: Dataset, cfg: TrainConfig | None = None):
    """Fit with Adam on mean squared error of normalized locations.

    Returns ``(trained_model, losses)`` where ``losses[e]`` is the clean
    (un-augmented) training MSE after epoch ``e``.  The input model is not
    modified.
    """
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    _as_batch(model, dataset.inputs[:1])
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    targets = dataset.targets
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    losses = []
    n = len(dataset)
    total = cfg.epochs * -(-n // cfg.batch_size)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = dataset.inputs[idx]
            if cfg.dc_augment > 0:
                xb = xb + model.input_scale * rng.normal(0.0, cfg.dc_augment, (len(idx), xb.shape[1], 1))
            if cfg.noise_augment > 0:
                xb = xb + model.input_scale * rng.normal(0.0, cfg.noise_augment, xb.shape)
            y, cache = _forward(model, xb)
            grads, _ = _backward(model, cache, 2.0 * (y - targets[idx]) / len(idx))
            step += 1
            lr = cfg.learning_rate
            if cfg.schedule == "cosine":
                lr = lr * 0.5 * (1 + np.cos(np.pi * (step - 1) / total))
            lr_t = lr * np.sqrt(1 - cfg.beta2**step) / (1 - cfg.beta1**step)
            for k, g in grads.items():
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
                model.params[k] = model.params[k] - lr_t * m[k] / (np.sqrt(v[k]) + cfg.eps)
        losses.append(mse(model, dataset))
    return model, np.array(losses)


def scaled_rms(predictions, targets, bounds=None) -> float:
    """Root mean squared Euclidean error after scaling coordinates to [0, 1].

    With ``bounds=None`` the inputs are taken as already normalized.
    """
    p = np.asarray(predictions, dtype=float).reshape(-1, 2)
    t = np.asarray(targets, dtype=float).reshape(-1, 2)
    if len(p) != len(t) or len(p) == 0:
        raise LengthMismatch(f"{len(p)} predictions vs {len(t)} targets")
    if bounds is not None:
        p = normalize_locations(p, bounds)
        t = normalize_locations(t, bounds)
    return float(np.sqrt(np.mean(np.sum((p - t) ** 2, axis=1))))


def dataset_rms(dataset: Dataset) -> float:
    return float(np.sqrt(np.mean(dataset.inputs**2)))
