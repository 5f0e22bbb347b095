"""Room geometry, image-source room impulse responses and propagation.

Rooms are simple 2D polygons.  Reflections are modelled with the image
source method; every image contributes a Hann-windowed sinc pulse at its
fractional arrival delay, scaled by ``gain / max(d, D_FLOOR)``.  The smooth
kernel makes the taps differentiable in the source position, which is what
:func:`rir_position_jacobian` exposes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegeneratePosition,
    LengthTooShort,
    SampleRateMismatch,
    SourceOutsideRoom,
)

DEFAULT_SAMPLE_RATE = 16000
SPEED_OF_SOUND = 343.0
D_FLOOR = 0.05
KERNEL_HALF_WIDTH = 32

_SEG_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Waveform:
    """Uniformly sampled real signal.

    ``period_samples`` marks a signal as periodic; the length must then be a
    whole number of periods.
    """

    samples: np.ndarray
    sample_rate: float = DEFAULT_SAMPLE_RATE
    period_samples: int | None = None

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)
        if self.period_samples is not None:
            p = int(self.period_samples)
            if p <= 0 or len(s) == 0 or len(s) % p:
                raise ValueError(
                    f"length {len(s)} is not a positive multiple of period {p}"
                )
            object.__setattr__(self, "period_samples", p)

    def __len__(self):
        return len(self.samples)

    def one_period(self) -> np.ndarray:
        if self.period_samples is None:
            raise ValueError("waveform is not periodic")
        return self.samples[: self.period_samples]


@dataclass(frozen=True, eq=False)
class Room:
    """Simple polygon with per-wall reflection coefficients.

    Wall ``i`` runs from ``vertices[i]`` to ``vertices[i + 1]``.  Vertices
    must be ordered counterclockwise so outward normals point to the right
    of each wall.
    """

    vertices: np.ndarray
    wall_reflection: np.ndarray
    speed_of_sound: float = SPEED_OF_SOUND
    max_reflection_order: int = 3

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("room needs at least 3 two-dimensional vertices")
        refl = np.broadcast_to(
            np.asarray(self.wall_reflection, dtype=float), (len(v),)
        ).copy()
        if np.any(refl < 0) or np.any(refl > 1):
            raise ValueError("wall_reflection values must lie in [0, 1]")
        if not self.speed_of_sound > 0:
            raise ValueError("speed_of_sound must be positive")
        if int(self.max_reflection_order) < 0:
            raise ValueError("max_reflection_order must be nonnegative")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "wall_reflection", refl)
        object.__setattr__(self, "max_reflection_order", int(self.max_reflection_order))

        if _signed_area(v) <= 0:
            raise ValueError("room vertices must be ordered counterclockwise")
        if not _is_simple(v):
            raise ValueError("room polygon is self-intersecting")

        starts = v
        ends = np.roll(v, -1, axis=0)
        edge = ends - starts
        lengths = np.linalg.norm(edge, axis=1)
        if np.any(lengths == 0):
            raise ValueError("room has repeated vertices")
        normals = np.stack([edge[:, 1], -edge[:, 0]], axis=1) / lengths[:, None]
        turn = _cross(edge, np.roll(edge, -1, axis=0))
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "ends", ends)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "is_convex", bool(np.all(turn > 0)))

    @classmethod
    def rectangle(cls, width, height, reflection=0.7, origin=(0.0, 0.0), **kw):
        x0, y0 = origin
        verts = [(x0, y0), (x0 + width, y0), (x0 + width, y0 + height), (x0, y0 + height)]
        return cls(np.array(verts), reflection, **kw)

    @property
    def num_walls(self) -> int:
        return len(self.vertices)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        area = cross.sum() / 2
        return ((v + w) * cross[:, None]).sum(axis=0) / (6 * area)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _signed_area(v):
    w = np.roll(v, -1, axis=0)
    return 0.5 * float(np.sum(v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]))


def _segments_cross(p1, p2, q1, q2):
    d1 = p2 - p1
    d2 = q2 - q1
    den = _cross(d1, d2)
    if den == 0:
        return False
    s = _cross(q1 - p1, d2) / den
    u = _cross(q1 - p1, d1) / den
    return 0 <= s <= 1 and 0 <= u <= 1


def _is_simple(v):
    n = len(v)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                return False
    return True


def sdf(room: Room, p) -> np.ndarray | float:
    """Signed distance to the room boundary: negative inside, positive outside.

    Accepts a single point or an array of points with trailing dimension 2.
    """
    p = np.asarray(p, dtype=float)
    pts = p.reshape(-1, 2)
    a, b = room.starts, room.ends
    ab = b - a
    ap = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("nvk,vk->nv", ap, ab) / np.einsum("vk,vk->v", ab, ab), 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    dist = np.linalg.norm(pts[:, None, :] - closest, axis=2).min(axis=1)

    # winding number
    is_left = ab[None, :, 0] * ap[..., 1] - ab[None, :, 1] * ap[..., 0]
    py = pts[:, 1:2]
    up = (a[None, :, 1] <= py) & (b[None, :, 1] > py) & (is_left > 0)
    down = (b[None, :, 1] <= py) & (a[None, :, 1] > py) & (is_left < 0)
    winding = up.sum(axis=1) - down.sum(axis=1)

    out = np.where(winding != 0, -dist, dist)
    out = np.where(dist == 0, 0.0, out)
    if p.ndim == 1:
        return float(out[0])
    return out.reshape(p.shape[:-1])


@dataclass(frozen=True, eq=False)
class ImageSource:
    """A mirrored copy of a source.

    ``chain`` holds the intermediate images, from the real source to this
    one; ``linear`` is the orthogonal part of the affine map from the real
    source position to ``position``.
    """

    position: np.ndarray
    gain: float
    walls: tuple[int, ...]
    chain: np.ndarray
    linear: np.ndarray

    @property
    def order(self) -> int:
        return len(self.walls)


def image_sources(room: Room, src, order: int | None = None) -> list[ImageSource]:
    """All image sources up to ``order`` reflections.

    Images are produced by reflecting a parent across a wall it lies in front
    of; a wall is never used twice in a row.  Results are ordered by
    reflection order, then by generation sequence.
    """
    if order is None:
        order = room.max_reflection_order
    if order < 0 or order > room.max_reflection_order:
        raise ValueError(
            f"order {order} outside [0, {room.max_reflection_order}]"
        )
    src = np.asarray(src, dtype=float)
    if sdf(room, src) >= 0:
        raise SourceOutsideRoom(f"source {src.tolist()} is not strictly inside the room")

    root = ImageSource(src.copy(), 1.0, (), src[None].copy(), np.eye(2))
    out = [root]
    frontier = [root]
    for _ in range(order):
        nxt = []
        for img in frontier:
            for w in range(room.num_walls):
                if img.walls and img.walls[-1] == w:
                    continue
                n = room.normals[w]
                side = float(n @ (img.position - room.starts[w]))
                if side >= 0:
                    continue
                pos = img.position - 2 * side * n
                mirror = np.eye(2) - 2 * np.outer(n, n)
                nxt.append(
                    ImageSource(
                        pos,
                        img.gain * float(room.wall_reflection[w]),
                        img.walls + (w,),
                        np.vstack([img.chain, pos]),
                        mirror @ img.linear,
                    )
                )
        out.extend(nxt)
        frontier = nxt
    return out


def _segment_params(p, q, a, b):
    """Parameters (s, u) with p + s (q - p) == a + u (b - a), vectorised over p."""
    d = q - p
    e = b - a
    den = d[:, 0] * e[1] - d[:, 1] * e[0]
    ap = a - p
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (ap[:, 0] * e[1] - ap[:, 1] * e[0]) / den
        u = (ap[:, 0] * d[:, 1] - ap[:, 1] * d[:, 0]) / den
    bad = den == 0
    s[bad] = np.nan
    u[bad] = np.nan
    return s, u


def _blocked(room, p, q, exclude):
    hit = np.zeros(len(p), dtype=bool)
    if room.is_convex:
        return hit
    for w in range(room.num_walls):
        if w in exclude:
            continue
        s, u = _segment_params(p, q, room.starts[w], room.ends[w])
        hit |= (s > _SEG_EPS) & (s < 1 - _SEG_EPS) & (u >= 0) & (u <= 1)
    return hit


def visible(room: Room, image: ImageSource, receivers) -> np.ndarray:
    """Which receivers see ``image`` through a geometrically valid path."""
    r = np.array(receivers, dtype=float).reshape(-1, 2)
    ok = np.ones(len(r), dtype=bool)
    prev = None
    for i in range(image.order, 0, -1):
        w = image.walls[i - 1]
        target = image.chain[i]
        s, u = _segment_params(r, np.broadcast_to(target, r.shape), room.starts[w], room.ends[w])
        ok &= (s > _SEG_EPS) & (s < 1 - _SEG_EPS) & (u >= -_SEG_EPS) & (u <= 1 + _SEG_EPS)
        s = np.where(ok, s, 0.0)
        p = r + s[:, None] * (target - r)
        ok &= ~_blocked(room, r, p, exclude=(w, prev))
        r = p
        prev = w
    ok &= ~_blocked(room, r, np.broadcast_to(image.chain[0], r.shape), exclude=(prev,))
    return ok


def _kernel(x):
    w = np.where(np.abs(x) < KERNEL_HALF_WIDTH, 0.5 * (1 + np.cos(np.pi * x / KERNEL_HALF_WIDTH)), 0.0)
    return np.sinc(x) * w


def _kernel_deriv(x):
    hw = KERNEL_HALF_WIDTH
    inside = np.abs(x) < hw
    w = np.where(inside, 0.5 * (1 + np.cos(np.pi * x / hw)), 0.0)
    dw = np.where(inside, -0.5 * (np.pi / hw) * np.sin(np.pi * x / hw), 0.0)
    small = np.abs(x) < 1e-6
    xs = np.where(small, 1.0, x)
    dsinc = np.where(small, -(np.pi**2) * x / 3, (np.cos(np.pi * x) - np.sinc(x)) / xs)
    return dsinc * w + np.sinc(x) * dw


@dataclass(frozen=True, eq=False)
class Rir:
    """Room impulse response.  ``taps[i]`` is the response at sample ``offset + i``.

    ``offset`` is nonpositive when the fractional-delay kernel of a very
    short path reaches before time zero.
    """

    taps: np.ndarray
    sample_rate: float
    source: np.ndarray
    mic: np.ndarray
    offset: int = 0

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float)
        if taps.ndim != 1 or len(taps) < 1:
            raise ValueError("rir needs at least one tap")
        if not np.all(np.isfinite(taps)):
            raise ValueError("rir taps must be finite")
        object.__setattr__(self, "taps", taps)

    def folded(self, period: int) -> np.ndarray:
        return fold_taps(self.taps, self.offset, period)


def fold_taps(taps, offset: int, period: int) -> np.ndarray:
    """Wrap taps modulo ``period``; the last axis is time."""
    taps = np.asarray(taps, dtype=float)
    lead = taps.shape[:-1]
    flat = taps.reshape(-1, taps.shape[-1])
    out = np.zeros((flat.shape[0], period))
    idx = (offset + np.arange(flat.shape[1])) % period
    for start in range(0, flat.shape[1], period):
        chunk = idx[start:start + period]
        out[:, chunk] += flat[:, start:start + period]
    return out.reshape(lead + (period,))


def _contributions(room, src, mics, sample_rate, order, images=None):
    """Per-image pulse parameters for every receiver that sees the image."""
    if images is None:
        images = image_sources(room, src, order)
    c = room.speed_of_sound
    parts = []
    for img in images:
        if img.gain == 0:
            continue
        vis = visible(room, img, mics)
        if not vis.any():
            continue
        rows = np.nonzero(vis)[0]
        diff = img.position - mics[rows]
        d = np.linalg.norm(diff, axis=1)
        parts.append((img, rows, diff, d, d * sample_rate / c))
    return parts


def rir_batch(room, src, mics, sample_rate=DEFAULT_SAMPLE_RATE, length=None,
              offset=None, order=None, jacobian=False, images=None):
    """RIR taps from one source to many receivers.

    Returns ``(taps, offset)`` with ``taps`` shaped ``(n_mics, length)``, or
    ``(taps, jac, offset)`` with ``jac`` shaped ``(n_mics, length, 2)`` when
    ``jacobian`` is set.  Default ``offset``/``length`` cover every retained
    pulse.
    """
    mics = np.array(mics, dtype=float).reshape(-1, 2)
    if np.any(sdf(room, mics) >= 0):
        raise SourceOutsideRoom("microphone is not strictly inside the room")
    hw = KERNEL_HALF_WIDTH
    parts = _contributions(room, src, mics, sample_rate, order, images)
    k = np.arange(-hw + 1, hw + 1)
    if parts:
        lo = min(int(np.floor(p[4].min())) for p in parts) - hw + 1
        hi = max(int(np.floor(p[4].max())) for p in parts) + hw
    else:
        lo, hi = 0, 0
    if offset is None:
        offset = min(0, lo)
    if length is None:
        length = max(1, hi - offset + 1)
    if parts and (lo < offset or hi >= offset + length):
        raise LengthTooShort(
            f"pulses span samples [{lo}, {hi}] but rir covers [{offset}, {offset + length - 1}]"
        )

    taps = np.zeros((len(mics), length))
    jac = np.zeros((len(mics), length, 2)) if jacobian else None
    fs_c = sample_rate / room.speed_of_sound
    for img, rows, diff, d, delay in parts:
        base = np.floor(delay).astype(int)
        idx = base[:, None] + k[None, :]
        x = idx - delay[:, None]
        h = _kernel(x)
        amp = img.gain / np.maximum(d, D_FLOOR)
        rel = idx - offset
        # (row, tap) pairs are unique within one image, so plain fancy-index accumulation is safe
        taps[rows[:, None], rel] += amp[:, None] * h
        if jacobian:
            # d(distance)/d(src) through the mirror map: A^T (img - mic) / d
            dd = (diff / d[:, None]) @ img.linear
            damp = np.where(d > D_FLOOR, -img.gain / d**2, 0.0)[:, None] * dd
            dtau = fs_c * dd
            hp = _kernel_deriv(x)
            contrib = damp[:, None, :] * h[:, :, None] - amp[:, None, None] * hp[:, :, None] * dtau[:, None, :]
            jac[rows[:, None], rel] += contrib
    if jacobian:
        return taps, jac, offset
    return taps, offset


def compute_rir(room: Room, src, mic, sample_rate=DEFAULT_SAMPLE_RATE,
                length: int | None = None, offset: int | None = None,
                order: int | None = None) -> Rir:
    """Image-source RIR between ``src`` and ``mic``."""
    taps, off = rir_batch(room, src, mic, sample_rate, length, offset, order)
    return Rir(taps[0], sample_rate, np.asarray(src, float), np.asarray(mic, float), off)


def rir_position_jacobian(room: Room, src, mic, sample_rate=DEFAULT_SAMPLE_RATE,
                          length: int | None = None, offset: int | None = None,
                          order: int | None = None, strict: bool = True) -> np.ndarray:
    """Gradient of every RIR tap with respect to the source position.

    Shape ``(length, 2)``, aligned with ``compute_rir`` called with the same
    arguments.  Image visibility is treated as locally constant.
    """
    src = np.asarray(src, dtype=float)
    mic = np.asarray(mic, dtype=float)
    if strict and np.linalg.norm(src - mic) < D_FLOOR:
        raise DegeneratePosition("source within d_floor of microphone")
    _, jac, _ = rir_batch(room, src, mic, sample_rate, length, offset, order, jacobian=True)
    return jac[0]


def path_delays(room: Room, src, mic, sample_rate=DEFAULT_SAMPLE_RATE, order=None):
    """Arrival delays (samples) of every visible image and their source gradients."""
    src = np.asarray(src, dtype=float)
    mic = np.asarray(mic, dtype=float).reshape(1, 2)
    parts = _contributions(room, src, mic, sample_rate, order)
    fs_c = sample_rate / room.speed_of_sound
    delays = np.array([p[4][0] for p in parts])
    grads = np.array([fs_c * (p[2][0] / p[3][0]) @ p[0].linear for p in parts]).reshape(-1, 2)
    return delays, grads


def propagate(s: Waveform, rir: Rir, steady_state: bool = False) -> Waveform:
    """Convolve a source signal with an RIR.

    Linear mode returns the full convolution; output sample ``i`` is time
    ``i + rir.offset``.  Steady-state mode needs a periodic input and returns
    one period of the circular response.
    """
    if s.sample_rate != rir.sample_rate:
        raise SampleRateMismatch(f"{s.sample_rate} Hz signal vs {rir.sample_rate} Hz rir")
    if steady_state:
        if s.period_samples is None:
            raise ValueError("steady-state propagation needs a periodic input")
        p = s.period_samples
        out = circular_convolve(s.one_period(), rir.folded(p))
        return Waveform(out, s.sample_rate, p)
    n = len(s) + len(rir.taps) - 1
    nfft = _fast_len(n)
    out = np.fft.irfft(np.fft.rfft(s.samples, nfft) * np.fft.rfft(rir.taps, nfft), nfft)[:n]
    return Waveform(out, s.sample_rate)


def circular_convolve(x, h) -> np.ndarray:
    """Circular convolution along the last axis (broadcasting)."""
    n = np.shape(x)[-1]
    return np.fft.irfft(np.fft.rfft(x, axis=-1) * np.fft.rfft(h, axis=-1), n, axis=-1)


def circular_correlate(y, h) -> np.ndarray:
    """Adjoint of ``circular_convolve(., h)`` applied to ``y``."""
    n = np.shape(y)[-1]
    return np.fft.irfft(np.fft.rfft(y, axis=-1) * np.conj(np.fft.rfft(h, axis=-1)), n, axis=-1)


def _fast_len(n):
    from scipy.fft import next_fast_len

    return next_fast_len(n, real=True)


def sdf_gradient(room: Room, p) -> np.ndarray:
    """Gradient of :func:`sdf` at a single point off the boundary."""
    p = np.asarray(p, dtype=float)
    a, b = room.starts, room.ends
    ab = b - a
    t = np.clip(np.einsum("vk,vk->v", p - a, ab) / np.einsum("vk,vk->v", ab, ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    dist = np.linalg.norm(p - closest, axis=1)
    i = int(np.argmin(dist))
    if dist[i] == 0:
        return room.normals[i].copy()
    direction = (p - closest[i]) / dist[i]
    return -direction if sdf(room, p) < 0 else direction
