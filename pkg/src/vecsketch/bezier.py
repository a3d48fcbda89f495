"""Exact Bézier curve mathematics.

A degree-n curve is defined by n+1 control points P_0..P_n::

    C(t) = sum_i B(i, n, t) * P_i,   B(i, n, t) = C(n, i) t^i (1-t)^(n-i)

All scalar math is done in 64-bit floats. Functions here are pure, and any
randomness comes from a caller-provided seed or numpy Generator.
"""
import json
import math
from typing import Union, Tuple, List, Sequence, Optional, Iterable

import attr
import numpy as np
from scipy.special import comb

__all__ = [
    'MAX_DEGREE', 'SIDECAR_VERSION',
    'ControlPolygon', 'ParamVector', 'DiagonalNoise', 'EncodedStroke',
    'binomial', 'bernstein', 'bernstein_matrix', 'eval_curve', 'eval_many',
    'decasteljau', 'decode_stroke', 'derivative', 'perturb', 'curve_noise_cov',
    'sidecar_dumps', 'sidecar_loads', 'as_rng', 'elevate', 'chord_flatness',
]

MAX_DEGREE = 12
SIDECAR_VERSION = 1
SeedLike = Union[None, int, np.random.Generator]

_BINOMIALS = np.array([
    [comb(n, i, exact=True) if i <= n else 0 for i in range(MAX_DEGREE + 1)]
    for n in range(MAX_DEGREE + 1)
], dtype=np.float64)


def as_rng(seed: SeedLike) -> np.random.Generator:
    """Produce a Generator from a seed, or pass an existing one through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:  # Also rejects NaN.
        raise ValueError(f'Curve parameter t={t} is outside [0, 1]!')
    return t


def _point_array(points: object) -> np.ndarray:
    arr = np.array(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f'Expected a list of 2D points, got shape {arr.shape}!')
    arr.setflags(write=False)
    return arr


def _check_finite(inst: object, at: 'attr.Attribute[np.ndarray]', value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise ValueError(f'{type(inst).__name__}.{at.name} contains non-finite values!')


@attr.frozen(eq=False)
class ControlPolygon:
    """The n+1 control points of a degree-n curve, in canvas units."""
    points: np.ndarray = attr.ib(converter=_point_array, validator=_check_finite)

    def __attrs_post_init__(self) -> None:
        if len(self.points) < 2:
            raise ValueError('A control polygon needs at least two points (degree >= 1)!')

    @property
    def degree(self) -> int:
        """The degree of the curve, one less than the point count."""
        return len(self.points) - 1

    def __repr__(self) -> str:
        return f'ControlPolygon(degree={self.degree}, points={self.points.tolist()!r})'

    def __eq__(self, other: object) -> bool:
        if isinstance(other, ControlPolygon):
            return self.points.shape == other.points.shape and bool(np.all(self.points == other.points))
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self.points.tobytes())

    def flat(self) -> np.ndarray:
        """The embedding vector [x0, y0, x1, y1, ...] of length 2(n+1)."""
        return self.points.reshape(-1).copy()

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> 'ControlPolygon':
        """Rebuild from the embedding vector."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or len(arr) % 2 or len(arr) < 4:
            raise ValueError(f'Flat control points must have an even length >= 4, not {arr.shape}!')
        return cls(arr.reshape(-1, 2))

    @classmethod
    def from_deltas(cls, deltas: object) -> 'ControlPolygon':
        """Decode successive differences, with P_0 pinned at the origin."""
        arr = np.asarray(deltas, dtype=np.float64).reshape(-1, 2)
        return cls(np.vstack([np.zeros((1, 2)), np.cumsum(arr, axis=0)]))

    def deltas(self) -> np.ndarray:
        """The successive differences P_i - P_{i-1}, for i = 1..n."""
        return np.diff(self.points, axis=0)

    def translate(self, offset: object) -> 'ControlPolygon':
        """Move every point by this offset."""
        return ControlPolygon(self.points + np.asarray(offset, dtype=np.float64).reshape(1, 2))

    def transform(self, matrix: object, offset: object=(0.0, 0.0)) -> 'ControlPolygon':
        """Apply the affine map x -> A x + b to every control point."""
        mat = np.asarray(matrix, dtype=np.float64).reshape(2, 2)
        return ControlPolygon(self.points @ mat.T + np.asarray(offset, dtype=np.float64).reshape(1, 2))


def _param_values(values: object) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


@attr.frozen(eq=False)
class ParamVector:
    """Per-point curve parameters: nondecreasing, starting at 0 and ending at 1."""
    values: np.ndarray = attr.ib(converter=_param_values)

    @values.validator
    def _check(self, at: 'attr.Attribute[np.ndarray]', values: np.ndarray) -> None:
        if len(values) < 2:
            raise ValueError('A parameter vector needs at least two values!')
        if not np.all(np.isfinite(values)):
            raise ValueError('Parameter vector contains non-finite values!')
        if values[0] != 0.0 or values[-1] != 1.0:
            raise ValueError(f'Parameters must run from 0 to 1, not {values[0]} to {values[-1]}!')
        if np.any(np.diff(values) < 0.0):
            raise ValueError('Parameters must be nondecreasing!')

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def from_cumulative(cls, values: object) -> 'ParamVector':
        """Build from a cumulative sum which may be off by rounding.

        Values are clipped to [0, 1] and the ends are snapped exactly.
        """
        arr = np.clip(np.array(values, dtype=np.float64).reshape(-1), 0.0, 1.0)
        arr = np.maximum.accumulate(arr)
        arr[0] = 0.0
        arr[-1] = 1.0
        return cls(arr)


def _variance_array(values: object) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = np.stack([arr, arr], axis=1)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f'Expected per-point (var_x, var_y) pairs, got shape {arr.shape}!')
    arr.setflags(write=False)
    return arr


@attr.frozen(eq=False)
class DiagonalNoise:
    """Per-control-point diagonal 2x2 covariances, stored as (var_x, var_y) rows."""
    variances: np.ndarray = attr.ib(converter=_variance_array)

    @variances.validator
    def _check(self, at: 'attr.Attribute[np.ndarray]', values: np.ndarray) -> None:
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise ValueError('Noise variances must be finite and nonnegative!')

    @property
    def degree(self) -> int:
        """The curve degree this noise applies to."""
        return len(self.variances) - 1

    @classmethod
    def isotropic(cls, degree: int, variance: float) -> 'DiagonalNoise':
        """The same sigma^2 I_2 covariance on every control point."""
        return cls(np.full((degree + 1, 2), float(variance)))


@attr.frozen(eq=False)
class EncodedStroke:
    """A curve placed on the canvas: its polygon is relative to the stroke start at offset."""
    poly: ControlPolygon
    offset: np.ndarray = attr.ib(converter=lambda v: np.asarray(v, dtype=np.float64).reshape(2))
    loss: Optional[float] = None

    @property
    def degree(self) -> int:
        """Degree of the underlying curve."""
        return self.poly.degree

    def absolute(self) -> ControlPolygon:
        """The control polygon in sketch coordinates."""
        return self.poly.translate(self.offset)


def binomial(n: int, i: int) -> float:
    """C(n, i), read from the precomputed table when possible."""
    if not 0 <= i <= n:
        raise IndexError(f'Basis index {i} is out of range for degree {n}!')
    if n <= MAX_DEGREE:
        return float(_BINOMIALS[n, i])
    return float(comb(n, i, exact=True))


def bernstein(i: int, n: int, t: float) -> float:
    """The Bernstein basis polynomial B(i, n, t)."""
    if n < 0:
        raise ValueError(f'Degree must be nonnegative, not {n}!')
    if not 0 <= i <= n:
        raise IndexError(f'Basis index {i} is out of range for degree {n}!')
    t = _check_t(t)
    return binomial(n, i) * t ** i * (1.0 - t) ** (n - i)


def bernstein_matrix(n: int, ts: object) -> np.ndarray:
    """The (len(ts), n+1) table of B(i, n, t_k). No range checks are done here."""
    t = np.asarray(ts, dtype=np.float64).reshape(-1, 1)
    i = np.arange(n + 1, dtype=np.float64).reshape(1, -1)
    if n <= MAX_DEGREE:
        coeffs = _BINOMIALS[n, :n + 1]
    else:
        coeffs = comb(n, np.arange(n + 1))
    # numpy gives 0 ** 0 == 1, which is the correct limit at the ends.
    return coeffs * t ** i * (1.0 - t) ** (n - i)


def eval_curve(poly: ControlPolygon, t: float) -> np.ndarray:
    """Evaluate the curve at a single parameter, in Bernstein form."""
    t = _check_t(t)
    return (bernstein_matrix(poly.degree, [t]) @ poly.points)[0]


def eval_many(poly: ControlPolygon, ts: object) -> np.ndarray:
    """Evaluate the curve at many parameters, returning an (N, 2) array."""
    t = np.asarray(ts, dtype=np.float64).reshape(-1)
    if np.any(~((t >= 0.0) & (t <= 1.0))):
        raise ValueError('Curve parameters must lie within [0, 1]!')
    return bernstein_matrix(poly.degree, t) @ poly.points


def decasteljau(poly: ControlPolygon, t: float) -> Tuple[np.ndarray, ControlPolygon, ControlPolygon]:
    """Evaluate and subdivide the curve at t by repeated linear interpolation.

    Returns the point, and the polygons of the [0, t] and [t, 1] pieces.
    """
    t = _check_t(t)
    work = np.array(poly.points, dtype=np.float64)
    left = [work[0].copy()]
    right = [work[-1].copy()]
    for _ in range(poly.degree):
        work = (1.0 - t) * work[:-1] + t * work[1:]
        left.append(work[0].copy())
        right.append(work[-1].copy())
    right.reverse()
    return work[0].copy(), ControlPolygon(left), ControlPolygon(right)


def derivative(poly: ControlPolygon) -> ControlPolygon:
    """The hodograph: C'(t) is the degree n-1 curve with points n (P_{i+1} - P_i).

    For a line this is a constant, returned as a degenerate degree-1 polygon.
    """
    diffs = poly.degree * np.diff(poly.points, axis=0)
    if len(diffs) == 1:
        diffs = np.vstack([diffs, diffs])
    return ControlPolygon(diffs)


def decode_stroke(poly: ControlPolygon, resolution: int) -> np.ndarray:
    """Render the curve as a polyline of uniformly spaced parameters."""
    if resolution < 2:
        raise ValueError(f'Resolution must be at least 2, not {resolution}!')
    pts = bernstein_matrix(poly.degree, np.linspace(0.0, 1.0, resolution)) @ poly.points
    pts[0] = poly.points[0]
    pts[-1] = poly.points[-1]
    return pts


def perturb(poly: ControlPolygon, noise: DiagonalNoise, seed: SeedLike) -> ControlPolygon:
    """Displace each control point by an independent draw from its Gaussian."""
    if noise.degree != poly.degree:
        raise ValueError(
            f'Noise is for degree {noise.degree}, but the polygon has degree {poly.degree}!'
        )
    rng = as_rng(seed)
    draw = rng.standard_normal(poly.points.shape)
    return ControlPolygon(poly.points + draw * np.sqrt(noise.variances))


def curve_noise_cov(noise: DiagonalNoise, n: int, t: float) -> np.ndarray:
    """Covariance of C(t) when the control points carry the given noise.

    The curve is linear in the points, so the diagonal covariances combine
    with squared basis weights: sum_i B(i, n, t)^2 Sigma_i.
    """
    if noise.degree != n:
        raise ValueError(f'Noise is for degree {noise.degree}, not {n}!')
    t = _check_t(t)
    weights = bernstein_matrix(n, [t])[0] ** 2
    return np.diag(weights @ noise.variances)


def sidecar_dumps(strokes: Iterable[EncodedStroke]) -> str:
    """Serialise placed curves into the versioned JSON sidecar."""
    return json.dumps({
        'version': SIDECAR_VERSION,
        'strokes': [
            {
                'degree': stroke.degree,
                'offset': [float(v) for v in stroke.offset],
                'points': stroke.poly.points.tolist(),
            }
            for stroke in strokes
        ],
    }) + '\n'


def sidecar_loads(text: str) -> List[EncodedStroke]:
    """Parse the JSON sidecar produced by sidecar_dumps()."""
    data = json.loads(text)
    if data.get('version') != SIDECAR_VERSION:
        raise ValueError(f'Unknown sidecar version {data.get("version")!r}!')
    strokes = []
    for rec in data['strokes']:
        poly = ControlPolygon(rec['points'])
        if poly.degree != rec['degree']:
            raise ValueError(f'Stroke declares degree {rec["degree"]} but has {len(poly.points)} points!')
        strokes.append(EncodedStroke(poly, rec['offset']))
    return strokes


def chord_flatness(poly: ControlPolygon) -> float:
    """The largest distance of an inner control point from the end-point chord."""
    start, end = poly.points[0], poly.points[-1]
    chord = end - start
    length = math.hypot(chord[0], chord[1])
    inner = poly.points[1:-1] - start
    if len(inner) == 0:
        return 0.0
    if length == 0.0:
        return float(np.max(np.hypot(inner[:, 0], inner[:, 1])))
    cross = np.abs(inner[:, 0] * chord[1] - inner[:, 1] * chord[0])
    return float(np.max(cross) / length)


def elevate(poly: ControlPolygon, degree: int) -> ControlPolygon:
    """Raise the degree of a curve without changing its shape."""
    if degree < poly.degree:
        raise ValueError(f'Cannot elevate a degree {poly.degree} curve to degree {degree}!')
    points = poly.points
    for n in range(poly.degree, degree):
        ratio = np.arange(1, n + 1, dtype=np.float64).reshape(-1, 1) / (n + 1)
        inner = ratio * points[:-1] + (1.0 - ratio) * points[1:]
        points = np.vstack([points[:1], inner, points[-1:]])
    return ControlPolygon(points)
