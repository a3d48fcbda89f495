"""Seeded synthetic data: random Bézier strokes, and a small toy sketch set.

Random strokes are sampled from known curves, so fitters can be checked
against the exact polygon and parameters. The toy set holds two categories
of two-stroke drawings in Quick, Draw! form, for end-to-end runs.
"""
import json
from typing import IO, Any, Dict, List, Sequence, Tuple

import attr
import numpy as np

from vecsketch.bezier import ControlPolygon, SeedLike, as_rng, bernstein_matrix
from vecsketch.sketch import Stroke

__all__ = [
    'SyntheticStroke', 'random_polygon', 'sample_curve', 'random_strokes',
    'TOY_CATEGORIES', 'toy_records', 'write_toy_ndjson',
]

TOY_CATEGORIES = ('wave', 'box')
DENSE_SAMPLES = 512


@attr.frozen(eq=False)
class SyntheticStroke:
    """A stroke sampled from a known curve, at known parameters."""
    stroke: Stroke
    poly: ControlPolygon
    params: np.ndarray


def random_polygon(degree: int, seed: SeedLike) -> ControlPolygon:
    """A random polygon starting at the origin, scaled to a unit bounding box.

    Points follow a random walk with a drift, so curves sweep across the
    box instead of collapsing into a knot.
    """
    if degree < 1:
        raise ValueError(f'Degree must be at least 1, not {degree}!')
    rng = as_rng(seed)
    drift = rng.normal(size=2)
    steps = rng.normal(size=(degree, 2)) + drift
    points = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    side = float(np.max(points.max(axis=0) - points.min(axis=0)))
    if side > 0.0:
        points /= side
    return ControlPolygon(points)


def sample_curve(
    poly: ControlPolygon,
    count: int,
    seed: SeedLike,
    jitter: float=0.3,
) -> np.ndarray:
    """Choose count parameters spread roughly evenly by arc length.

    Targets are uniform in arc length, each moved by up to jitter of a gap,
    then mapped back through the dense arc-length table. Always includes
    0 and 1, and is nondecreasing.
    """
    if count < 2:
        raise ValueError(f'Need at least two samples, not {count}!')
    rng = as_rng(seed)
    dense_t = np.linspace(0.0, 1.0, DENSE_SAMPLES)
    dense = bernstein_matrix(poly.degree, dense_t) @ poly.points
    seg = np.hypot(*np.diff(dense, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] == 0.0:
        return np.linspace(0.0, 1.0, count)
    targets = np.linspace(0.0, 1.0, count)
    gap = 1.0 / (count - 1)
    targets[1:-1] += rng.uniform(-jitter, jitter, count - 2) * gap
    targets = np.sort(np.clip(targets, 0.0, 1.0))
    params = np.interp(targets * arc[-1], arc, dense_t)
    params[0] = 0.0
    params[-1] = 1.0
    return np.maximum.accumulate(params)


def random_strokes(
    count: int,
    degrees: Sequence[int],
    lengths: Tuple[int, int],
    seed: SeedLike,
) -> List[SyntheticStroke]:
    """Generate normalised strokes sampled from random curves.

    Degrees are chosen uniformly from the list, and point counts uniformly
    within the inclusive length range.
    """
    low, high = lengths
    if low < 2 or high < low:
        raise ValueError(f'Invalid length range {lengths}!')
    rng = as_rng(seed)
    result = []
    for _ in range(count):
        degree = int(rng.choice(degrees))
        poly = random_polygon(degree, rng)
        params = sample_curve(poly, int(rng.integers(low, high + 1)), rng)
        points = bernstein_matrix(degree, params) @ poly.points
        points[0] = 0.0  # Exactly P_0.
        result.append(SyntheticStroke(Stroke(points), poly, params))
    return result


def _wave(rng: np.random.Generator) -> List[List[List[int]]]:
    """Two roughly parallel wavy lines."""
    strokes = []
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(1.5, 3.0)
    amp = rng.uniform(15, 30)
    for row in (80, 170):
        count = int(rng.integers(20, 40))
        xs = np.linspace(20, 235, count)
        ys = row + amp * np.sin(freq * 2 * np.pi * (xs - 20) / 215 + phase)
        ys += rng.normal(0, 1.5, count)
        strokes.append([np.rint(xs).astype(int).tolist(), np.rint(ys).astype(int).tolist()])
    return strokes


def _box(rng: np.random.Generator) -> List[List[List[int]]]:
    """A rectangle drawn as two L-shaped strokes."""
    x0, y0 = rng.uniform(20, 70, 2)
    x1, y1 = rng.uniform(180, 235, 2)
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
    strokes = []
    for first in (0, 2):
        pts = []
        for (ax, ay), (bx, by) in zip(corners[first:first + 2], corners[first + 1:first + 3]):
            count = int(rng.integers(6, 14))
            seg = np.linspace(0.0, 1.0, count, endpoint=False)
            pts.extend(zip(ax + (bx - ax) * seg, ay + (by - ay) * seg))
        pts.append(corners[first + 2])
        arr = np.asarray(pts) + rng.normal(0, 1.0, (len(pts), 2))
        arr = np.clip(np.rint(arr), 0, 255).astype(int)
        strokes.append([arr[:, 0].tolist(), arr[:, 1].tolist()])
    return strokes


def toy_records(count: int, seed: SeedLike) -> List[Dict[str, Any]]:
    """Quick, Draw! style records, alternating between the toy categories."""
    rng = as_rng(seed)
    records = []
    for i in range(count):
        category = TOY_CATEGORIES[i % len(TOY_CATEGORIES)]
        drawing = _wave(rng) if category == 'wave' else _box(rng)
        records.append({'word': category, 'key_id': str(i), 'recognized': True, 'drawing': drawing})
    return records


def write_toy_ndjson(file: IO[str], count: int, seed: SeedLike) -> int:
    """Write the toy set as NDJSON. Returns the record count."""
    records = toy_records(count, seed)
    for record in records:
        file.write(json.dumps(record) + '\n')
    return len(records)
