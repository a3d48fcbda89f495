"""Helpers for performing tests."""
from typing import Sequence

import numpy as np
import pytest

from vecsketch.bezier import ControlPolygon
from vecsketch.sketch import RawSketch, PenState, Stroke, StrokeSequence


# Tolerance for values computed in closed form.
EPSILON = 1e-12

# The cubic used for hand-computed examples.
ARCH = ControlPolygon([(0, 0), (0, 1), (1, 1), (1, 0)])


def assert_points(actual, expected, msg='', tol=1e-9) -> None:
    """Asserts that two point arrays match within tol."""
    # Don't show in pytest tracebacks.
    __tracebackhide__ = True

    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        pytest.fail(f'Shape {actual.shape} != {expected.shape}' + (f': {msg}' if msg else ''))
    if np.allclose(actual, expected, rtol=0.0, atol=tol):
        return
    worst = np.unravel_index(np.argmax(np.abs(actual - expected)), actual.shape)
    new_msg = f'{actual.tolist()} != {expected.tolist()}\nAt {worst}'
    if msg:
        new_msg += ': ' + str(msg)
    pytest.fail(new_msg)


def raw_sketch(strokes: Sequence[Sequence[Sequence[float]]], category: str='') -> RawSketch:
    """Build a raw sketch from absolute point lists, one per stroke."""
    points = []
    pen = []
    for stroke in strokes:
        for i, point in enumerate(stroke):
            points.append(point)
            pen.append(PenState.UP if i == len(stroke) - 1 else PenState.DOWN)
    return RawSketch(points, pen, category)


def line_stroke(length: int, end=(1.0, 0.0)) -> Stroke:
    """A normalised straight stroke with evenly spaced points."""
    t = np.linspace(0.0, 1.0, length).reshape(-1, 1)
    return Stroke(t * np.asarray(end, dtype=np.float64).reshape(1, 2))


def curve_stroke(poly: ControlPolygon, length: int) -> Stroke:
    """Sample a normalised stroke from a curve starting at the origin."""
    from vecsketch.bezier import eval_many
    points = eval_many(poly, np.linspace(0.0, 1.0, length))
    points[0] = 0.0
    return Stroke(points)


def sequence(*strokes: Stroke, category: str='') -> StrokeSequence:
    """Wrap strokes in a sequence, recording their point count as the raw length."""
    return StrokeSequence(list(strokes), category, sum(len(s) for s in strokes))
