"""Export placed Bézier curves as SVG 1.1 documents.

Curves up to degree 3 map directly onto the ``L``, ``Q`` and ``C`` path
commands. Higher degrees have no SVG equivalent, so they are either split by
de Casteljau subdivision into pieces close to their chord, each written as
a cubic with matching end points and end tangents, or written as a dense
polyline.
"""
import json
import math
import xml.etree.ElementTree as ET
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from vecsketch.bezier import (
    ControlPolygon, EncodedStroke, chord_flatness, decasteljau, decode_stroke,
)

__all__ = ['SVGMode', 'to_svg', 'subdivide_cubics', 'cubic_approximation']

SVG_NS = 'http://www.w3.org/2000/svg'
# Relative to the bounding-box diagonal.
DEFAULT_TOLERANCE = 2.5e-4
MAX_DEPTH = 16
MARGIN = 0.05


class SVGMode(Enum):
    """How curves above degree 3 are written."""
    SUBDIVIDE = 'subdivide'
    POLYLINE = 'polyline'


def _fmt(value: float) -> str:
    """Format a coordinate compactly, keeping 10 significant digits."""
    text = f'{value:.10g}'
    if text == '-0':
        return '0'
    return text


def _pt(point: np.ndarray) -> str:
    return f'{_fmt(point[0])},{_fmt(point[1])}'


def cubic_approximation(poly: ControlPolygon) -> ControlPolygon:
    """The cubic sharing this curve's end points and end derivatives."""
    if poly.degree == 3:
        return poly
    pts = poly.points
    n = poly.degree
    start_tangent = n * (pts[1] - pts[0])
    end_tangent = n * (pts[-1] - pts[-2])
    return ControlPolygon([
        pts[0],
        pts[0] + start_tangent / 3.0,
        pts[-1] - end_tangent / 3.0,
        pts[-1],
    ])


def subdivide_cubics(poly: ControlPolygon, tolerance: float) -> List[ControlPolygon]:
    """Split a curve until every piece is flat to within tolerance, then cubify each."""
    if tolerance <= 0.0:
        raise ValueError(f'Tolerance must be positive, not {tolerance}!')
    if poly.degree <= 3:
        return [poly]
    pieces: List[ControlPolygon] = []
    # Explicit stack, left piece on top so the output stays in curve order.
    todo: List[Tuple[ControlPolygon, int]] = [(poly, 0)]
    while todo:
        piece, depth = todo.pop()
        if depth >= MAX_DEPTH or chord_flatness(piece) <= tolerance:
            pieces.append(cubic_approximation(piece))
            continue
        _, left, right = decasteljau(piece, 0.5)
        todo.append((right, depth + 1))
        todo.append((left, depth + 1))
    return pieces


def _path_data(
    poly: ControlPolygon,
    mode: SVGMode,
    resolution: int,
    tolerance: float,
) -> str:
    """Build the "d" attribute for one absolute curve."""
    pts = poly.points
    parts = [f'M {_pt(pts[0])}']
    if poly.degree == 1:
        parts.append(f'L {_pt(pts[1])}')
    elif poly.degree == 2:
        parts.append(f'Q {_pt(pts[1])} {_pt(pts[2])}')
    elif poly.degree == 3:
        parts.append(f'C {_pt(pts[1])} {_pt(pts[2])} {_pt(pts[3])}')
    elif mode is SVGMode.POLYLINE:
        line = decode_stroke(poly, resolution)
        parts.append('L ' + ' '.join(_pt(p) for p in line[1:]))
    else:
        for cubic in subdivide_cubics(poly, tolerance):
            c = cubic.points
            parts.append(f'C {_pt(c[1])} {_pt(c[2])} {_pt(c[3])}')
    return ' '.join(parts)


def to_svg(
    strokes: Sequence[EncodedStroke],
    resolution: int=64,
    canvas_size: int=256,
    mode: SVGMode=SVGMode.SUBDIVIDE,
    tolerance: Optional[float]=None,
    *,
    show_control: bool=False,
    correspondences: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]]=None,
    metadata: Optional[Dict[str, Any]]=None,
) -> str:
    """Render curves placed at their offsets as an SVG document.

    The view box is fit around the control points in data units, so
    canvas_size only sets the displayed size and different sizes show
    identical geometry. tolerance is the subdivision flatness, as a fraction
    of the bounding-box diagonal.

    If show_control is set, control polygons are drawn as dashed lines with
    dots. correspondences are (observed points, curve points) pairs in sketch
    coordinates, drawn as thin links. metadata is embedded as JSON.
    """
    if not strokes:
        raise ValueError('Cannot render an empty list of strokes!')
    if resolution < 2:
        raise ValueError(f'Resolution must be at least 2, not {resolution}!')
    if canvas_size < 1:
        raise ValueError(f'Canvas size must be positive, not {canvas_size}!')
    mode = SVGMode(mode)

    polys = []
    for stroke in strokes:
        if not np.all(np.isfinite(stroke.offset)):
            raise ValueError(f'Stroke offset {stroke.offset.tolist()} is not finite!')
        polys.append(stroke.absolute())

    every = [poly.points for poly in polys]
    if correspondences:
        for observed, fitted in correspondences:
            every.append(np.asarray(observed, dtype=np.float64).reshape(-1, 2))
            every.append(np.asarray(fitted, dtype=np.float64).reshape(-1, 2))
    allpts = np.vstack(every)
    if not np.all(np.isfinite(allpts)):
        raise ValueError('Non-finite coordinates cannot be rendered!')

    low = allpts.min(axis=0)
    size = allpts.max(axis=0) - low
    side = max(float(size.max()), 1e-9)
    pad = side * MARGIN
    # Keep degenerate boxes (points, straight lines) visible.
    size = np.maximum(size, side * 0.1)
    box = (low[0] - pad, low[1] - pad, size[0] + 2 * pad, size[1] + 2 * pad)
    diag = math.hypot(box[2], box[3])
    flat_tol = (DEFAULT_TOLERANCE if tolerance is None else tolerance) * diag
    width = diag * 0.004

    root = ET.Element('svg', {
        'xmlns': SVG_NS,
        'version': '1.1',
        'width': str(canvas_size),
        'height': str(canvas_size),
        'viewBox': ' '.join(_fmt(v) for v in box),
    })
    if metadata is not None:
        meta = ET.SubElement(root, 'metadata')
        meta.text = json.dumps(metadata, sort_keys=True)

    group = ET.SubElement(root, 'g', {
        'fill': 'none', 'stroke': 'black',
        'stroke-width': _fmt(width),
        'stroke-linecap': 'round', 'stroke-linejoin': 'round',
    })
    for poly in polys:
        ET.SubElement(group, 'path', {'d': _path_data(poly, mode, resolution, flat_tol)})

    if correspondences:
        links = ET.SubElement(root, 'g', {
            'stroke': '#3070c0', 'stroke-width': _fmt(width * 0.5), 'fill': '#3070c0',
        })
        for observed, fitted in correspondences:
            observed = np.asarray(observed, dtype=np.float64).reshape(-1, 2)
            fitted = np.asarray(fitted, dtype=np.float64).reshape(-1, 2)
            for a, b in zip(observed, fitted):
                ET.SubElement(links, 'line', {
                    'x1': _fmt(a[0]), 'y1': _fmt(a[1]),
                    'x2': _fmt(b[0]), 'y2': _fmt(b[1]),
                })
                ET.SubElement(links, 'circle', {
                    'cx': _fmt(a[0]), 'cy': _fmt(a[1]), 'r': _fmt(width),
                })

    if show_control:
        ctrl = ET.SubElement(root, 'g', {
            'stroke': '#c03030', 'fill': '#c03030',
            'stroke-width': _fmt(width * 0.5),
        })
        for poly in polys:
            ET.SubElement(ctrl, 'polyline', {
                'fill': 'none',
                'stroke-dasharray': f'{_fmt(width * 2)},{_fmt(width * 2)}',
                'points': ' '.join(_pt(p) for p in poly.points),
            })
            for point in poly.points:
                ET.SubElement(ctrl, 'circle', {
                    'cx': _fmt(point[0]), 'cy': _fmt(point[1]), 'r': _fmt(width * 1.5),
                })

    return (
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>\n'
        + ET.tostring(root, encoding='unicode')
        + '\n'
    )
