"""Parse sketch datasets, and break sketches into normalised strokes.

A raw sketch is a list of points with a pen state each. The pen is lifted
after the last point of every stroke, so cutting after each lift recovers
the strokes. Strokes are then split at sharp bends and length limits,
and moved so they start at the origin.
"""
import json
import math
from enum import IntEnum
from typing import (
    IO, Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union,
)

import attr
import numpy as np

from vecsketch import VecSketchError
from vecsketch.bezier import (
    ControlPolygon, DiagonalNoise, EncodedStroke, SeedLike, as_rng, perturb,
)
from vecsketch.logger import get_logger

LOGGER = get_logger(__name__)
DATASET_VERSION = 1

DEFAULT_MAX_LEN = 128
DEFAULT_BEND_THRESHOLD = 2.0 * math.pi / 3.0

__all__ = [
    'ParseError', 'PenState', 'RawSketch', 'Stroke', 'StrokeSequence',
    'EncodedSketch', 'ParseReport',
    'parse_quickdraw_ndjson', 'parse_stroke3', 'write_stroke3', 'read_stroke3_text',
    'segment_strokes', 'normalize_stroke', 'denormalize_stroke', 'split_stroke',
    'discrete_curvature', 'augment_control_points', 'scale_to_unit_box', 'preprocess',
    'dump_dataset', 'load_dataset', 'dump_encoded', 'load_encoded',
]


class ParseError(VecSketchError, ValueError):
    """Invalid sketch data."""
    category = 'io'

    def __init__(self, line_num: Union[int, str], msg: str, *args: object) -> None:
        super().__init__('{}: {}'.format(line_num, msg.format(*args)))


class PenState(IntEnum):
    """Whether the pen stays down after a point, or is lifted."""
    DOWN = 0
    UP = 1


def _points(value: object) -> np.ndarray:
    arr = np.array(value, dtype=np.float64).reshape(-1, 2)
    arr.setflags(write=False)
    return arr


def _offset(value: object) -> np.ndarray:
    arr = np.array(value, dtype=np.float64).reshape(2)
    arr.setflags(write=False)
    return arr


@attr.frozen(eq=False)
class RawSketch:
    """A sketch as a sequence of points with pen states."""
    points: np.ndarray = attr.ib(converter=_points)
    pen: Tuple[PenState, ...] = attr.ib(converter=lambda pens: tuple(map(PenState, pens)))
    category: str = ''
    # Offset rows this was parsed from, if any.
    offsets: Optional[np.ndarray] = attr.ib(default=None, repr=False)

    def __attrs_post_init__(self) -> None:
        if len(self.points) == 0:
            raise ValueError('A sketch needs at least one point!')
        if len(self.points) != len(self.pen):
            raise ValueError(f'{len(self.points)} points but {len(self.pen)} pen states!')
        if not np.all(np.isfinite(self.points)):
            raise ValueError('Sketch contains non-finite coordinates!')

    def __len__(self) -> int:
        return len(self.points)


@attr.frozen(eq=False)
class Stroke:
    """A pen-down run of points. offset is the translation removed by normalisation."""
    points: np.ndarray = attr.ib(converter=_points)
    offset: np.ndarray = attr.ib(converter=_offset, factory=lambda: np.zeros(2))

    def __attrs_post_init__(self) -> None:
        if len(self.points) < 2:
            raise ValueError(f'A stroke needs at least two points, not {len(self.points)}!')
        if not np.all(np.isfinite(self.points)) or not np.all(np.isfinite(self.offset)):
            raise ValueError('Stroke contains non-finite coordinates!')

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_normalized(self) -> bool:
        """Check if the stroke starts at the origin."""
        return bool(self.points[0, 0] == 0.0 and self.points[0, 1] == 0.0)

    def absolute(self) -> np.ndarray:
        """The points in sketch coordinates."""
        return self.points + self.offset


@attr.frozen(eq=False)
class StrokeSequence:
    """The strokes of one sketch, with the length of the sketch they came from."""
    strokes: List[Stroke] = attr.ib(converter=list)
    category: str = ''
    raw_length: int = 0
    dropped: int = 0

    def __attrs_post_init__(self) -> None:
        if not self.strokes:
            raise ValueError('A stroke sequence needs at least one stroke!')

    def __len__(self) -> int:
        return len(self.strokes)

    def __iter__(self) -> Iterator[Stroke]:
        return iter(self.strokes)

    @property
    def point_count(self) -> int:
        """The total number of points over all strokes."""
        return sum(len(stroke) for stroke in self.strokes)


@attr.frozen(eq=False)
class EncodedSketch:
    """A sketch with every stroke replaced by a placed Bézier curve."""
    strokes: List[EncodedStroke] = attr.ib(converter=list)
    category: str = ''
    raw_length: int = 0

    def __attrs_post_init__(self) -> None:
        if not self.strokes:
            raise ValueError('An encoded sketch needs at least one stroke!')

    def __len__(self) -> int:
        return len(self.strokes)

    def __iter__(self) -> Iterator[EncodedStroke]:
        return iter(self.strokes)

    @property
    def control_point_count(self) -> int:
        """Total control points, the length of the control-point sequence."""
        return sum(stroke.degree + 1 for stroke in self.strokes)


@attr.define
class ParseReport:
    """The sketches read from a file, and how many lines were unusable."""
    sketches: List[RawSketch] = attr.Factory(list)
    skipped_lines: int = 0
    rejected_records: int = 0

    def __iter__(self) -> Iterator[RawSketch]:
        return iter(self.sketches)

    def __len__(self) -> int:
        return len(self.sketches)


def _drawing_to_sketch(drawing: Any, category: str) -> RawSketch:
    """Flatten Quick, Draw! [[xs, ys], ...] strokes, lifting the pen at each end."""
    if not isinstance(drawing, list) or not drawing:
        raise ValueError('empty drawing')
    points: List[np.ndarray] = []
    pens: List[PenState] = []
    for stroke in drawing:
        xs, ys = stroke[0], stroke[1]
        if len(xs) != len(ys):
            raise ValueError(f'stroke has {len(xs)} x values but {len(ys)} y values')
        if not xs:
            continue
        points.append(np.column_stack([
            np.asarray(xs, dtype=np.float64),
            np.asarray(ys, dtype=np.float64),
        ]))
        pens.extend([PenState.DOWN] * (len(xs) - 1))
        pens.append(PenState.UP)
    if not points:
        raise ValueError('empty drawing')
    return RawSketch(np.vstack(points), pens, category)


def parse_quickdraw_ndjson(file: Iterable[str]) -> ParseReport:
    """Parse Quick, Draw! simplified NDJSON, one sketch per line.

    Malformed lines are skipped, and records with no usable drawing are
    rejected. Both are counted in the report.
    """
    report = ParseReport()
    for line_num, line in enumerate(file, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise ValueError('record is not an object')
        except ValueError as exc:
            LOGGER.warning('Line {}: skipping malformed record: {}', line_num, exc)
            report.skipped_lines += 1
            continue
        try:
            report.sketches.append(_drawing_to_sketch(
                record.get('drawing'),
                str(record.get('word', '')),
            ))
        except (ValueError, TypeError, IndexError) as exc:
            LOGGER.warning('Line {}: rejecting record: {}', line_num, exc)
            report.rejected_records += 1
    LOGGER.info(
        'Read {} sketches ({} malformed lines, {} rejected records)',
        len(report.sketches), report.skipped_lines, report.rejected_records,
    )
    return report


def parse_stroke3(rows: Union[np.ndarray, Sequence[Sequence[float]]], category: str='') -> RawSketch:
    """Convert (dx, dy, pen-lift) offset rows into absolute points from (0, 0)."""
    arr = np.array(rows, dtype=np.float64)
    if arr.size == 0:
        raise ParseError('<stroke-3>', 'no rows to parse')
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ParseError('<stroke-3>', 'expected rows of 3 values, got shape {}', arr.shape)
    for i, row in enumerate(arr):
        if not np.all(np.isfinite(row)):
            raise ParseError(i + 1, 'non-finite row {}', row.tolist())
        if row[2] not in (0.0, 1.0):
            raise ParseError(i + 1, 'pen lift must be 0 or 1, not {}', row[2])
    arr.setflags(write=False)
    return RawSketch(np.cumsum(arr[:, :2], axis=0), arr[:, 2].astype(int), category, arr)


def write_stroke3(sketch: RawSketch) -> np.ndarray:
    """Convert a sketch back to offset rows, the inverse of parse_stroke3().

    Sketches from parse_stroke3() give back their rows unchanged. Otherwise
    the offsets are recomputed, which is exact for integer coordinates.
    """
    rows = sketch.offsets
    pens = np.array(sketch.pen, dtype=np.float64)
    if (
        rows is not None
        and np.array_equal(rows[:, 2], pens)
        and np.array_equal(np.cumsum(rows[:, :2], axis=0), sketch.points)
    ):
        return rows.copy()
    deltas = np.diff(sketch.points, axis=0, prepend=np.zeros((1, 2)))
    return np.column_stack([deltas, pens])


def read_stroke3_text(file: Iterable[str], category: str='') -> RawSketch:
    """Read stroke-3 rows from text, separated by commas or whitespace.

    Anything after a '#' is a comment.
    """
    rows = []
    for line_num, line in enumerate(file, start=1):
        if '#' in line:
            line = line.split('#', 1)[0]
        line = line.replace(',', ' ').strip()
        if not line:
            continue
        values = line.split()
        if len(values) != 3:
            raise ParseError(line_num, 'expected 3 values, got {}', len(values))
        try:
            rows.append([float(val) for val in values])
        except ValueError:
            raise ParseError(line_num, 'invalid number in "{}"', line) from None
    return parse_stroke3(rows, category)


def segment_strokes(sketch: RawSketch) -> StrokeSequence:
    """Cut the sketch after each pen lift.

    Single-point strokes cannot form a curve, so they are dropped and counted.
    """
    strokes: List[Stroke] = []
    dropped = 0
    start = 0
    for i, pen in enumerate(sketch.pen):
        if pen is PenState.UP or i == len(sketch.pen) - 1:
            if i - start + 1 >= 2:
                strokes.append(Stroke(sketch.points[start:i + 1]))
            else:
                dropped += 1
            start = i + 1
    if dropped:
        LOGGER.debug('Dropped {} single-point stroke(s)', dropped)
    if not strokes:
        raise ValueError('Sketch has no strokes with at least two points!')
    return StrokeSequence(strokes, sketch.category, len(sketch), dropped)


def normalize_stroke(stroke: Stroke) -> Stroke:
    """Translate the stroke to start at the origin, recording the translation."""
    if len(stroke) < 2:
        raise ValueError(f'A stroke needs at least two points, not {len(stroke)}!')
    start = stroke.points[0]
    return Stroke(stroke.points - start, stroke.offset + start)


def denormalize_stroke(stroke: Stroke) -> Stroke:
    """Undo normalize_stroke(), giving absolute points and zero offset."""
    return Stroke(stroke.points + stroke.offset, np.zeros(2))


def discrete_curvature(stroke: Union[Stroke, np.ndarray], i: int) -> float:
    """The turning angle at interior point i, in radians within [0, pi].

    Repeated points have no direction, and count as straight.
    """
    points = stroke.points if isinstance(stroke, Stroke) else np.asarray(stroke, dtype=np.float64)
    if not 1 <= i <= len(points) - 2:
        raise IndexError(f'Curvature needs an interior point, not index {i} of {len(points)}!')
    before = points[i] - points[i - 1]
    after = points[i + 1] - points[i]
    cross = before[0] * after[1] - before[1] * after[0]
    dot = before[0] * after[0] + before[1] * after[1]
    if cross == 0.0 and dot == 0.0:
        return 0.0
    return math.atan2(abs(cross), dot)


def split_stroke(
    stroke: Stroke,
    max_len: int=DEFAULT_MAX_LEN,
    bend_threshold: float=DEFAULT_BEND_THRESHOLD,
) -> List[Stroke]:
    """Break a stroke into pieces of at most max_len points, with at most one sharp bend each.

    A split point is shared: it ends one piece and starts the next, so every
    piece stays connected. Pieces keep the coordinates and offset of the input.
    """
    if max_len < 2:
        raise ValueError(f'Maximum stroke length must be at least 2, not {max_len}!')
    points = stroke.points
    count = len(points)
    corners = [
        i for i in range(1, count - 1)
        if discrete_curvature(points, i) > bend_threshold
    ]
    # Every second corner becomes a cut, leaving one corner inside each piece.
    cuts = [0] + corners[1::2] + [count - 1]

    pieces: List[Stroke] = []
    for start, end in zip(cuts, cuts[1:]):
        while end - start + 1 > max_len:
            pieces.append(Stroke(points[start:start + max_len], stroke.offset))
            start += max_len - 1
        pieces.append(Stroke(points[start:end + 1], stroke.offset))
    return pieces


def scale_to_unit_box(sequence: StrokeSequence) -> Tuple[StrokeSequence, float]:
    """Uniformly scale so the larger bounding-box side becomes 1.

    Scaling is about the origin, so offsets scale along with points.
    Returns the new sequence and the factor used.
    """
    absolute = np.vstack([stroke.absolute() for stroke in sequence.strokes])
    side = float(np.max(absolute.max(axis=0) - absolute.min(axis=0)))
    if side == 0.0:
        return sequence, 1.0
    factor = 1.0 / side
    return attr.evolve(sequence, strokes=[
        Stroke(stroke.points * factor, stroke.offset * factor)
        for stroke in sequence.strokes
    ]), factor


def preprocess(
    sketch: RawSketch,
    max_len: int=DEFAULT_MAX_LEN,
    bend_threshold: float=DEFAULT_BEND_THRESHOLD,
    unit_scale: bool=True,
) -> StrokeSequence:
    """Segment, scale, split and normalise a raw sketch, ready for encoding."""
    sequence = segment_strokes(sketch)
    if unit_scale:
        sequence, _ = scale_to_unit_box(sequence)
    pieces = [
        normalize_stroke(piece)
        for stroke in sequence.strokes
        for piece in split_stroke(stroke, max_len, bend_threshold)
    ]
    return attr.evolve(sequence, strokes=pieces)


def augment_control_points(sketch: EncodedSketch, seed: SeedLike, scale: float=1.0) -> EncodedSketch:
    """Jitter every control point with independent 2D Gaussian noise of std scale."""
    if scale < 0.0:
        raise ValueError(f'Noise scale must be nonnegative, not {scale}!')
    rng = as_rng(seed)
    strokes = []
    for stroke in sketch.strokes:
        noise = DiagonalNoise.isotropic(stroke.degree, scale * scale)
        strokes.append(attr.evolve(stroke, poly=perturb(stroke.poly, noise, rng)))
    return attr.evolve(sketch, strokes=strokes)


def _floats(arr: np.ndarray) -> List[Any]:
    return arr.tolist()


def dump_dataset(sequences: Iterable[StrokeSequence], file: IO[str]) -> int:
    """Write stroke sequences as versioned NDJSON records. Returns the count."""
    count = 0
    for seq in sequences:
        file.write(json.dumps({
            'version': DATASET_VERSION,
            'category': seq.category,
            'raw_length': seq.raw_length,
            'strokes': [
                {'offset': _floats(stroke.offset), 'points': _floats(stroke.points)}
                for stroke in seq.strokes
            ],
        }) + '\n')
        count += 1
    return count


def _read_records(file: Iterable[str]) -> Iterator[Tuple[int, Dict[str, Any]]]:
    for line_num, line in enumerate(file, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except ValueError as exc:
            raise ParseError(line_num, 'invalid JSON: {}', exc) from None
        if not isinstance(record, dict):
            raise ParseError(line_num, 'record is not an object')
        version = record.get('version')
        if version != DATASET_VERSION:
            raise ParseError(line_num, 'unsupported dataset version {!r}', version)
        yield line_num, record


def load_dataset(file: Iterable[str]) -> List[StrokeSequence]:
    """Read the stroke sequences written by dump_dataset()."""
    sequences = []
    for line_num, record in _read_records(file):
        try:
            sequences.append(StrokeSequence(
                [Stroke(rec['points'], rec['offset']) for rec in record['strokes']],
                record.get('category', ''),
                int(record.get('raw_length', 0)),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(line_num, 'invalid stroke sequence: {}', exc) from None
    return sequences


def dump_encoded(sketches: Iterable[EncodedSketch], file: IO[str]) -> int:
    """Write encoded sketches as versioned NDJSON records. Returns the count."""
    count = 0
    for sketch in sketches:
        file.write(json.dumps({
            'version': DATASET_VERSION,
            'category': sketch.category,
            'raw_length': sketch.raw_length,
            'strokes': [
                {
                    'degree': stroke.degree,
                    'offset': _floats(stroke.offset),
                    'points': _floats(stroke.poly.points),
                    'loss': stroke.loss,
                }
                for stroke in sketch.strokes
            ],
        }) + '\n')
        count += 1
    return count


def load_encoded(file: Iterable[str]) -> List[EncodedSketch]:
    """Read the encoded sketches written by dump_encoded()."""
    sketches = []
    for line_num, record in _read_records(file):
        try:
            strokes = []
            for rec in record['strokes']:
                poly = ControlPolygon(rec['points'])
                if poly.degree != rec['degree']:
                    raise ValueError(f'degree {rec["degree"]} with {len(poly.points)} points')
                strokes.append(EncodedStroke(poly, rec['offset'], rec.get('loss')))
            sketches.append(EncodedSketch(
                strokes,
                record.get('category', ''),
                int(record.get('raw_length', 0)),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(line_num, 'invalid encoded sketch: {}', exc) from None
    return sketches
