"""Compare sketch populations: Fréchet distances over raster features, and length histograms.

Sketches are drawn into a small greyscale raster, reduced to a fixed-length
feature vector, and each population is summarised by its mean and
covariance. The distance between two populations is

    |mu_r - mu_g|^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2))

Features are either the raster block-averaged down to a coarse grid, or a
coarse histogram of gradient orientations. Values are only comparable
between runs using the same FeatureSpec.
"""
import csv
import io
import math
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np
from PIL import Image, ImageDraw
from scipy import linalg

from vecsketch import logger
from vecsketch.autodiff import NumericError, map_ordered
from vecsketch.bezier import SeedLike, as_rng, decode_stroke
from vecsketch.config import Config
from vecsketch.encoder import ModelError
from vecsketch.generator import (
    ControlPointModeSketch, GeneratorModel, Sample, StrokeModeSketch,
    build_cp_sequence, from_cp_sequence, from_stroke_mode, sample_conditional,
    sample_unconditional, to_stroke_mode,
)
from vecsketch.sketch import EncodedSketch, PenState, RawSketch, StrokeSequence

LOGGER = logger.get_logger(__name__)

__all__ = [
    'FeatureSpec', 'FeatureKind', 'PopulationStats', 'Histogram', 'FidResult',
    'sketch_polylines', 'rasterize', 'extract_features', 'sketch_features',
    'population_stats', 'matrix_sqrt_psd', 'fid', 'fid_by_length',
    'generator_sampler', 'sketch_length', 'length_histogram',
]

AnySketch = Union[RawSketch, StrokeSequence, EncodedSketch, StrokeModeSketch, ControlPointModeSketch, Sample]
Sampler = Callable[[int, np.random.Generator], Sequence[AnySketch]]

SUPERSAMPLE = 4
MARGIN = 0.05
PSD_TOLERANCE = 1e-8
MIN_BUCKET = 50
CURVE_RESOLUTION = 32


class FeatureKind:
    """Names of the feature extractors."""
    RASTER = 'raster'
    HOG = 'hog'


def _positive(inst: object, at: 'attr.Attribute[int]', value: int) -> None:
    if value <= 0:
        raise ValueError(f'{at.name} must be positive, not {value}!')


@attr.frozen
class FeatureSpec:
    """How sketches are turned into feature vectors.

    The raster mode averages blocks of the raster down to grid x grid. The
    gradient mode splits the raster into cells x cells and histograms the
    unsigned gradient orientation of each into bins, weighted by magnitude.
    """
    raster_size: int = attr.ib(default=64, validator=_positive)
    kind: str = attr.ib(default=FeatureKind.RASTER, validator=attr.validators.in_([FeatureKind.RASTER, FeatureKind.HOG]))
    grid: int = attr.ib(default=16, validator=_positive)
    cells: int = attr.ib(default=4, validator=_positive)
    bins: int = attr.ib(default=8, validator=_positive)

    def __attrs_post_init__(self) -> None:
        split = self.grid if self.kind == FeatureKind.RASTER else self.cells
        if self.raster_size % split:
            raise ValueError(f'Raster size {self.raster_size} is not divisible by {split}!')

    @property
    def dim(self) -> int:
        """Length of the feature vector."""
        if self.kind == FeatureKind.RASTER:
            return self.grid * self.grid
        return self.cells * self.cells * self.bins

    @classmethod
    def from_config(cls, conf: Config) -> 'FeatureSpec':
        """Read the evaluation options."""
        return cls(
            raster_size=conf.get(int, 'raster_size'),
            kind=conf.get(str, 'feature'),
            grid=conf.get(int, 'feature_grid'),
        )


def _check_symmetric(inst: 'PopulationStats', at: 'attr.Attribute[np.ndarray]', value: np.ndarray) -> None:
    if value.ndim != 2 or value.shape[0] != value.shape[1]:
        raise ValueError(f'Covariance must be square, not {value.shape}!')
    if not np.allclose(value, value.T, rtol=1e-10, atol=1e-12):
        raise ValueError('Covariance must be symmetric!')


def _readonly(value: object) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@attr.frozen(eq=False)
class PopulationStats:
    """Mean and covariance of a population's features."""
    mean: np.ndarray = attr.ib(converter=_readonly)
    cov: np.ndarray = attr.ib(converter=_readonly, validator=_check_symmetric)
    count: int = 0

    def __attrs_post_init__(self) -> None:
        if self.mean.shape != (self.cov.shape[0], ):
            raise ValueError(f'Mean {self.mean.shape} does not match covariance {self.cov.shape}!')

    @property
    def dim(self) -> int:
        """The feature dimension."""
        return len(self.mean)


@attr.frozen
class FidResult:
    """The distance for one length bucket."""
    bucket: int
    half_width: int
    count: int
    generated: int
    fid: float
    warnings: Tuple[str, ...] = ()


@attr.frozen(eq=False)
class Histogram:
    """Stroke and sketch lengths, counted into bins [edges[i], edges[i+1])."""
    representation: str
    edges: np.ndarray
    stroke_counts: np.ndarray
    sketch_counts: np.ndarray
    mean_stroke_length: float
    mean_sketch_length: float

    @property
    def total_sketches(self) -> int:
        """Number of sketches counted."""
        return int(self.sketch_counts.sum())

    @property
    def total_strokes(self) -> int:
        """Number of strokes counted."""
        return int(self.stroke_counts.sum())

    def to_csv(self) -> str:
        """Rows of level, representation, bin start, bin end, count."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator='\n')
        writer.writerow(['level', 'representation', 'start', 'end', 'count'])
        for level, counts in [('stroke', self.stroke_counts), ('sketch', self.sketch_counts)]:
            for start, end, count in zip(self.edges, self.edges[1:], counts):
                writer.writerow([level, self.representation, int(start), int(end), int(count)])
        return buf.getvalue()


def _pen_runs(sketch: RawSketch) -> List[np.ndarray]:
    runs = []
    start = 0
    for i, pen in enumerate(sketch.pen):
        if pen is PenState.UP or i == len(sketch.pen) - 1:
            runs.append(sketch.points[start:i + 1])
            start = i + 1
    return runs


def sketch_polylines(sketch: AnySketch, resolution: int=CURVE_RESOLUTION) -> List[np.ndarray]:
    """Absolute polylines for any supported sketch form.

    Curves are sampled at resolution uniformly spaced parameters. Raw
    sketches keep single-point strokes, which draw as dots.
    """
    if isinstance(sketch, Sample):
        sketch = sketch.to_encoded()
    if isinstance(sketch, StrokeModeSketch):
        sketch = from_stroke_mode(sketch)
    elif isinstance(sketch, ControlPointModeSketch):
        sketch = from_cp_sequence(sketch)

    if isinstance(sketch, RawSketch):
        return _pen_runs(sketch)
    if isinstance(sketch, StrokeSequence):
        return [stroke.absolute() for stroke in sketch.strokes]
    if isinstance(sketch, EncodedSketch):
        return [decode_stroke(stroke.absolute(), resolution) for stroke in sketch.strokes]
    raise TypeError(f'Cannot draw {type(sketch).__name__}!')


def rasterize(sketch: AnySketch, size: int=64, resolution: int=CURVE_RESOLUTION) -> np.ndarray:
    """Draw a sketch as a size x size greyscale grid with values in [0, 1].

    The drawing is scaled uniformly to fit its bounding box inside a 5%
    margin and centred. Lines are one pixel wide, antialiased by drawing at
    a larger scale then box-filtering down.
    """
    if size < 1:
        raise ValueError(f'Canvas size must be positive, not {size}!')
    polylines = [line for line in sketch_polylines(sketch, resolution) if len(line)]
    if not polylines:
        raise ValueError('Cannot rasterise an empty sketch!')
    everything = np.vstack(polylines)
    low = everything.min(axis=0)
    high = everything.max(axis=0)
    extent = float(np.max(high - low))

    big = size * SUPERSAMPLE
    usable = big * (1.0 - 2.0 * MARGIN)
    factor = usable / extent if extent > 0.0 else 1.0
    shift = big / 2.0 - (low + high) / 2.0 * factor

    img = Image.new('L', (big, big), 0)
    draw = ImageDraw.Draw(img)
    radius = SUPERSAMPLE / 2.0
    for line in polylines:
        pts = line * factor + shift
        if len(pts) == 1 or np.all(pts == pts[0]):
            x, y = pts[0]
            draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=255)
        else:
            draw.line([tuple(p) for p in pts], fill=255, width=SUPERSAMPLE, joint='curve')
    small = img.resize((size, size), Image.Resampling.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0


def _orientation_histogram(raster: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    grad_y, grad_x = np.gradient(raster)
    magnitude = np.hypot(grad_x, grad_y)
    # Unsigned, in [0, pi).
    angle = np.mod(np.arctan2(grad_y, grad_x), math.pi)
    bin_idx = np.minimum((angle / math.pi * spec.bins).astype(int), spec.bins - 1)
    step = spec.raster_size // spec.cells
    feats = np.zeros((spec.cells, spec.cells, spec.bins))
    for row in range(spec.cells):
        for col in range(spec.cells):
            block = (slice(row * step, (row + 1) * step), slice(col * step, (col + 1) * step))
            feats[row, col] = np.bincount(
                bin_idx[block].ravel(),
                weights=magnitude[block].ravel(),
                minlength=spec.bins,
            )
    flat = feats.reshape(-1)
    norm = np.linalg.norm(flat)
    return flat / norm if norm > 0.0 else flat


def extract_features(raster: np.ndarray, spec: FeatureSpec=FeatureSpec()) -> np.ndarray:
    """Reduce a raster to the feature vector described by spec."""
    raster = np.asarray(raster, dtype=np.float64)
    if raster.shape != (spec.raster_size, spec.raster_size):
        raise ValueError(f'Raster of shape {raster.shape} does not match the {spec.raster_size}px feature size!')
    if spec.kind == FeatureKind.RASTER:
        step = spec.raster_size // spec.grid
        return raster.reshape(spec.grid, step, spec.grid, step).mean(axis=(1, 3)).reshape(-1)
    return _orientation_histogram(raster, spec)


def sketch_features(
    sketches: Sequence[AnySketch],
    spec: FeatureSpec=FeatureSpec(),
    workers: int=1,
) -> np.ndarray:
    """Rasterise and extract features for each sketch, as rows of a (K, D) array."""
    rows = map_ordered(lambda sk: extract_features(rasterize(sk, spec.raster_size), spec), sketches, workers)
    if not rows:
        return np.zeros((0, spec.dim))
    return np.vstack(rows)


def _clamp_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetrise, and zero eigenvalues within tolerance below zero."""
    sym = 0.5 * (matrix + matrix.T)
    evals, evecs = linalg.eigh(sym)
    tol = PSD_TOLERANCE * max(1.0, float(np.max(np.abs(evals))))
    if evals[0] < -tol:
        raise NumericError(f'Matrix is not positive semidefinite, eigenvalue {evals[0]:.6g}!')
    if evals[0] >= 0.0:
        return sym
    evals = np.maximum(evals, 0.0)
    return (evecs * evals) @ evecs.T


def population_stats(features: Union[np.ndarray, Sequence[Sequence[float]]]) -> PopulationStats:
    """Unbiased mean and covariance of a (K, D) feature array."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f'Features must be a (K, D) array, not {feats.shape}!')
    count, dim = feats.shape
    if count < 2:
        raise ValueError(f'Need at least 2 samples for a covariance, not {count}!')
    if not np.all(np.isfinite(feats)):
        raise NumericError('Features contain non-finite values!')
    if count < dim:
        LOGGER.warning('Only {} samples for {}-dimensional features, the covariance is singular.', count, dim)
    mean = feats.mean(axis=0)
    centred = feats - mean
    cov = centred.T @ centred / (count - 1)
    return PopulationStats(mean, _clamp_psd(cov), count)


def _sqrt_sym(matrix: np.ndarray) -> np.ndarray:
    clamped = _clamp_psd(matrix)
    evals, evecs = linalg.eigh(clamped)
    root = (evecs * np.sqrt(np.maximum(evals, 0.0))) @ evecs.T
    return 0.5 * (root + root.T)


def matrix_sqrt_psd(matrix: np.ndarray, other: Optional[np.ndarray]=None) -> np.ndarray:
    """Square root of a PSD matrix, or of the product of two.

    For one symmetric matrix this is the principal root. Given two PSD
    matrices A and B, this returns the root of B^(1/2) A B^(1/2), which is
    similar to AB, so shares the trace of (AB)^(1/2) while staying symmetric.
    A single non-symmetric input is treated as a product and passed to the
    general algorithm.
    """
    mat = np.asarray(matrix, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f'Matrix must be square, not {mat.shape}!')
    if not np.all(np.isfinite(mat)):
        raise NumericError('Matrix contains non-finite values!')
    if other is not None:
        oth = np.asarray(other, dtype=np.float64)
        if oth.shape != mat.shape:
            raise ValueError(f'Shape mismatch: {mat.shape} and {oth.shape}!')
        if not np.all(np.isfinite(oth)):
            raise NumericError('Matrix contains non-finite values!')
        root_b = _sqrt_sym(oth)
        return _sqrt_sym(root_b @ _clamp_psd(mat) @ root_b)
    scale = max(1.0, float(np.max(np.abs(mat))))
    if np.allclose(mat, mat.T, rtol=0.0, atol=1e-12 * scale):
        return _sqrt_sym(mat)
    root = linalg.sqrtm(mat)
    root = np.real(root)
    if not np.all(np.isfinite(root)):
        raise NumericError('Matrix square root did not converge!')
    return root


def fid(real: PopulationStats, gen: PopulationStats) -> float:
    """Fréchet distance between two Gaussian summaries. Never negative."""
    if real.dim != gen.dim:
        raise ValueError(f'Feature dimensions differ: {real.dim} vs {gen.dim}!')
    diff = real.mean - gen.mean
    cross = np.trace(matrix_sqrt_psd(real.cov, gen.cov))
    value = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov) - 2.0 * cross)
    return max(value, 0.0)


def sketch_length(sketch: AnySketch) -> int:
    """Length of the raw sketch a record came from, in points."""
    if isinstance(sketch, RawSketch):
        return len(sketch)
    if isinstance(sketch, StrokeSequence):
        return sketch.raw_length or sketch.point_count
    if isinstance(sketch, EncodedSketch):
        if sketch.raw_length:
            return sketch.raw_length
    raise ValueError(f'{type(sketch).__name__} has no recorded raw length!')


def fid_by_length(
    real: Sequence[AnySketch],
    sampler: Sampler,
    bucket: int,
    half_width: int=20,
    count: Optional[int]=None,
    spec: FeatureSpec=FeatureSpec(),
    seed: SeedLike=0,
    workers: int=1,
) -> FidResult:
    """Distance between real sketches of length bucket +/- half_width and generated ones.

    sampler(count, rng) produces the generated population. By default as
    many are generated as there are real bucket members.
    """
    members = [sk for sk in real if abs(sketch_length(sk) - bucket) <= half_width]
    if not members:
        raise ModelError(f'No sketches of length {bucket} +/- {half_width}!')
    warnings: List[str] = []
    if len(members) < MIN_BUCKET:
        msg = f'Bucket {bucket} has only {len(members)} sketches, below {MIN_BUCKET}.'
        LOGGER.warning(msg)
        warnings.append(msg)
    if count is None:
        count = len(members)
    if count < 2:
        raise ModelError(f'Need at least 2 generated samples, not {count}!')

    generated = sampler(count, as_rng(seed))
    real_stats = population_stats(sketch_features(members, spec, workers))
    gen_stats = population_stats(sketch_features(generated, spec, workers))
    value = fid(real_stats, gen_stats)
    LOGGER.info('FID at length {} +/- {}: {:.6g} ({} real, {} generated)', bucket, half_width, value, len(members), len(generated))
    return FidResult(bucket, half_width, len(members), len(generated), value, tuple(warnings))


def generator_sampler(
    model: GeneratorModel,
    temperature: Optional[float]=None,
    conditions: Optional[Sequence[EncodedSketch]]=None,
) -> Sampler:
    """Wrap a generator as a sampler for fid_by_length().

    With conditions, sample i is decoded from conditions[i % len(conditions)],
    otherwise from the prior.
    """
    inputs: List[Union[StrokeModeSketch, ControlPointModeSketch]] = []
    for sketch in conditions or ():
        if model.mode == 'stroke':
            inputs.append(to_stroke_mode(sketch, model.config.degree))
        else:
            inputs.append(build_cp_sequence(sketch))

    def sample(count: int, rng: np.random.Generator) -> List[EncodedSketch]:
        seeds = rng.integers(0, 2**63 - 1, size=count)
        result = []
        for i, child in enumerate(seeds):
            if inputs:
                drawn = sample_conditional(model, inputs[i % len(inputs)], temperature, int(child))
            else:
                drawn = sample_unconditional(model, temperature, int(child))
            result.append(drawn.to_encoded())
        return result
    return sample


def _stroke_lengths(sketch: AnySketch, representation: str) -> List[int]:
    if representation == 'encoded':
        if isinstance(sketch, StrokeModeSketch):
            return [sketch.degree + 1] * len(sketch)
        if isinstance(sketch, ControlPointModeSketch):
            sketch = from_cp_sequence(sketch)
        if not isinstance(sketch, EncodedSketch):
            raise TypeError(f'Encoded histograms need encoded sketches, not {type(sketch).__name__}!')
        return [stroke.degree + 1 for stroke in sketch.strokes]
    if isinstance(sketch, RawSketch):
        return [len(run) for run in _pen_runs(sketch)]
    if isinstance(sketch, StrokeSequence):
        return [len(stroke) for stroke in sketch.strokes]
    raise TypeError(f'Raw histograms need raw sketches, not {type(sketch).__name__}!')


def length_histogram(
    dataset: Iterable[AnySketch],
    representation: str='raw',
    bin_width: int=10,
    max_length: Optional[int]=None,
) -> Histogram:
    """Histogram stroke and sketch lengths.

    Raw lengths are point counts. Encoded lengths count control points, so a
    degree-n stroke has length n+1 and a sketch the sum over its strokes,
    which is the length of its control-point sequence. Bins cover [0,
    max_length) in steps of bin_width, extended to include the longest value.
    """
    if representation not in ('raw', 'encoded'):
        raise ValueError(f'Unknown representation "{representation}"!')
    if bin_width < 1:
        raise ValueError(f'Bin width must be positive, not {bin_width}!')
    stroke_lengths: List[int] = []
    sketch_lengths: List[int] = []
    for sketch in dataset:
        lengths = _stroke_lengths(sketch, representation)
        stroke_lengths.extend(lengths)
        if representation == 'raw':
            sketch_lengths.append(len(sketch) if isinstance(sketch, RawSketch) else sketch_length(sketch))
        else:
            sketch_lengths.append(sum(lengths))
    if not sketch_lengths:
        raise ValueError('Cannot histogram an empty dataset!')
    top = max(max(sketch_lengths), max(stroke_lengths)) + 1
    if max_length is not None:
        top = max(top, max_length)
    edges = np.arange(0, bin_width * math.ceil(top / bin_width) + 1, bin_width)
    stroke_counts, _ = np.histogram(stroke_lengths, edges)
    sketch_counts, _ = np.histogram(sketch_lengths, edges)
    return Histogram(
        representation,
        edges,
        stroke_counts,
        sketch_counts,
        float(np.mean(stroke_lengths)),
        float(np.mean(sketch_lengths)),
    )
