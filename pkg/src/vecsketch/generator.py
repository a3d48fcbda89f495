"""A sequence VAE generating sketches as Bézier curves.

A bidirectional recurrent encoder summarises a sketch into a latent Gaussian.
A recurrent decoder, started from a squashed affine map of the latent code,
then emits one step at a time, each conditioned on the previous step and the
code. Each step's output is a mixture of diagonal Gaussians.

There are two modes:

* ``stroke``: every step is one whole stroke, its successive control point
  differences at a fixed degree plus its absolute start, with a stop bit.
* ``cp``: every step is one control point as a 5-tuple of the difference
  from the previous control point and three one-hot flags (continue stroke,
  end stroke, end sketch), padded to the maximum length with sketch-end
  tuples.
"""
import hashlib
import json
import math
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np
from scipy.special import logsumexp as np_logsumexp, softmax as np_softmax

from vecsketch import logger, partition
from vecsketch.autodiff import (
    NumericError, ParamStore, Tape, Tensor, add, as_tensor, bidirectional,
    concatenate, exp, gather, index, log_softmax, logsumexp, make_cell,
    map_ordered, matmul, multiply, negative, reshape, scale, slice_cols,
    slice_rows, squared_difference, sub, sum as tsum, tanh,
)
from vecsketch.bezier import ControlPolygon, EncodedStroke, SeedLike, as_rng, elevate
from vecsketch.checkpoint import Checkpoint, CheckpointError, load as load_checkpoint, save as save_checkpoint
from vecsketch.config import Config
from vecsketch.encoder import ModelError
from vecsketch.sketch import EncodedSketch, augment_control_points

LOGGER = logger.get_logger(__name__)

__all__ = [
    'GeneratorConfig', 'GMMParams', 'LatentCode', 'StrokeModeSketch',
    'ControlPointModeSketch', 'GeneratorModel', 'GeneratorHistory',
    'LossBreakdown', 'ForwardOutput', 'Targets', 'DecodeStep', 'CPDecodeStep',
    'Sample',
    'vae_encode', 'decode_step', 'cp_mode_decode_step', 'gmm_log_likelihood',
    'gmm_log_likelihood_rows', 'kl_divergence', 'generator_loss',
    'train_generator', 'sample_unconditional', 'sample_conditional',
    'build_cp_sequence', 'from_cp_sequence', 'to_stroke_mode', 'from_stroke_mode',
    'make_targets', 'save_model', 'load_model',
]

MODES = ('stroke', 'cp')
LOG_2PI = math.log(2.0 * math.pi)
START_TOKEN = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
PAD_TOKEN = np.array([0.0, 0.0, 0.0, 0.0, 1.0])
FLAG_CONTINUE, FLAG_STROKE_END, FLAG_SKETCH_END = range(3)
STOP_THRESHOLD = 0.5
WARMUP_FRACTION = 0.25


def _positive(inst: object, at: 'attr.Attribute[float]', value: float) -> None:
    if value <= 0:
        raise ValueError(f'{at.name} must be positive, not {value}!')


def _nonneg(inst: object, at: 'attr.Attribute[float]', value: float) -> None:
    if value < 0:
        raise ValueError(f'{at.name} must be nonnegative, not {value}!')


@attr.frozen
class GeneratorConfig:
    """Generator architecture, loss and training settings."""
    mode: str = attr.ib(default='stroke', validator=attr.validators.in_(MODES))
    latent: int = attr.ib(default=128, validator=_positive)
    enc_hidden: int = attr.ib(default=256, validator=_positive)
    dec_hidden: int = attr.ib(default=512, validator=_positive)
    mixtures: int = attr.ib(default=10, validator=_positive)
    max_len: int = attr.ib(default=64, validator=_positive)
    degree: int = attr.ib(default=9, validator=_positive)
    cell: str = attr.ib(default='gru', validator=attr.validators.in_(['gru', 'tanh']))
    kl_weight: float = attr.ib(default=1.0, validator=_nonneg)
    free_bits: float = attr.ib(default=0.05, validator=_nonneg)
    temperature: float = attr.ib(default=0.65, validator=_positive)
    augment_scale: float = attr.ib(default=0.01, validator=_nonneg)
    optimizer: str = attr.ib(default='adam', validator=attr.validators.in_(['adam', 'sgd']))
    lr: float = attr.ib(default=1e-3, validator=_positive)
    clip: float = attr.ib(default=1.0, validator=_positive)
    epochs: int = attr.ib(default=50, validator=_positive)
    batch_size: int = attr.ib(default=16, validator=_positive)

    @property
    def step_width(self) -> int:
        """Width of one sequence step."""
        return 2 * self.degree + 2 if self.mode == 'stroke' else 5

    @property
    def gmm_dim(self) -> int:
        """Dimension of each mixture component."""
        return 2 * self.degree + 2 if self.mode == 'stroke' else 2

    @property
    def output_width(self) -> int:
        """Width of the decoder output row."""
        tail = 1 if self.mode == 'stroke' else 3
        return self.mixtures * (1 + 2 * self.gmm_dim) + tail

    def content_hash(self) -> str:
        """A stable digest of these settings, stored in checkpoints."""
        text = json.dumps(attr.asdict(self), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(text.encode('utf8')).hexdigest()

    @classmethod
    def from_config(cls, conf: Config) -> 'GeneratorConfig':
        """Read the generator options."""
        return cls(
            mode=conf.get(str, 'mode'),
            latent=conf.get(int, 'latent'),
            enc_hidden=conf.get(int, 'gen_enc_hidden'),
            dec_hidden=conf.get(int, 'gen_dec_hidden'),
            mixtures=conf.get(int, 'mixtures'),
            max_len=conf.get(int, 'nmax'),
            degree=conf.get(int, 'stroke_degree'),
            cell=conf.get(str, 'cell'),
            kl_weight=conf.get(float, 'kl_weight'),
            free_bits=conf.get(float, 'free_bits'),
            temperature=conf.get(float, 'temperature'),
            augment_scale=conf.get(float, 'augment_scale'),
            optimizer=conf.get(str, 'optimizer'),
            lr=conf.get(float, 'generator_lr'),
            clip=conf.get(float, 'clip'),
            epochs=conf.get(int, 'generator_epochs'),
            batch_size=conf.get(int, 'batch_size'),
        )


def _array(value: object) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@attr.frozen(eq=False)
class GMMParams:
    """A mixture of diagonal Gaussians: weights (M,), means and variances (M, D)."""
    weights: np.ndarray = attr.ib(converter=_array)
    means: np.ndarray = attr.ib(converter=_array)
    variances: np.ndarray = attr.ib(converter=_array)

    def __attrs_post_init__(self) -> None:
        if self.means.ndim != 2 or self.means.shape != self.variances.shape:
            raise ValueError(f'Means {self.means.shape} and variances {self.variances.shape} must be (M, D)!')
        if self.weights.shape != (self.means.shape[0], ):
            raise ValueError(f'{self.weights.shape} weights for {self.means.shape[0]} components!')
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-9 or np.any(self.weights < 0.0):
            raise ValueError('Mixture weights must be nonnegative and sum to 1!')
        if not np.all(self.variances > 0.0):
            raise ValueError('Variances must be positive!')

    @property
    def dim(self) -> int:
        """Dimension of each component."""
        return self.means.shape[1]

    @classmethod
    def from_raw(
        cls,
        logits: np.ndarray,
        means: np.ndarray,
        log_variances: np.ndarray,
        temperature: float=1.0,
    ) -> 'GMMParams':
        """Squash decoder outputs. Temperature scales the logits and the variances."""
        if temperature <= 0.0:
            raise ValueError(f'Temperature must be positive, not {temperature}!')
        logits = np.asarray(logits, dtype=np.float64)
        return cls(
            np_softmax(logits / temperature),
            means,
            np.exp(np.asarray(log_variances, dtype=np.float64)) * temperature,
        )

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Pick a component by weight, then draw from it."""
        comp = int(rng.choice(len(self.weights), p=self.weights))
        return self.means[comp] + np.sqrt(self.variances[comp]) * rng.standard_normal(self.dim)


@attr.frozen(eq=False)
class LatentCode:
    """A latent sample, with the posterior it came from."""
    z: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


def _check_finite(inst: object, at: 'attr.Attribute[np.ndarray]', value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise ValueError(f'{at.name} contains non-finite values!')


@attr.frozen(eq=False)
class StrokeModeSketch:
    """Strokes at one degree: flattened control point differences and absolute starts."""
    embeddings: np.ndarray = attr.ib(converter=_array, validator=_check_finite)
    starts: np.ndarray = attr.ib(converter=_array, validator=_check_finite)
    category: str = ''

    def __attrs_post_init__(self) -> None:
        if self.embeddings.ndim != 2 or len(self.embeddings) == 0 or self.embeddings.shape[1] % 2:
            raise ValueError(f'Embeddings must be a nonempty (N, 2n) array, not {self.embeddings.shape}!')
        if self.starts.shape != (len(self.embeddings), 2):
            raise ValueError(f'Starts must be ({len(self.embeddings)}, 2), not {self.starts.shape}!')

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def degree(self) -> int:
        """The shared degree of every stroke."""
        return self.embeddings.shape[1] // 2

    def vectors(self) -> np.ndarray:
        """Per-step vectors, differences then start."""
        return np.hstack([self.embeddings, self.starts])


@attr.frozen(eq=False)
class ControlPointModeSketch:
    """A sketch as (dx, dy, continue, stroke end, sketch end) control point steps."""
    steps: np.ndarray = attr.ib(converter=_array, validator=_check_finite)
    category: str = ''

    def __attrs_post_init__(self) -> None:
        steps = self.steps
        if steps.ndim != 2 or steps.shape[1] != 5 or len(steps) == 0:
            raise ValueError(f'Steps must be a nonempty (L, 5) array, not {steps.shape}!')
        flags = steps[:, 2:]
        if not np.all((flags == 0.0) | (flags == 1.0)) or not np.all(flags.sum(axis=1) == 1.0):
            raise ValueError('Exactly one flag must be set on every step!')
        if flags[-1, FLAG_SKETCH_END] != 1.0:
            raise ValueError('The last step must end the sketch!')

    def __len__(self) -> int:
        return len(self.steps)

    def padded(self, length: int) -> np.ndarray:
        """The steps, extended with sketch-end tuples to the given length."""
        if len(self.steps) > length:
            raise ValueError(f'Sequence of {len(self.steps)} steps exceeds {length}!')
        pad = np.tile(PAD_TOKEN, (length - len(self.steps), 1))
        return np.vstack([self.steps, pad])


GenSketch = Union[StrokeModeSketch, ControlPointModeSketch]


def to_stroke_mode(sketch: EncodedSketch, degree: int=9) -> StrokeModeSketch:
    """Elevate every stroke to the given degree and split off its start."""
    embeddings = []
    starts = []
    for stroke in sketch.strokes:
        poly = stroke.poly
        if poly.degree > degree:
            raise ValueError(f'Stroke of degree {poly.degree} is above the fixed degree {degree}!')
        poly = elevate(poly, degree)
        # Rebase so P_0 is at the origin, moving the start into the offset.
        first = poly.points[0]
        embeddings.append(poly.translate(-first).deltas().reshape(-1))
        starts.append(stroke.offset + first)
    return StrokeModeSketch(np.array(embeddings), np.array(starts), sketch.category)


def from_stroke_mode(sketch: StrokeModeSketch) -> EncodedSketch:
    """Rebuild placed curves from a stroke-mode sketch."""
    n = sketch.degree
    return EncodedSketch([
        EncodedStroke(ControlPolygon.from_deltas(row.reshape(n, 2)), start)
        for row, start in zip(sketch.embeddings, sketch.starts)
    ], sketch.category)


def build_cp_sequence(sketch: EncodedSketch) -> ControlPointModeSketch:
    """Flatten absolute control points into difference tuples with pen flags.

    Differences start from the origin, so a cumulative sum recovers the
    absolute points. Each stroke's last point ends the stroke, and the very
    last point ends the sketch instead.
    """
    if not sketch.strokes:
        raise ValueError('Cannot build a sequence from an empty sketch!')
    rows = []
    for stroke in sketch.strokes:
        points = stroke.absolute().points
        for i, point in enumerate(points):
            flags = [0.0, 0.0, 0.0]
            flags[FLAG_STROKE_END if i == len(points) - 1 else FLAG_CONTINUE] = 1.0
            rows.append([point[0], point[1], *flags])
    steps = np.array(rows)
    steps[:, :2] = np.diff(steps[:, :2], axis=0, prepend=np.zeros((1, 2)))
    steps[-1, 2:] = [0.0, 0.0, 1.0]
    return ControlPointModeSketch(steps, sketch.category)


def from_cp_sequence(sketch: ControlPointModeSketch) -> EncodedSketch:
    """Rebuild placed curves from control point tuples.

    Reading stops at the first sketch end. A stroke of a single control
    point becomes a zero-length line.
    """
    absolute = np.cumsum(sketch.steps[:, :2], axis=0)
    strokes: List[EncodedStroke] = []
    current: List[np.ndarray] = []

    def close() -> None:
        if not current:
            return
        if len(current) == 1:
            current.append(current[0])
        pts = np.array(current)
        strokes.append(EncodedStroke(ControlPolygon(pts - pts[0]), pts[0]))
        current.clear()

    for point, row in zip(absolute, sketch.steps):
        current.append(point)
        flag = int(np.argmax(row[2:]))
        if flag != FLAG_CONTINUE:
            close()
        if flag == FLAG_SKETCH_END:
            break
    close()
    return EncodedSketch(strokes, sketch.category)


@attr.frozen(eq=False)
class ForwardOutput:
    """Decoder outputs for a sequence, with the posterior parameters."""
    rows: Tensor  # (T, output_width)
    mu: Tensor  # (1, latent)
    logvar: Tensor  # (1, latent)


@attr.frozen(eq=False)
class Targets:
    """What the decoder should predict.

    values holds the real steps' mixture targets. stop (stroke mode) has one
    0/1 entry per real step. flags (cp mode) has one class per padded step.
    """
    values: np.ndarray
    stop: Optional[np.ndarray] = None
    flags: Optional[np.ndarray] = None


@attr.frozen
class LossBreakdown:
    """Generator loss terms. total == recon + stop + kl_term."""
    recon: float
    stop: float
    kl: float
    kl_weight: float
    kl_term: float
    total: float


@attr.define
class GeneratorHistory:
    """Per-epoch means of each loss term."""
    recon: List[float] = attr.Factory(list)
    stop: List[float] = attr.Factory(list)
    kl: List[float] = attr.Factory(list)
    total: List[float] = attr.Factory(list)
    skipped: int = 0
    aborted_steps: int = 0

    def as_dict(self) -> Dict[str, object]:
        """A JSON-compatible form."""
        return attr.asdict(self)


@attr.frozen(eq=False)
class DecodeStep:
    """One stroke-mode decoder step."""
    gmm: GMMParams
    stop: float
    state: np.ndarray


@attr.frozen(eq=False)
class CPDecodeStep:
    """One control-point-mode decoder step."""
    gmm: GMMParams
    flags: np.ndarray
    state: np.ndarray


@attr.frozen(eq=False)
class Sample:
    """A generated sketch, and whether the model ended it before the length cap."""
    sketch: GenSketch
    latent: np.ndarray
    stopped: bool

    def to_encoded(self) -> EncodedSketch:
        """Convert to placed curves, ready for rendering."""
        if isinstance(self.sketch, StrokeModeSketch):
            return from_stroke_mode(self.sketch)
        return from_cp_sequence(self.sketch)


class GeneratorModel:
    """Sequence VAE parameters for one mode."""
    def __init__(self, config: GeneratorConfig, seed: Union[int, np.random.Generator, None]=0) -> None:
        self.config = config
        self.store = ParamStore(seed)
        self.trained = False
        width = config.step_width
        self.enc_fwd = make_cell(config.cell, self.store, 'enc.fwd', width, config.enc_hidden)
        self.enc_bwd = make_cell(config.cell, self.store, 'enc.bwd', width, config.enc_hidden)
        for name in ['mu', 'logvar']:
            self.store.add(f'latent.{name}.W', (2 * config.enc_hidden, config.latent))
            self.store.add(f'latent.{name}.b', (config.latent, ), 'zeros')
        self.store.add('dec.init.W', (config.latent, config.dec_hidden))
        self.store.add('dec.init.b', (config.dec_hidden, ), 'zeros')
        self.dec = make_cell(config.cell, self.store, 'dec.rnn', width + config.latent, config.dec_hidden)
        self.store.add('dec.out.W', (config.dec_hidden, config.output_width))
        self.store.add('dec.out.b', (config.output_width, ), 'zeros')

    @property
    def mode(self) -> str:
        """'stroke' or 'cp'."""
        return self.config.mode

    def posterior(self, params: Dict[str, Tensor], inputs: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Encode a sequence into the posterior mean and log-variance."""
        _, summary = bidirectional(self.enc_fwd, self.enc_bwd, params, as_tensor(inputs))
        mu = add(matmul(summary, params['latent.mu.W']), params['latent.mu.b'])
        logvar = add(matmul(summary, params['latent.logvar.W']), params['latent.logvar.b'])
        return mu, logvar

    def initial_state(self, params: Dict[str, Tensor], z: Union[Tensor, np.ndarray]) -> Tensor:
        """g_0 = tanh(z W + b)."""
        z = reshape(as_tensor(z), (1, self.config.latent))
        return tanh(add(matmul(z, params['dec.init.W']), params['dec.init.b']))

    def decode(
        self,
        params: Dict[str, Tensor],
        z: Tensor,
        previous: np.ndarray,
        state: Optional[Tensor]=None,
    ) -> Tuple[Tensor, Tensor]:
        """Run the decoder over previous steps, returning output rows and the last state."""
        count = len(previous)
        if state is None:
            state = self.initial_state(params, z)
        tiled = gather(reshape(z, (1, self.config.latent)), [0] * count, axis=0)
        inputs = concatenate([as_tensor(previous), tiled], axis=1)
        states = []
        for i in range(count):
            state = self.dec(params, slice_rows(inputs, i, i + 1), state)
            states.append(state)
        rows = add(matmul(concatenate(states, axis=0), params['dec.out.W']), params['dec.out.b'])
        return rows, state

    def forward(
        self,
        params: Dict[str, Tensor],
        inputs: np.ndarray,
        previous: np.ndarray,
        eps: np.ndarray,
    ) -> ForwardOutput:
        """Encode, sample z = mu + sigma * eps, then decode with teacher forcing."""
        mu, logvar = self.posterior(params, inputs)
        z = add(mu, multiply(exp(scale(logvar, 0.5)), as_tensor(np.reshape(eps, (1, -1)))))
        rows, _ = self.decode(params, z, previous)
        return ForwardOutput(rows, mu, logvar)

    def split_rows(self, rows: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        """Split output rows into mixture logits, means, log-variances and the tail."""
        m = self.config.mixtures
        md = m * self.config.gmm_dim
        return (
            slice_cols(rows, 0, m),
            slice_cols(rows, m, m + md),
            slice_cols(rows, m + md, m + 2 * md),
            slice_cols(rows, m + 2 * md, self.config.output_width),
        )

    def sequences(self, sketch: GenSketch) -> Tuple[np.ndarray, np.ndarray]:
        """Encoder inputs, and the teacher-forced previous step for every decoder step."""
        if isinstance(sketch, StrokeModeSketch):
            if self.mode != 'stroke':
                raise ValueError('A stroke-mode sketch needs a stroke-mode model!')
            if sketch.degree != self.config.degree:
                raise ValueError(f'Sketch has degree {sketch.degree}, the model uses {self.config.degree}!')
            vectors = sketch.vectors()
            previous = np.vstack([np.zeros((1, vectors.shape[1])), vectors[:-1]])
            return vectors, previous
        if self.mode != 'cp':
            raise ValueError('A control-point sketch needs a cp-mode model!')
        padded = sketch.padded(self.config.max_len)
        return np.array(sketch.steps), np.vstack([START_TOKEN, padded[:-1]])


def make_targets(model: GeneratorModel, sketch: GenSketch) -> Targets:
    """The targets for a sketch, matching GeneratorModel.sequences()."""
    if isinstance(sketch, StrokeModeSketch):
        stop = np.zeros(len(sketch))
        stop[-1] = 1.0
        return Targets(sketch.vectors(), stop=stop)
    padded = sketch.padded(model.config.max_len)
    return Targets(np.array(sketch.steps[:, :2]), flags=np.argmax(padded[:, 2:], axis=1))


def gmm_log_likelihood(x: Sequence[float], params: GMMParams) -> float:
    """log sum_m pi_m N(x; mu_m, diag(var_m)), computed with log-sum-exp."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (params.dim, ):
        raise ValueError(f'Point of dimension {x.size} for a {params.dim}-dimensional mixture!')
    diff = x - params.means
    comp = -0.5 * np.sum(diff * diff / params.variances + np.log(params.variances) + LOG_2PI, axis=1)
    with np.errstate(divide='ignore'):
        log_w = np.log(params.weights)
    return float(np_logsumexp(log_w + comp))


def gmm_log_likelihood_rows(
    logits: Tensor,
    means: Tensor,
    log_variances: Tensor,
    targets: np.ndarray,
) -> Tensor:
    """Differentiable mixture log-density for every row. Returns an (N,) tensor.

    means and log_variances are (N, M*D), laid out one component after another.
    """
    count, dim = targets.shape
    mixtures = logits.shape[1]
    if means.shape != (count, mixtures * dim) or log_variances.shape != means.shape:
        raise ValueError(
            f'Mixture outputs {means.shape} do not match {count} targets '
            f'of dimension {dim} with {mixtures} components!'
        )
    sq = squared_difference(means, np.tile(targets, (1, mixtures)))
    per_dim = add(add(multiply(sq, exp(negative(log_variances))), log_variances), LOG_2PI)
    comp = scale(tsum(reshape(per_dim, (count, mixtures, dim)), axis=2), -0.5)
    return logsumexp(add(log_softmax(logits, axis=1), comp), axis=1)


def kl_divergence(mu: Sequence[float], sigma: Sequence[float]) -> float:
    """KL(N(mu, sigma^2) || N(0, I)), averaged over the latent dimensions."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if mu.shape != sigma.shape:
        raise ValueError(f'Shape mismatch: mu {mu.shape}, sigma {sigma.shape}!')
    var = sigma * sigma
    return float(-0.5 * np.mean(1.0 + np.log(var) - mu * mu - var))


def _kl_tensor(mu: Tensor, logvar: Tensor) -> Tensor:
    terms = sub(sub(add(logvar, 1.0), multiply(mu, mu)), exp(logvar))
    return scale(tsum(terms), -0.5 / mu.value.size)


def generator_loss(
    model: GeneratorModel,
    output: ForwardOutput,
    targets: Targets,
    kl_weight: Optional[float]=None,
) -> Tuple[Tensor, LossBreakdown]:
    """The training objective, and its terms.

    Reconstruction and stop/flag terms are normalised by the maximum length.
    The KL term is floored at the free-bits level, below which it carries no
    gradient.
    """
    config = model.config
    if kl_weight is None:
        kl_weight = config.kl_weight
    rows = output.rows
    count = len(targets.values)
    logits, means, logvars, tail = model.split_rows(rows)
    if config.mode == 'stroke':
        if targets.stop is None or len(targets.stop) != count or rows.shape[0] != count:
            raise ValueError(f'{rows.shape[0]} decoder steps for {count} strokes!')
    elif targets.flags is None or len(targets.flags) != rows.shape[0] or count > rows.shape[0]:
        raise ValueError(f'{rows.shape[0]} decoder steps for {count} control points!')
    norm = 1.0 / config.max_len

    real = [slice_rows(part, 0, count) for part in (logits, means, logvars)]
    recon = scale(tsum(gmm_log_likelihood_rows(*real, targets.values)), -norm)

    if config.mode == 'stroke':
        assert targets.stop is not None
        stop_logits = reshape(tail, (count, 1))
        softplus = logsumexp(concatenate([np.zeros((count, 1)), stop_logits], axis=1), axis=1)
        bce = sub(softplus, multiply(reshape(stop_logits, (count, )), targets.stop))
        stop = scale(tsum(bce), norm)
    else:
        assert targets.flags is not None
        picked = index(log_softmax(tail, axis=1), (np.arange(len(targets.flags)), targets.flags))
        stop = scale(tsum(picked), -norm)

    kl = _kl_tensor(output.mu, output.logvar)
    if kl.item() < config.free_bits:
        kl_floor = as_tensor(config.free_bits)
    else:
        kl_floor = kl
    kl_term = scale(kl_floor, kl_weight)
    total = add(add(recon, stop), kl_term)
    return total, LossBreakdown(
        recon.item(), stop.item(), kl.item(), kl_weight, kl_term.item(), total.item(),
    )


def _check_trained(model: GeneratorModel) -> None:
    if not model.trained:
        raise ModelError('Generator has not been trained!')


def vae_encode(model: GeneratorModel, sketch: GenSketch, seed: Optional[SeedLike]=None) -> LatentCode:
    """Encode a sketch into a latent sample. With no seed, z is the posterior mean."""
    if not 1 <= len(sketch) <= model.config.max_len:
        raise ValueError(f'Sketch length {len(sketch)} is outside 1..{model.config.max_len}!')
    inputs, _ = model.sequences(sketch)
    mu, logvar = model.posterior(model.store.bind(None), inputs)
    mu_v = mu.value.reshape(-1)
    sigma = np.exp(0.5 * logvar.value.reshape(-1))
    if seed is None:
        z = mu_v.copy()
    else:
        z = mu_v + sigma * as_rng(seed).standard_normal(len(mu_v))
    return LatentCode(z, mu_v, sigma)


def _step_rows(
    model: GeneratorModel,
    previous: np.ndarray,
    z: np.ndarray,
    state: Optional[np.ndarray],
    width: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Run one decoder step outside any tape."""
    config = model.config
    previous = np.asarray(previous, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if previous.shape != (width, ):
        raise ValueError(f'Previous step has width {previous.size}, expected {width}!')
    if z.shape != (config.latent, ):
        raise ValueError(f'Latent code has width {z.size}, expected {config.latent}!')
    params = model.store.bind(None)
    if state is not None:
        state_t: Optional[Tensor] = as_tensor(np.asarray(state, dtype=np.float64).reshape(1, config.dec_hidden))
    else:
        state_t = None
    rows, new_state = model.decode(params, as_tensor(z), previous.reshape(1, -1), state_t)
    return rows.value[0], new_state.value


def _split_values(model: GeneratorModel, row: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    m = model.config.mixtures
    dim = model.config.gmm_dim
    md = m * dim
    return row[:m], row[m:m + md].reshape(m, dim), row[m + md:m + 2 * md].reshape(m, dim), row[m + 2 * md:]


def decode_step(
    model: GeneratorModel,
    previous: np.ndarray,
    z: np.ndarray,
    state: Optional[np.ndarray]=None,
    temperature: float=1.0,
) -> DecodeStep:
    """One stroke-mode step: the mixture over the next stroke, and the stop probability.

    With no state, the decoder starts from tanh(z W + b).
    """
    if model.mode != 'stroke':
        raise ValueError('decode_step() needs a stroke-mode model!')
    row, new_state = _step_rows(model, previous, z, state, model.config.step_width)
    logits, means, logvars, tail = _split_values(model, row)
    stop = float(_sigmoid_scalar(float(tail[0])))
    return DecodeStep(GMMParams.from_raw(logits, means, logvars, temperature), stop, new_state)


def cp_mode_decode_step(
    model: GeneratorModel,
    previous: np.ndarray,
    z: np.ndarray,
    state: Optional[np.ndarray]=None,
    temperature: float=1.0,
) -> CPDecodeStep:
    """One control-point step: the mixture over the next difference, and flag probabilities."""
    if model.mode != 'cp':
        raise ValueError('cp_mode_decode_step() needs a cp-mode model!')
    row, new_state = _step_rows(model, previous, z, state, 5)
    logits, means, logvars, tail = _split_values(model, row)
    return CPDecodeStep(
        GMMParams.from_raw(logits, means, logvars, temperature),
        np_softmax(tail / temperature),
        new_state,
    )


def _sigmoid_scalar(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def _sample_from(model: GeneratorModel, z: np.ndarray, temperature: float, rng: np.random.Generator) -> Sample:
    """Decode autoregressively from a latent code."""
    config = model.config
    if temperature <= 0.0:
        raise ValueError(f'Temperature must be positive, not {temperature}!')
    state = None
    stopped = False
    if config.mode == 'stroke':
        previous = np.zeros(config.step_width)
        vectors = []
        for _ in range(config.max_len):
            step = decode_step(model, previous, z, state, temperature)
            previous = step.gmm.sample(rng)
            vectors.append(previous)
            state = step.state
            if step.stop > STOP_THRESHOLD:
                stopped = True
                break
        arr = np.array(vectors)
        n2 = 2 * config.degree
        return Sample(StrokeModeSketch(arr[:, :n2], arr[:, n2:]), z, stopped)

    previous = START_TOKEN
    rows = []
    for _ in range(config.max_len):
        cp_step = cp_mode_decode_step(model, previous, z, state, temperature)
        delta = cp_step.gmm.sample(rng)
        flag = int(rng.choice(3, p=cp_step.flags))
        previous = np.zeros(5)
        previous[:2] = delta
        previous[2 + flag] = 1.0
        rows.append(previous)
        state = cp_step.state
        if flag == FLAG_SKETCH_END:
            stopped = True
            break
    steps = np.array(rows)
    # Hitting the cap ends the sketch.
    steps[-1, 2:] = [0.0, 0.0, 1.0]
    return Sample(ControlPointModeSketch(steps), z, stopped)


def sample_unconditional(
    model: GeneratorModel,
    temperature: Optional[float]=None,
    seed: SeedLike=None,
) -> Sample:
    """Draw z from the prior and decode a new sketch."""
    _check_trained(model)
    if temperature is None:
        temperature = model.config.temperature
    rng = as_rng(seed)
    z = rng.standard_normal(model.config.latent)
    return _sample_from(model, z, temperature, rng)


def sample_conditional(
    model: GeneratorModel,
    sketch: GenSketch,
    temperature: Optional[float]=None,
    seed: SeedLike=None,
) -> Sample:
    """Encode a sketch, then decode a new one from its latent sample."""
    _check_trained(model)
    if len(sketch) > model.config.max_len:
        raise ValueError(f'Input of {len(sketch)} steps exceeds the maximum {model.config.max_len}!')
    if temperature is None:
        temperature = model.config.temperature
    rng = as_rng(seed)
    latent = vae_encode(model, sketch, rng)
    return _sample_from(model, latent.z, temperature, rng)


def _convert(model: GeneratorModel, sketch: EncodedSketch) -> GenSketch:
    if model.mode == 'stroke':
        return to_stroke_mode(sketch, model.config.degree)
    return build_cp_sequence(sketch)


@attr.frozen(eq=False)
class _ExampleGrads:
    breakdown: LossBreakdown
    grads: Dict[str, np.ndarray]


def _example_grads(
    model: GeneratorModel,
    sketch: GenSketch,
    eps: np.ndarray,
    kl_weight: float,
) -> _ExampleGrads:
    inputs, previous = model.sequences(sketch)
    targets = make_targets(model, sketch)
    with Tape() as tape:
        params = model.store.bind(tape)
        total, breakdown = generator_loss(model, model.forward(params, inputs, previous, eps), targets, kl_weight)
    if not total.is_finite:
        return _ExampleGrads(breakdown, {})
    tape.backward(total)
    return _ExampleGrads(breakdown, {name: tape.grad(leaf) for name, leaf in params.items()})


def train_generator(
    dataset: Sequence[EncodedSketch],
    config: GeneratorConfig,
    seed: int,
    *,
    workers: int=1,
    checkpoint_path: Union[str, 'os.PathLike[str]', None]=None,
    on_epoch: Optional[Callable[[int, GeneratorModel, LossBreakdown], None]]=None,
) -> Tuple[GeneratorModel, GeneratorHistory]:
    """Train a generator on encoded sketches.

    Sketches longer than the maximum length are skipped. Each epoch jitters
    the control points by config.augment_scale. Noise for each example comes
    from a generator seeded by (seed, epoch, index), so results do not
    depend on the worker count.
    """
    if not dataset:
        raise ValueError('Cannot train on an empty dataset!')
    model = GeneratorModel(config, np.random.default_rng([seed, 0x6E6]))
    history = GeneratorHistory()

    kept: List[EncodedSketch] = []
    for sketch in dataset:
        if len(_convert(model, sketch)) > config.max_len:
            history.skipped += 1
        else:
            kept.append(sketch)
    if history.skipped:
        LOGGER.warning('Skipped {} sketch(es) longer than {} steps.', history.skipped, config.max_len)
    if not kept:
        raise ValueError(f'No sketch fits within {config.max_len} steps!')

    batches_per_epoch = math.ceil(len(kept) / config.batch_size)
    warmup = max(1, round(WARMUP_FRACTION * batches_per_epoch * config.epochs))
    LOGGER.info(
        'Training {}-mode generator on {} sketches: Nz={}, Hd={}, M={}, Nmax={}',
        config.mode, len(kept), config.latent, config.dec_hidden, config.mixtures, config.max_len,
    )
    order_rng = np.random.default_rng([seed, 0x5EED])
    store = model.store

    def prepare(epoch: int, idx: int) -> Tuple[GenSketch, np.ndarray]:
        rng = np.random.default_rng([seed, epoch, idx])
        sketch = kept[idx]
        if config.augment_scale > 0.0:
            sketch = augment_control_points(sketch, rng, config.augment_scale)
        return _convert(model, sketch), rng.standard_normal(config.latent)

    for epoch in range(1, config.epochs + 1):
        with logger.context(f'epoch {epoch}'):
            sums = np.zeros(4)
            last: Optional[LossBreakdown] = None
            for batch in partition(list(order_rng.permutation(len(kept))), config.batch_size):
                kl_weight = config.kl_weight * min(1.0, store.step_count / warmup)
                examples = [prepare(epoch, int(idx)) for idx in batch]
                results = map_ordered(
                    lambda ex: _example_grads(model, ex[0], ex[1], kl_weight),
                    examples, workers,
                )
                for idx, res in zip(batch, results):
                    loss = res.breakdown
                    if not math.isfinite(loss.total):
                        raise NumericError(
                            f'Non-finite loss on sketch {idx} in epoch {epoch}: '
                            f'recon={loss.recon}, stop={loss.stop}, kl={loss.kl}'
                        )
                    store.accumulate(res.grads, 1.0 / len(batch))
                    sums += (loss.recon, loss.stop, loss.kl, loss.total)
                    last = loss
                if config.optimizer == 'adam':
                    store.adam_step(config.lr, clip=config.clip)
                else:
                    store.sgd_step(config.lr, clip=config.clip)
            means = sums / len(kept)
            history.recon.append(float(means[0]))
            history.stop.append(float(means[1]))
            history.kl.append(float(means[2]))
            history.total.append(float(means[3]))
            LOGGER.info(
                'recon={:.5g} stop={:.5g} kl={:.5g} total={:.5g}',
                history.recon[-1], history.stop[-1], history.kl[-1], history.total[-1],
            )
            model.trained = True
            if checkpoint_path is not None:
                save_model(model, checkpoint_path, {'epoch': epoch})
            if on_epoch is not None and last is not None:
                on_epoch(epoch, model, last)
    history.aborted_steps = store.aborted_steps
    return model, history


def checkpoint_mode(config: GeneratorConfig) -> str:
    """The checkpoint tag for a generator config."""
    return f'generator-{config.mode}'


def save_model(
    model: GeneratorModel,
    path: Union[str, 'os.PathLike[str]'],
    metadata: Optional[Dict[str, object]]=None,
) -> None:
    """Write the generator and its optimiser state to a checkpoint."""
    meta = dict(metadata or {})
    meta['config'] = attr.asdict(model.config)
    meta['trained'] = model.trained
    meta['step_count'] = model.store.step_count
    save_checkpoint(path, Checkpoint(
        checkpoint_mode(model.config), model.config.content_hash(), meta, model.store.state_dict(),
    ))


def load_model(path: Union[str, 'os.PathLike[str]'], expected_hash: Optional[str]=None) -> GeneratorModel:
    """Load a generator checkpoint of either mode."""
    ckpt = load_checkpoint(path, expected_hash)
    try:
        config = GeneratorConfig(**ckpt.metadata['config'])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f'Checkpoint "{path}" has an invalid generator config: {exc}') from None
    if ckpt.mode != checkpoint_mode(config):
        raise CheckpointError(f'Checkpoint "{path}" holds a "{ckpt.mode}" model, not a generator!')
    if config.content_hash() != ckpt.config_hash:
        raise CheckpointError(f'Checkpoint "{path}" config does not match its hash!')
    model = GeneratorModel(config)
    try:
        model.store.load_state_dict(ckpt.tensors, int(ckpt.metadata.get('step_count', 0)))
    except ValueError as exc:
        raise CheckpointError(f'Checkpoint "{path}": {exc}') from None
    model.trained = bool(ckpt.metadata.get('trained', True))
    return model
