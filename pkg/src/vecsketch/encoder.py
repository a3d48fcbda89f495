"""The learned one-shot stroke encoder.

A bidirectional recurrent network reads a normalised stroke. Its final
state feeds one head per degree predicting successive control point
differences, so P_0 stays pinned at the origin. Its per-step states feed a
second head per degree predicting the parameter of each point: increments
for steps 2..N are softmax-normalised across the stroke and summed, giving
parameters that start at 0, end at 1 and never decrease.

Training only needs the strokes themselves. The curve each head predicts is
rendered at the predicted parameters and compared with the input points.
"""
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np

from vecsketch import VecSketchError, partition
from vecsketch import logger
from vecsketch.autodiff import (
    NumericError, ParamStore, Tape, Tensor, as_tensor, add, bernstein_basis,
    bidirectional, concatenate, cumsum, make_cell, map_ordered, matmul,
    reshape, scale, slice_rows, softmax, squared_difference, sum as tsum,
)
from vecsketch.bezier import MAX_DEGREE, ControlPolygon, EncodedStroke, ParamVector
from vecsketch.checkpoint import Checkpoint, CheckpointError, load as load_checkpoint, save as save_checkpoint
from vecsketch.config import Config
from vecsketch.sketch import EncodedSketch, Stroke, StrokeSequence, normalize_stroke, split_stroke

LOGGER = logger.get_logger(__name__)
CHECKPOINT_MODE = 'encoder'
# Stroke-mode generation works on one fixed degree.
FIXED_DEGREE = 9

__all__ = [
    'ModelError', 'EncoderConfig', 'EncoderModel', 'DegreeOutput', 'FitResult',
    'TrainHistory', 'LossTerms',
    'encode_stroke', 'reconstruction_loss', 'smoothness_penalty', 'total_loss',
    'train_encoder', 'select_degree', 'embed_sketch', 'evaluate_encoder',
    'save_model', 'load_model',
]


class ModelError(VecSketchError, RuntimeError):
    """A model was used in a way it does not support."""
    category = 'model'


def _positive(inst: object, at: 'attr.Attribute[int]', value: float) -> None:
    if value <= 0:
        raise ValueError(f'{at.name} must be positive, not {value}!')


def _nonneg(inst: object, at: 'attr.Attribute[float]', value: float) -> None:
    if value < 0:
        raise ValueError(f'{at.name} must be nonnegative, not {value}!')


@attr.frozen
class EncoderConfig:
    """Encoder architecture and training settings."""
    hidden: int = attr.ib(default=256, validator=_positive)
    min_degree: int = attr.ib(default=3, validator=_positive)
    max_degree: int = attr.ib(default=9)
    beta: float = attr.ib(default=1e-3, validator=_nonneg)
    tolerance: float = attr.ib(default=1e-3, validator=_nonneg)
    cell: str = attr.ib(default='gru', validator=attr.validators.in_(['gru', 'tanh']))
    delta_features: bool = True
    max_len: int = attr.ib(default=128, validator=_positive)
    optimizer: str = attr.ib(default='adam', validator=attr.validators.in_(['adam', 'sgd']))
    lr: float = attr.ib(default=1e-3, validator=_positive)
    clip: float = attr.ib(default=1.0, validator=_positive)
    epochs: int = attr.ib(default=20, validator=_positive)
    batch_size: int = attr.ib(default=16, validator=_positive)

    @max_degree.validator
    def _check_degrees(self, at: 'attr.Attribute[int]', value: int) -> None:
        if value < self.min_degree:
            raise ValueError(f'Degree range {self.min_degree}..{value} is empty!')
        if value > MAX_DEGREE:
            raise ValueError(f'Degree {value} is above the supported maximum {MAX_DEGREE}!')

    @property
    def degrees(self) -> range:
        """Every degree the encoder predicts."""
        return range(self.min_degree, self.max_degree + 1)

    def content_hash(self) -> str:
        """A stable digest of these settings, stored in checkpoints."""
        text = json.dumps(attr.asdict(self), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(text.encode('utf8')).hexdigest()

    @classmethod
    def from_config(cls, conf: Config) -> 'EncoderConfig':
        """Read the encoder_* options."""
        return cls(
            hidden=conf.get(int, 'encoder_hidden'),
            min_degree=conf.get(int, 'min_degree'),
            max_degree=conf.get(int, 'max_degree'),
            beta=conf.get(float, 'beta'),
            tolerance=conf.get(float, 'tolerance'),
            cell=conf.get(str, 'cell'),
            delta_features=conf.get(bool, 'delta_features'),
            max_len=conf.get(int, 'max_stroke_len'),
            optimizer=conf.get(str, 'optimizer'),
            lr=conf.get(float, 'encoder_lr'),
            clip=conf.get(float, 'clip'),
            epochs=conf.get(int, 'encoder_epochs'),
            batch_size=conf.get(int, 'batch_size'),
        )


@attr.frozen(eq=False)
class DegreeOutput:
    """The raw predictions of one degree head, as tensors."""
    poly: Tensor  # (n+1, 2)
    params: Tensor  # (N, 1)


@attr.frozen(eq=False)
class FitResult:
    """The encoding of one stroke at every degree."""
    polygons: Dict[int, ControlPolygon]
    params: Dict[int, ParamVector]
    losses: Dict[int, float]
    n_points: int
    selected: int

    def per_point(self, degree: int) -> float:
        """The loss of this degree, divided by the point count."""
        return self.losses[degree] / self.n_points

    def encoded(self, stroke: Stroke, degree: Optional[int]=None) -> EncodedStroke:
        """Place the chosen curve at the stroke's offset."""
        if degree is None:
            degree = self.selected
        return EncodedStroke(self.polygons[degree], stroke.offset, self.losses[degree])


@attr.frozen(eq=False)
class LossTerms:
    """The total loss tensor, and its parts as plain floats."""
    total: Tensor
    recon: Dict[int, float]
    smooth: Dict[int, float]


@attr.define
class TrainHistory:
    """Losses recorded during training."""
    epoch_loss: List[float] = attr.Factory(list)
    degree_loss: List[Dict[int, float]] = attr.Factory(list)
    step_loss: List[float] = attr.Factory(list)
    aborted_steps: int = 0

    def as_dict(self) -> Dict[str, object]:
        """A JSON-compatible form."""
        return {
            'epoch_loss': self.epoch_loss,
            'degree_loss': [{str(n): v for n, v in rec.items()} for rec in self.degree_loss],
            'step_loss': self.step_loss,
            'aborted_steps': self.aborted_steps,
        }


class EncoderModel:
    """Recurrent encoder parameters, with one head pair per degree."""
    def __init__(self, config: EncoderConfig, seed: Union[int, np.random.Generator, None]=0) -> None:
        self.config = config
        self.store = ParamStore(seed)
        self.trained = False
        width = 4 if config.delta_features else 2
        hidden = config.hidden
        self.fwd = make_cell(config.cell, self.store, 'rnn.fwd', width, hidden)
        self.bwd = make_cell(config.cell, self.store, 'rnn.bwd', width, hidden)
        for n in config.degrees:
            self.store.add(f'head{n}.points.W', (2 * hidden, 2 * n))
            self.store.add(f'head{n}.points.b', (2 * n, ), 'zeros')
            self.store.add(f'head{n}.params.W', (2 * hidden, 1))
            self.store.add(f'head{n}.params.b', (1, ), 'zeros')

    def features(self, points: np.ndarray) -> np.ndarray:
        """Per-step inputs: the point, and optionally the step from the previous point."""
        points = np.asarray(points, dtype=np.float64)
        if not self.config.delta_features:
            return points
        return np.hstack([points, np.diff(points, axis=0, prepend=points[:1])])

    def forward(self, params: Dict[str, Tensor], points: np.ndarray) -> Dict[int, DegreeOutput]:
        """Predict the polygon and parameters of every degree."""
        count = len(points)
        per_step, summary = bidirectional(self.fwd, self.bwd, params, as_tensor(self.features(points)))
        outputs = {}
        for n in self.config.degrees:
            deltas = add(matmul(summary, params[f'head{n}.points.W']), params[f'head{n}.points.b'])
            poly = concatenate([np.zeros((1, 2)), cumsum(reshape(deltas, (n, 2)), axis=0)], axis=0)
            logits = add(matmul(per_step, params[f'head{n}.params.W']), params[f'head{n}.params.b'])
            steps = softmax(slice_rows(logits, 1, count), axis=0)
            t = concatenate([np.zeros((1, 1)), cumsum(steps, axis=0)], axis=0)
            outputs[n] = DegreeOutput(poly, t)
        return outputs

    def check_stroke(self, stroke: Stroke) -> None:
        """Verify a stroke is a valid input."""
        if not stroke.is_normalized:
            raise ValueError(f'Stroke must start at the origin, not {stroke.points[0].tolist()}!')
        if not 2 <= len(stroke) <= self.config.max_len:
            raise ValueError(f'Stroke length {len(stroke)} is outside 2..{self.config.max_len}!')


def reconstruction_loss(
    poly: Union[Tensor, ControlPolygon],
    params: Union[Tensor, ParamVector],
    points: np.ndarray,
) -> Tensor:
    """Sum of squared distances between the curve at each parameter and each point."""
    if isinstance(poly, ControlPolygon):
        poly = as_tensor(poly.points)
    if isinstance(params, ParamVector):
        params = as_tensor(params.values.reshape(-1, 1))
    points = np.asarray(points, dtype=np.float64)
    if params.value.size != len(points):
        raise ValueError(f'{params.value.size} parameters for {len(points)} points!')
    curve = matmul(bernstein_basis(reshape(params, (-1, 1)), poly.shape[0] - 1), poly)
    return tsum(squared_difference(curve, points))


def smoothness_penalty(poly: Union[Tensor, ControlPolygon]) -> Tensor:
    """Sum of squared gaps between consecutive control points."""
    if isinstance(poly, ControlPolygon):
        poly = as_tensor(poly.points)
    count = poly.shape[0]
    return tsum(squared_difference(slice_rows(poly, 1, count), slice_rows(poly, 0, count - 1)))


def total_loss(outputs: Dict[int, DegreeOutput], points: np.ndarray, config: EncoderConfig) -> LossTerms:
    """Sum the reconstruction and weighted smoothness losses over every degree."""
    recon: Dict[int, float] = {}
    smooth: Dict[int, float] = {}
    total: Optional[Tensor] = None
    for n in config.degrees:
        try:
            out = outputs[n]
        except KeyError:
            raise ValueError(f'No prediction for degree {n}!') from None
        rec = reconstruction_loss(out.poly, out.params, points)
        reg = smoothness_penalty(out.poly)
        recon[n] = rec.item()
        smooth[n] = reg.item()
        term = add(rec, scale(reg, config.beta))
        total = term if total is None else add(total, term)
    assert total is not None
    return LossTerms(total, recon, smooth)


def select_degree(fit: FitResult, tolerance: float=1e-3) -> int:
    """The smallest degree whose per-point loss is within tolerance, else the largest."""
    degrees = sorted(fit.losses)
    for n in degrees:
        if fit.losses[n] / fit.n_points <= tolerance:
            return n
    return degrees[-1]


def encode_stroke(model: EncoderModel, stroke: Stroke) -> FitResult:
    """Encode a normalised stroke at every degree, in one forward pass."""
    model.check_stroke(stroke)
    outputs = model.forward(model.store.bind(None), stroke.points)
    polygons = {}
    params = {}
    losses = {}
    for n, out in outputs.items():
        polygons[n] = ControlPolygon(out.poly.value)
        params[n] = ParamVector.from_cumulative(out.params.value)
        losses[n] = reconstruction_loss(polygons[n], params[n], stroke.points).item()
    fit = FitResult(polygons, params, losses, len(stroke), model.config.max_degree)
    return attr.evolve(fit, selected=select_degree(fit, model.config.tolerance))


@attr.frozen(eq=False)
class _ExampleGrads:
    loss: float
    recon: Dict[int, float]
    grads: Dict[str, np.ndarray]


def _example_grads(model: EncoderModel, points: np.ndarray) -> _ExampleGrads:
    """Forward and backward for one stroke, on its own tape."""
    with Tape() as tape:
        params = model.store.bind(tape)
        terms = total_loss(model.forward(params, points), points, model.config)
    if not terms.total.is_finite:
        return _ExampleGrads(terms.total.item(), terms.recon, {})
    tape.backward(terms.total)
    return _ExampleGrads(
        terms.total.item(), terms.recon,
        {name: tape.grad(leaf) for name, leaf in params.items()},
    )


def train_encoder(
    strokes: Sequence[Stroke],
    config: EncoderConfig,
    seed: int,
    *,
    synthetic: int=0,
    workers: int=1,
    checkpoint_path: Union[str, 'os.PathLike[str]', None]=None,
    on_step: Optional[Callable[[int, EncoderModel, float], None]]=None,
) -> Tuple[EncoderModel, TrainHistory]:
    """Train an encoder on normalised strokes.

    If synthetic is nonzero, that many random Bézier strokes are added to the
    data. Each minibatch fans out over workers, and gradients are summed in
    batch order so results do not depend on the worker count. on_step is
    called after every update with the step number, model and batch loss.
    """
    from vecsketch.synthetic import random_strokes

    if not strokes and not synthetic:
        raise ValueError('Cannot train on an empty dataset!')
    init_seed, shuffle_seed, synth_seed = np.random.SeedSequence(seed).spawn(3)
    model = EncoderModel(config, np.random.default_rng(init_seed))
    for i, stroke in enumerate(strokes):
        try:
            model.check_stroke(stroke)
        except ValueError as exc:
            raise ValueError(f'Stroke {i}: {exc}') from None

    data: List[np.ndarray] = []
    if synthetic:
        data.extend(
            item.stroke.points for item in
            random_strokes(synthetic, list(config.degrees), (8, min(64, config.max_len)), np.random.default_rng(synth_seed))
        )
    data.extend(stroke.points for stroke in strokes)
    LOGGER.info(
        'Training encoder on {} strokes ({} synthetic), degrees {}..{}, h={}',
        len(data), synthetic, config.min_degree, config.max_degree, config.hidden,
    )

    rng = np.random.default_rng(shuffle_seed)
    history = TrainHistory()
    store = model.store
    for epoch in range(1, config.epochs + 1):
        with logger.context(f'epoch {epoch}'):
            order = rng.permutation(len(data))
            total = 0.0
            degree_sums = {n: 0.0 for n in config.degrees}
            for batch in partition(list(order), config.batch_size):
                results = map_ordered(lambda i: _example_grads(model, data[i]), batch, workers)
                batch_loss = 0.0
                for i, res in zip(batch, results):
                    if not np.isfinite(res.loss):
                        raise NumericError(
                            f'Non-finite loss {res.loss} on stroke {i} '
                            f'(length {len(data[i])}) in epoch {epoch}!'
                        )
                    store.accumulate(res.grads, 1.0 / len(batch))
                    batch_loss += res.loss
                    for n, value in res.recon.items():
                        degree_sums[n] += value / len(data[i])
                if config.optimizer == 'adam':
                    store.adam_step(config.lr, clip=config.clip)
                else:
                    store.sgd_step(config.lr, clip=config.clip)
                total += batch_loss
                history.step_loss.append(batch_loss / len(batch))
                if on_step is not None:
                    on_step(store.step_count, model, batch_loss / len(batch))
            history.epoch_loss.append(total / len(data))
            history.degree_loss.append({n: v / len(data) for n, v in degree_sums.items()})
            LOGGER.info(
                'loss={:.6g}, per-point L_{}={:.3g}',
                history.epoch_loss[-1], config.min_degree,
                history.degree_loss[-1][config.min_degree],
            )
            if checkpoint_path is not None:
                model.trained = True
                save_model(model, checkpoint_path, {'epoch': epoch})
    history.aborted_steps = store.aborted_steps
    model.trained = True
    return model, history


def evaluate_encoder(model: EncoderModel, strokes: Sequence[Stroke]) -> Dict[int, List[float]]:
    """Per-point losses of every stroke, for each degree."""
    result: Dict[int, List[float]] = {n: [] for n in model.config.degrees}
    for stroke in strokes:
        fit = encode_stroke(model, stroke)
        for n in result:
            result[n].append(fit.per_point(n))
    return result


def save_model(
    model: EncoderModel,
    path: Union[str, 'os.PathLike[str]'],
    metadata: Optional[Dict[str, object]]=None,
) -> None:
    """Write the encoder and its optimiser state to a checkpoint."""
    meta = dict(metadata or {})
    meta['config'] = attr.asdict(model.config)
    meta['trained'] = model.trained
    meta['step_count'] = model.store.step_count
    save_checkpoint(path, Checkpoint(
        CHECKPOINT_MODE, model.config.content_hash(), meta, model.store.state_dict(),
    ))


def load_model(path: Union[str, 'os.PathLike[str]'], expected_hash: Optional[str]=None) -> EncoderModel:
    """Load an encoder checkpoint."""
    ckpt = load_checkpoint(path, expected_hash, mode=CHECKPOINT_MODE)
    try:
        config = EncoderConfig(**ckpt.metadata['config'])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f'Checkpoint "{path}" has an invalid config: {exc}') from None
    if config.content_hash() != ckpt.config_hash:
        raise CheckpointError(f'Checkpoint "{path}" config does not match its hash!')
    model = EncoderModel(config)
    try:
        model.store.load_state_dict(ckpt.tensors, int(ckpt.metadata.get('step_count', 0)))
    except ValueError as exc:
        raise CheckpointError(f'Checkpoint "{Path(path)}": {exc}') from None
    model.trained = bool(ckpt.metadata.get('trained', True))
    return model


def embed_sketch(
    model: EncoderModel,
    sequence: StrokeSequence,
    mode: str='multi',
    fixed_degree: int=FIXED_DEGREE,
) -> EncodedSketch:
    """Encode every stroke of a sketch, keeping each stroke's offset.

    In 'multi' mode each stroke gets the degree chosen by select_degree(). In
    'fixed' mode every stroke uses fixed_degree. Strokes longer than the
    encoder accepts are cut into pieces first.
    """
    if not model.trained:
        raise ModelError('Encoder has not been trained!')
    if mode not in ('multi', 'fixed'):
        raise ValueError(f'Unknown embedding mode "{mode}"!')
    if mode == 'fixed' and fixed_degree not in model.config.degrees:
        raise ModelError(
            f'Degree {fixed_degree} is not predicted by this encoder '
            f'({model.config.min_degree}..{model.config.max_degree})!'
        )
    encoded = []
    for stroke in sequence.strokes:
        # pi never counts as a bend, so this only cuts by length.
        for piece in split_stroke(stroke, model.config.max_len, math.pi):
            piece = normalize_stroke(piece)
            fit = encode_stroke(model, piece)
            encoded.append(fit.encoded(piece, fixed_degree if mode == 'fixed' else None))
    return EncodedSketch(encoded, sequence.category, sequence.raw_length)
