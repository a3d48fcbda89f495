"""Test the learned stroke encoder."""
import math
from pathlib import Path

import attr
import numpy as np
import pytest

from vecsketch import autodiff as ad
from vecsketch.bezier import ControlPolygon, ParamVector, eval_many
from vecsketch.checkpoint import CheckpointError
from vecsketch.encoder import (
    EncoderConfig, EncoderModel, FitResult, ModelError, embed_sketch,
    encode_stroke, evaluate_encoder, load_model, reconstruction_loss,
    save_model, select_degree, smoothness_penalty, total_loss, train_encoder,
)
from vecsketch.sketch import Stroke, normalize_stroke
from vecsketch.synthetic import random_strokes
from helpers import ARCH, assert_points, curve_stroke, line_stroke, sequence

SMALL = EncoderConfig(hidden=4, min_degree=3, max_degree=5, epochs=2, batch_size=4)


def test_config_validation() -> None:
    """Degree ranges and weights are checked."""
    with pytest.raises(ValueError):
        EncoderConfig(min_degree=0)
    with pytest.raises(ValueError):
        EncoderConfig(min_degree=5, max_degree=4)
    with pytest.raises(ValueError):
        EncoderConfig(max_degree=13)
    with pytest.raises(ValueError):
        EncoderConfig(beta=-1.0)
    with pytest.raises(ValueError):
        EncoderConfig(cell='lstm')
    assert list(EncoderConfig().degrees) == [3, 4, 5, 6, 7, 8, 9]
    assert EncoderConfig().content_hash() == EncoderConfig().content_hash()
    assert EncoderConfig().content_hash() != EncoderConfig(beta=0.0).content_hash()


@pytest.mark.parametrize('cell', ['gru', 'tanh'])
def test_untrained_structure(cell: str) -> None:
    """Any parameters give valid curve parameters and a pinned start."""
    model = EncoderModel(attr.evolve(SMALL, cell=cell), seed=3)
    stroke = normalize_stroke(Stroke(np.random.default_rng(4).normal(size=(17, 2))))
    fit = encode_stroke(model, stroke)
    assert sorted(fit.polygons) == [3, 4, 5]
    for n in [3, 4, 5]:
        assert fit.polygons[n].degree == n
        assert fit.polygons[n].points[0].tolist() == [0.0, 0.0]
        t = fit.params[n].values
        assert len(t) == 17
        assert t[0] == 0.0
        assert t[-1] == 1.0
        assert np.all(np.diff(t) >= 0.0)
        assert fit.losses[n] >= 0.0
    assert fit.selected in (3, 4, 5)


def test_two_point_stroke() -> None:
    """The shortest strokes still encode."""
    fit = encode_stroke(EncoderModel(SMALL), Stroke([(0, 0), (1, 0)]))
    assert fit.params[3].values.tolist() == [0.0, 1.0]


def test_stroke_checks() -> None:
    """Strokes must start at the origin and fit the length limit."""
    model = EncoderModel(attr.evolve(SMALL, max_len=10))
    with pytest.raises(ValueError):
        encode_stroke(model, Stroke([(1, 1), (2, 2)]))
    with pytest.raises(ValueError):
        encode_stroke(model, line_stroke(11))


def test_reconstruction_loss() -> None:
    """Squared distances between the curve and the points."""
    t = ParamVector([0.0, 0.25, 0.5, 1.0])
    points = eval_many(ARCH, t.values)
    assert reconstruction_loss(ARCH, t, points).item() == pytest.approx(0.0, abs=1e-24)
    moved = points.copy()
    moved[1, 0] += 0.1
    assert reconstruction_loss(ARCH, t, moved).item() == pytest.approx(0.01)
    with pytest.raises(ValueError):
        reconstruction_loss(ARCH, t, points[:3])


def test_reconstruction_matches_bezier() -> None:
    """The tensor loss agrees with plain curve evaluation."""
    rng = np.random.default_rng(8)
    poly = ControlPolygon(rng.normal(size=(6, 2)))
    t = ParamVector.from_cumulative(np.sort(rng.random(12)))
    points = rng.normal(size=(12, 2))
    expected = float(np.sum((eval_many(poly, t.values) - points) ** 2))
    assert reconstruction_loss(poly, t, points).item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize('points, expected', [
    ([(1, 1), (1, 1), (1, 1)], 0.0),
    ([(0, 0), (1, 0)], 1.0),
    ([(0, 0), (1, 0), (1, 1)], 2.0),
])
def test_smoothness_penalty(points, expected: float) -> None:
    """Sum of squared gaps."""
    assert smoothness_penalty(ControlPolygon(points)).item() == expected


def test_total_loss() -> None:
    """The total is the termwise sum over degrees."""
    model = EncoderModel(SMALL, seed=1)
    points = curve_stroke(ARCH, 9).points
    outputs = model.forward(model.store.bind(), points)
    terms = total_loss(outputs, points, SMALL)
    manual = sum(
        reconstruction_loss(out.poly, out.params, points).item()
        + SMALL.beta * smoothness_penalty(out.poly).item()
        for out in outputs.values()
    )
    assert terms.total.item() == pytest.approx(manual, rel=1e-12)
    assert sorted(terms.recon) == [3, 4, 5]

    no_reg = total_loss(outputs, points, attr.evolve(SMALL, beta=0.0))
    assert no_reg.total.item() == pytest.approx(sum(terms.recon.values()), rel=1e-12)

    single = attr.evolve(SMALL, min_degree=3, max_degree=3)
    one = total_loss(outputs, points, single)
    assert one.total.item() == pytest.approx(terms.recon[3] + SMALL.beta * terms.smooth[3], rel=1e-12)

    del outputs[4]
    with pytest.raises(ValueError):
        total_loss(outputs, points, SMALL)


@pytest.mark.parametrize('delta_features', [True, False])
def test_loss_gradient(delta_features: bool) -> None:
    """The encoder loss gradient matches finite differences on a 6-point stroke."""
    config = attr.evolve(SMALL, max_degree=4, delta_features=delta_features)
    model = EncoderModel(config, seed=2)
    points = normalize_stroke(Stroke(np.random.default_rng(9).normal(size=(6, 2)))).points

    # Softmax ignores a shared shift, so the step biases have no gradient.
    fixed = {
        name: ad.as_tensor(value) for name, value in model.store.params.items()
        if name.endswith('.params.b')
    }
    free = {name: value for name, value in model.store.params.items() if name not in fixed}

    def loss(params):
        return total_loss(model.forward({**fixed, **params}, points), points, config).total

    assert ad.check_gradients(loss, free) < 1e-4


def fit_with_losses(losses, n_points: int=1) -> FitResult:
    return FitResult({}, {}, dict(losses), n_points, max(losses))


def test_select_degree() -> None:
    """The lowest degree within tolerance wins, else the highest."""
    assert select_degree(fit_with_losses({3: 1e-4, 4: 5e-5, 5: 1e-6}), 1e-3) == 3
    assert select_degree(fit_with_losses({n: 1.0 for n in range(3, 10)}), 1e-3) == 9
    assert select_degree(fit_with_losses({3: 2e-3, 4: 9e-4, 5: 1e-4}), 1e-3) == 4
    # Losses are compared per point.
    assert select_degree(fit_with_losses({3: 2e-3, 4: 9e-4}, n_points=2), 1e-3) == 3


def test_train_deterministic() -> None:
    """Training twice with one seed gives the same losses and weights."""
    strokes = [item.stroke for item in random_strokes(6, [3], (8, 12), 5)]
    first, hist1 = train_encoder(strokes, SMALL, 7)
    second, hist2 = train_encoder(strokes, SMALL, 7)
    assert hist1.step_loss == hist2.step_loss
    assert len(hist1.epoch_loss) == 2
    assert len(hist1.step_loss) == 4
    for name in first.store:
        assert first.store[name].tobytes() == second.store[name].tobytes()
    assert first.trained


def test_train_workers_match() -> None:
    """The worker count does not change the result."""
    strokes = [item.stroke for item in random_strokes(5, [3, 4], (6, 10), 1)]
    _, single = train_encoder(strokes, SMALL, 3, workers=1)
    _, threaded = train_encoder(strokes, SMALL, 3, workers=3)
    assert single.step_loss == threaded.step_loss


def test_train_errors() -> None:
    """Empty and invalid datasets are rejected."""
    with pytest.raises(ValueError):
        train_encoder([], SMALL, 0)
    with pytest.raises(ValueError):
        train_encoder([Stroke([(1, 1), (2, 2)])], SMALL, 0)


def test_train_synthetic_only() -> None:
    """Synthetic strokes can be the whole dataset."""
    steps = []
    _, hist = train_encoder(
        [], attr.evolve(SMALL, epochs=1), 0, synthetic=8,
        on_step=lambda step, model, loss: steps.append(step),
    )
    assert steps == [1, 2]
    assert len(hist.epoch_loss) == 1


def test_checkpoint(tmp_path: Path) -> None:
    """Models round trip through checkpoints, which check their config."""
    path = tmp_path / 'encoder.vskc'
    strokes = [line_stroke(5), curve_stroke(ARCH, 7)]
    model, _ = train_encoder(strokes, SMALL, 1, checkpoint_path=path)
    assert path.exists()
    loaded = load_model(path, SMALL.content_hash())
    assert loaded.config == SMALL
    assert loaded.trained
    for name in model.store:
        assert loaded.store[name].tolist() == model.store[name].tolist()
    fit1 = encode_stroke(model, strokes[1])
    fit2 = encode_stroke(loaded, strokes[1])
    assert fit1.losses == fit2.losses

    with pytest.raises(CheckpointError):
        load_model(path, attr.evolve(SMALL, beta=0.5).content_hash())

    # Same bytes for the same model.
    again = tmp_path / 'again.vskc'
    save_model(model, again, {'epoch': 2})
    assert again.read_bytes() == path.read_bytes()


def test_embed_sketch() -> None:
    """Every stroke becomes a curve at its offset."""
    model = EncoderModel(attr.evolve(SMALL, max_degree=9, max_len=8), seed=4)
    strokes = [
        Stroke([(0, 0), (1, 0), (2, 1)], (3, 4)),
        Stroke([(0, 0), (0, 1)], (5, 5)),
        curve_stroke(ARCH, 6),
    ]
    seq = sequence(*strokes, category='cat')
    with pytest.raises(ModelError):
        embed_sketch(model, seq)
    model.trained = True

    encoded = embed_sketch(model, seq, 'multi')
    assert len(encoded) == 3
    assert encoded.category == 'cat'
    assert encoded.raw_length == 11
    assert [s.offset.tolist() for s in encoded] == [[3, 4], [5, 5], [0, 0]]
    for stroke in encoded:
        assert 3 <= stroke.degree <= 9
        assert stroke.poly.points[0].tolist() == [0, 0]

    fixed = embed_sketch(model, seq, 'fixed')
    assert [s.degree for s in fixed] == [9, 9, 9]
    with pytest.raises(ModelError):
        embed_sketch(model, seq, 'fixed', 12)
    with pytest.raises(ValueError):
        embed_sketch(model, seq, 'other')

    # Long strokes are cut by length, with offsets moving along.
    long = embed_sketch(model, sequence(line_stroke(15, (14, 0))), 'multi')
    assert len(long) == 2
    assert [s.offset.tolist() for s in long] == [[0, 0], [7, 0]]


def test_translation_invariant() -> None:
    """Moving a stroke only changes its offset."""
    model = EncoderModel(SMALL, seed=6)
    model.trained = True
    stroke = curve_stroke(ARCH, 9)
    moved = normalize_stroke(Stroke(stroke.points + [40.0, -3.0]))
    first = embed_sketch(model, sequence(stroke))
    second = embed_sketch(model, sequence(moved))
    assert_points(first.strokes[0].poly.points, second.strokes[0].poly.points)
    assert second.strokes[0].offset.tolist() == [40.0, -3.0]


def test_evaluate_encoder() -> None:
    """Per-point losses for each degree."""
    model = EncoderModel(SMALL)
    result = evaluate_encoder(model, [line_stroke(4), line_stroke(6)])
    assert sorted(result) == [3, 4, 5]
    assert all(len(losses) == 2 for losses in result.values())


@pytest.mark.slow
def test_training_reduces_loss() -> None:
    """A short run on synthetic cubics lowers the loss."""
    config = EncoderConfig(hidden=16, min_degree=3, max_degree=3, epochs=8, batch_size=8, lr=1e-2)
    strokes = [item.stroke for item in random_strokes(48, [3], (10, 20), 11)]
    _, history = train_encoder(strokes, config, 0)
    assert history.epoch_loss[-1] < history.epoch_loss[0]
    assert all(math.isfinite(loss) for loss in history.step_loss)
