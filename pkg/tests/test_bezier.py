"""Test the Bézier curve maths."""
import math

import numpy as np
import pytest

from vecsketch.bezier import (
    MAX_DEGREE, ControlPolygon, DiagonalNoise, EncodedStroke, ParamVector,
    bernstein, bernstein_matrix, binomial, curve_noise_cov, decasteljau,
    decode_stroke, derivative, elevate, eval_curve, eval_many, perturb,
    sidecar_dumps, sidecar_loads, chord_flatness,
)
from helpers import ARCH, EPSILON, assert_points


@pytest.mark.parametrize('i, n, t, expected', [
    (0, 5, 0.0, 1.0),
    (1, 2, 0.5, 0.5),
    (2, 4, 0.3, 6 * 0.09 * 0.49),
    (3, 3, 1.0, 1.0),
    (0, 3, 1.0, 0.0),
])
def test_bernstein(i: int, n: int, t: float, expected: float) -> None:
    """Check basis values computed by hand."""
    assert math.isclose(bernstein(i, n, t), expected, abs_tol=EPSILON)


def test_bernstein_errors() -> None:
    """Indexes and parameters must be in range."""
    with pytest.raises(IndexError):
        bernstein(4, 3, 0.5)
    with pytest.raises(IndexError):
        bernstein(-1, 3, 0.5)
    with pytest.raises(ValueError):
        bernstein(1, 3, 1.5)
    with pytest.raises(ValueError):
        bernstein(1, 3, -0.1)
    with pytest.raises(ValueError):
        bernstein(1, 3, math.nan)


def test_partition_of_unity() -> None:
    """For any degree and t, the basis sums to 1."""
    rng = np.random.default_rng(1234)
    for n in range(1, MAX_DEGREE + 1):
        for t in rng.random(20):
            total = sum(bernstein(i, n, t) for i in range(n + 1))
            assert math.isclose(total, 1.0, abs_tol=EPSILON), (n, t)
        table = bernstein_matrix(n, rng.random(20))
        assert np.allclose(table.sum(axis=1), 1.0, atol=EPSILON)


def test_binomial() -> None:
    """The table matches direct computation, and extends past it."""
    assert binomial(4, 2) == 6.0
    assert binomial(12, 6) == 924.0
    assert binomial(14, 7) == 3432.0
    with pytest.raises(IndexError):
        binomial(3, 4)


def test_polygon_validation() -> None:
    """Polygons need two finite points at least."""
    with pytest.raises(ValueError):
        ControlPolygon([(0, 0)])
    with pytest.raises(ValueError):
        ControlPolygon([(0, 0), (1, math.inf)])
    with pytest.raises(ValueError):
        ControlPolygon([(0, 0, 0), (1, 1, 1)])
    poly = ControlPolygon([(0, 0), (1, 2), (3, 4)])
    assert poly.degree == 2
    with pytest.raises(ValueError):
        poly.points[0, 0] = 5.0  # Read-only.


def test_polygon_flat_and_deltas() -> None:
    """Check the embedding vector and difference encodings."""
    poly = ControlPolygon([(0, 0), (1, 2), (3, 4)])
    assert poly.flat().tolist() == [0, 0, 1, 2, 3, 4]
    assert ControlPolygon.from_flat([0, 0, 1, 2, 3, 4]) == poly
    assert poly.deltas().tolist() == [[1, 2], [2, 2]]
    assert ControlPolygon.from_deltas([[1, 2], [2, 2]]) == poly
    with pytest.raises(ValueError):
        ControlPolygon.from_flat([0, 0, 1])


def test_param_vector() -> None:
    """Parameters run from 0 to 1 without decreasing."""
    assert len(ParamVector([0.0, 0.5, 0.5, 1.0])) == 4
    with pytest.raises(ValueError):
        ParamVector([0.1, 1.0])
    with pytest.raises(ValueError):
        ParamVector([0.0, 0.9])
    with pytest.raises(ValueError):
        ParamVector([0.0, 0.6, 0.4, 1.0])
    with pytest.raises(ValueError):
        ParamVector([0.0])
    fixed = ParamVector.from_cumulative([1e-17, 0.4, 0.39999999, 1.0000000002])
    assert fixed.values.tolist() == [0.0, 0.4, 0.4, 1.0]


def test_eval_curve() -> None:
    """Check evaluation against hand-computed values."""
    line = ControlPolygon([(0, 0), (1, 1)])
    assert_points(eval_curve(line, 0.5), [0.5, 0.5], tol=EPSILON)
    assert_points(eval_curve(ARCH, 0.5), [0.5, 0.75], tol=EPSILON)
    assert_points(eval_curve(ARCH, 0.0), ARCH.points[0], tol=EPSILON)
    assert_points(eval_curve(ARCH, 1.0), ARCH.points[-1], tol=EPSILON)
    with pytest.raises(ValueError):
        eval_curve(ARCH, 1.01)
    with pytest.raises(ValueError):
        eval_many(ARCH, [0.0, -0.5])


def test_decasteljau_agrees() -> None:
    """de Casteljau agrees with the Bernstein form for every degree."""
    rng = np.random.default_rng(42)
    for n in range(1, MAX_DEGREE + 1):
        poly = ControlPolygon(rng.normal(size=(n + 1, 2)))
        for t in rng.random(5):
            point, left, right = decasteljau(poly, t)
            expected = eval_curve(poly, t)
            assert np.allclose(point, expected, rtol=1e-12, atol=1e-12)
            # The halves retrace the curve.
            for s in [0.0, 0.3, 0.7, 1.0]:
                assert_points(eval_curve(left, s), eval_curve(poly, s * t))
                assert_points(eval_curve(right, s), eval_curve(poly, t + s * (1.0 - t)))


def test_decasteljau_examples() -> None:
    """Subdivide a line in half, and at its start."""
    line = ControlPolygon([(0, 0), (2, 4)])
    point, left, right = decasteljau(line, 0.5)
    assert_points(point, [1, 2])
    assert_points(left.points, [[0, 0], [1, 2]])
    assert_points(right.points, [[1, 2], [2, 4]])

    point, left, right = decasteljau(ARCH, 0.0)
    assert_points(point, [0, 0])
    assert_points(left.points, np.zeros((4, 2)))
    assert right == ARCH

    point, _, _ = decasteljau(ARCH, 0.5)
    assert_points(point, [0.5, 0.75], tol=EPSILON)


def test_decode_stroke() -> None:
    """Polylines sample uniformly, with exact end points."""
    line = ControlPolygon([(0, 0), (2, 4)])
    assert_points(decode_stroke(line, 3), [[0, 0], [1, 2], [2, 4]])
    assert_points(decode_stroke(ARCH, 2), [[0, 0], [1, 0]])
    pts = decode_stroke(ARCH, 5)
    assert_points(pts, eval_many(ARCH, [0, 0.25, 0.5, 0.75, 1.0]))
    poly = ControlPolygon([(0.1, 0.3), (5.7, -2.2), (1.9, 8.1), (3.3, 3.3)])
    pts = decode_stroke(poly, 17)
    assert pts[0].tolist() == poly.points[0].tolist()
    assert pts[-1].tolist() == poly.points[-1].tolist()
    with pytest.raises(ValueError):
        decode_stroke(ARCH, 1)


def test_affine_invariance() -> None:
    """Transforming the points transforms the curve."""
    rng = np.random.default_rng(7)
    for n in [1, 3, 9]:
        poly = ControlPolygon(rng.normal(size=(n + 1, 2)))
        mat = rng.normal(size=(2, 2))
        offset = rng.normal(size=2)
        moved = poly.transform(mat, offset)
        for t in rng.random(5):
            expected = mat @ eval_curve(poly, t) + offset
            assert np.allclose(eval_curve(moved, t), expected, atol=1e-10)


def test_derivative() -> None:
    """The hodograph of a cubic is a quadratic."""
    deriv = derivative(ARCH)
    assert_points(deriv.points, [[0, 3], [3, 0], [0, -3]])
    # Central difference at t=0.3.
    h = 1e-6
    numeric = (eval_curve(ARCH, 0.3 + h) - eval_curve(ARCH, 0.3 - h)) / (2 * h)
    assert_points(eval_curve(deriv, 0.3), numeric, tol=1e-6)
    line = derivative(ControlPolygon([(0, 0), (2, 1)]))
    assert_points(line.points, [[2, 1], [2, 1]])


def test_elevate() -> None:
    """Raising the degree keeps the shape."""
    high = elevate(ARCH, 9)
    assert high.degree == 9
    ts = np.linspace(0, 1, 11)
    assert_points(eval_many(high, ts), eval_many(ARCH, ts))
    assert elevate(ARCH, 3) == ARCH
    with pytest.raises(ValueError):
        elevate(ARCH, 2)


def test_chord_flatness() -> None:
    """Distance of the inner points from the chord."""
    assert chord_flatness(ControlPolygon([(0, 0), (1, 0)])) == 0.0
    assert math.isclose(chord_flatness(ARCH), 1.0)
    loop = ControlPolygon([(0, 0), (3, 4), (0, 0)])
    assert math.isclose(chord_flatness(loop), 5.0)


def test_perturb() -> None:
    """Zero noise changes nothing, and seeds reproduce draws."""
    assert perturb(ARCH, DiagonalNoise.isotropic(3, 0.0), 5) == ARCH
    noise = DiagonalNoise.isotropic(3, 5.0)
    assert perturb(ARCH, noise, 12) == perturb(ARCH, noise, 12)
    assert perturb(ARCH, noise, 12) != perturb(ARCH, noise, 13)
    with pytest.raises(ValueError):
        perturb(ARCH, DiagonalNoise.isotropic(2, 1.0), 0)
    with pytest.raises(ValueError):
        DiagonalNoise([[1.0, -1.0]])


def test_curve_noise_cov() -> None:
    """Noise on the points combines with squared basis weights."""
    noise = DiagonalNoise([(1.0, 2.0), (3.0, 4.0), (5.0, 6.0), (7.0, 8.0)])
    assert_points(curve_noise_cov(noise, 3, 0.0), np.diag([1.0, 2.0]))
    line = DiagonalNoise.isotropic(1, 2.0)
    assert_points(curve_noise_cov(line, 1, 0.5), 0.5 * 2.0 * np.eye(2))
    cubic = DiagonalNoise.isotropic(3, 5.0)
    weights = sum(bernstein(i, 3, 0.5) ** 2 for i in range(4))
    assert math.isclose(weights, 20 / 64)
    assert_points(curve_noise_cov(cubic, 3, 0.5), 5.0 * weights * np.eye(2))
    with pytest.raises(ValueError):
        curve_noise_cov(cubic, 3, 2.0)
    with pytest.raises(ValueError):
        curve_noise_cov(cubic, 4, 0.5)


@pytest.mark.slow
@pytest.mark.parametrize('degree', [3, 9])
def test_noisy_points_give_gaussian_curve(degree: int) -> None:
    """Sampling the curve of noisy points matches the predicted Gaussian."""
    rng = np.random.default_rng(2023 + degree)
    poly = ControlPolygon(rng.uniform(-5.0, 5.0, (degree + 1, 2)))
    noise = DiagonalNoise(rng.uniform(0.2, 4.0, (degree + 1, 2)))
    count = 100_000
    points = np.stack([
        perturb(poly, noise, rng).points
        for _ in range(count)
    ])
    ts = np.linspace(0.05, 0.95, 10)
    curves = np.einsum('ti,kij->tkj', bernstein_matrix(degree, ts), points)

    for t, samples in zip(ts, curves):
        mean = eval_curve(poly, t)
        var = np.diag(curve_noise_cov(noise, degree, t))
        # Standard errors of the mean and variance of a normal sample.
        mean_err = np.sqrt(var / count)
        var_err = var * np.sqrt(2.0 / (count - 1))
        assert np.all(np.abs(samples.mean(axis=0) - mean) < 3 * mean_err), t
        assert np.all(np.abs(samples.var(axis=0, ddof=1) - var) < 3 * var_err), t
        # Off-diagonal stays zero.
        assert abs(np.cov(samples.T)[0, 1]) < 3 * math.sqrt(var[0] * var[1] / count), t


def test_sidecar() -> None:
    """Placed curves survive the JSON sidecar."""
    strokes = [
        EncodedStroke(ARCH, (2.0, 3.0)),
        EncodedStroke(ControlPolygon([(0, 0), (1.5, -2.25)]), (0.0, 0.0)),
    ]
    text = sidecar_dumps(strokes)
    assert text.startswith('{"version": 1')
    loaded = sidecar_loads(text)
    assert [s.poly for s in loaded] == [s.poly for s in strokes]
    assert loaded[0].offset.tolist() == [2.0, 3.0]
    assert_points(loaded[0].absolute().points, ARCH.points + [2.0, 3.0])
    with pytest.raises(ValueError):
        sidecar_loads('{"version": 2, "strokes": []}')
    with pytest.raises(ValueError):
        sidecar_loads('{"version": 1, "strokes": [{"degree": 2, "offset": [0, 0], "points": [[0, 0], [1, 1]]}]}')
