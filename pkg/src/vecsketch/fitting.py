"""Classical Bézier fitting by alternating optimisation.

With the parameters fixed, the control points are a linear least-squares
solve in the Bernstein design matrix. With the control points fixed, each
parameter is the foot point of its observation on the curve. Alternating
the two never increases the loss. A damped joint Gauss-Newton step over
both sets of unknowns is tried after each round, and kept only if it helps,
which removes the slow zig-zag plain alternation suffers near the optimum.

This is the reference the learned encoder is measured against.
"""
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np
import scipy.linalg

from vecsketch import logger
from vecsketch.autodiff import NumericError, map_ordered
from vecsketch.bezier import (
    ControlPolygon, EncodedStroke, ParamVector, bernstein_matrix, derivative, elevate,
)
from vecsketch.config import Config
from vecsketch.sketch import EncodedSketch, Stroke, StrokeSequence

LOGGER = logger.get_logger(__name__)

__all__ = [
    'OracleConfig', 'OracleFit',
    'chord_length_params', 'solve_control_points', 'footpoint_project',
    'alternate_fit', 'fit_degrees', 'fit_sketch', 'curve_loss',
]

PointsLike = Union[Stroke, np.ndarray, Sequence[Sequence[float]]]
# Coarse samples used to seed the projection, endpoints included.
GRID_SAMPLES = 65
REFINE_STEPS = 2


def _positive(inst: object, at: 'attr.Attribute[float]', value: float) -> None:
    if value <= 0:
        raise ValueError(f'{at.name} must be positive, not {value}!')


def _nonneg(inst: object, at: 'attr.Attribute[float]', value: float) -> None:
    if value < 0:
        raise ValueError(f'{at.name} must be nonnegative, not {value}!')


@attr.frozen
class OracleConfig:
    """Alternating fit settings."""
    max_iter: int = attr.ib(default=50, validator=_positive)
    tolerance: float = attr.ib(default=1e-9, validator=_positive)
    newton_iters: int = attr.ib(default=8, validator=_positive)
    ridge: float = attr.ib(default=1e-9, validator=_nonneg)
    pin_endpoints: bool = True
    joint_step: bool = True

    @classmethod
    def from_config(cls, conf: Config) -> 'OracleConfig':
        """Read the oracle_* options."""
        return cls(
            max_iter=conf.get(int, 'oracle_max_iter'),
            tolerance=conf.get(float, 'oracle_tolerance'),
            newton_iters=conf.get(int, 'oracle_newton_iters'),
            ridge=conf.get(float, 'oracle_ridge'),
            pin_endpoints=conf.get(bool, 'oracle_pin_endpoints'),
        )


@attr.frozen(eq=False)
class OracleFit:
    """The result of alternate_fit()."""
    poly: ControlPolygon
    params: ParamVector
    loss: float
    history: List[float]
    iterations: int

    @property
    def per_point(self) -> float:
        """The loss divided by the point count."""
        return self.loss / len(self.params)


def _as_points(points: PointsLike) -> np.ndarray:
    if isinstance(points, Stroke):
        return points.points
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f'Expected (N, 2) points, got shape {arr.shape}!')
    if not np.all(np.isfinite(arr)):
        raise ValueError('Points must be finite!')
    return arr


def curve_loss(poly: ControlPolygon, params: Union[ParamVector, np.ndarray], points: PointsLike) -> float:
    """Sum of squared distances between C(t_i) and X_i."""
    ts = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    resid = bernstein_matrix(poly.degree, ts) @ poly.points - _as_points(points)
    return float(np.sum(resid * resid))


def chord_length_params(points: PointsLike) -> ParamVector:
    """Parameters proportional to the distance travelled along the polyline."""
    arr = _as_points(points)
    if len(arr) < 2:
        raise ValueError(f'Need at least two points, not {len(arr)}!')
    seg = np.hypot(*np.diff(arr, axis=0).T)
    total = float(np.sum(seg))
    if total == 0.0:
        raise ValueError('Cannot parameterise a stroke whose points are all identical!')
    return ParamVector.from_cumulative(np.concatenate([[0.0], np.cumsum(seg)]) / total)


def solve_control_points(
    points: PointsLike,
    params: Union[ParamVector, np.ndarray],
    degree: int,
    pin_endpoints: bool=True,
    ridge: float=1e-9,
) -> ControlPolygon:
    """Least-squares control points for fixed parameters.

    If pinned, P_0 and P_n are the first and last points and only the inner
    points are solved for. The ridge term keeps near-singular systems
    solvable; a couple of refinement steps then remove its bias.
    """
    arr = _as_points(points)
    ts = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64).reshape(-1)
    if len(ts) != len(arr):
        raise ValueError(f'{len(ts)} parameters for {len(arr)} points!')
    if degree < 1:
        raise ValueError(f'Degree must be at least 1, not {degree}!')
    if len(np.unique(ts)) < degree + 1:
        raise NumericError(
            f'Degree {degree} needs at least {degree + 1} distinct parameters, '
            f'only {len(np.unique(ts))} given!'
        )
    basis = bernstein_matrix(degree, ts)
    if pin_endpoints:
        start, end = arr[0], arr[-1]
        if degree == 1:
            return ControlPolygon([start, end])
        design = basis[:, 1:-1]
        target = arr - np.outer(basis[:, 0], start) - np.outer(basis[:, -1], end)
    else:
        design = basis
        target = arr

    normal = design.T @ design
    normal[np.diag_indices_from(normal)] += ridge
    try:
        factor = scipy.linalg.cho_factor(normal)
        solution = scipy.linalg.cho_solve(factor, design.T @ target)
        for _ in range(REFINE_STEPS):
            solution += scipy.linalg.cho_solve(factor, design.T @ (target - design @ solution))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f'Degree {degree} least-squares solve failed: {exc}') from None
    if not np.all(np.isfinite(solution)):
        raise NumericError(f'Degree {degree} least-squares solve is not finite!')
    if pin_endpoints:
        return ControlPolygon(np.vstack([start, solution, end]))
    return ControlPolygon(solution)


class _Projector:
    """Foot-point search on one curve, with its derivatives precomputed."""
    def __init__(self, poly: ControlPolygon, iterations: int) -> None:
        self.poly = poly
        self.first = derivative(poly)
        self.second = derivative(self.first)
        self.iterations = iterations

    def dist(self, point: np.ndarray, t: float) -> float:
        diff = bernstein_matrix(self.poly.degree, [t])[0] @ self.poly.points - point
        return float(diff @ diff)

    def newton(self, point: np.ndarray, t: float, lo: float, hi: float) -> Tuple[float, float]:
        """Safeguarded Newton on the distance gradient, never leaving [lo, hi]."""
        cur = self.dist(point, t)
        for _ in range(self.iterations):
            basis = bernstein_matrix(self.poly.degree, [t])[0]
            resid = basis @ self.poly.points - point
            d1 = bernstein_matrix(self.first.degree, [t])[0] @ self.first.points
            d2 = bernstein_matrix(self.second.degree, [t])[0] @ self.second.points
            grad = float(resid @ d1)
            if grad == 0.0:
                break
            hess = float(d1 @ d1 + resid @ d2)
            if hess > 0.0:
                target = t - grad / hess
            else:
                # No useful curvature, bisect towards the downhill end.
                target = 0.5 * (t + (lo if grad > 0.0 else hi))
            target = min(max(target, lo), hi)
            new = self.dist(point, target)
            halvings = 0
            while new > cur and halvings < 30:
                target = 0.5 * (t + target)
                new = self.dist(point, target)
                halvings += 1
            if new > cur:
                break
            moved = abs(target - t)
            t, cur = target, new
            if moved < 1e-14:
                break
        return t, cur

    def project(self, point: np.ndarray, t_init: float, lo: float, hi: float) -> float:
        """Run Newton from t_init and from the best coarse sample, keep the closer result."""
        t_init = min(max(t_init, lo), hi)
        best_t, best = self.newton(point, t_init, lo, hi)
        if hi > lo:
            grid = np.linspace(lo, hi, GRID_SAMPLES)
            diff = bernstein_matrix(self.poly.degree, grid) @ self.poly.points - point
            seed = float(grid[int(np.argmin(np.sum(diff * diff, axis=1)))])
            grid_t, grid_dist = self.newton(point, seed, lo, hi)
            if grid_dist < best:
                best_t, best = grid_t, grid_dist
        return best_t


def footpoint_project(
    point: Sequence[float],
    poly: ControlPolygon,
    t_init: float,
    lo: float=0.0,
    hi: float=1.0,
    iterations: int=8,
) -> float:
    """The parameter of the closest curve point within [lo, hi]."""
    if not 0.0 <= t_init <= 1.0:
        raise ValueError(f'Initial parameter {t_init} is outside [0, 1]!')
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f'Invalid search interval [{lo}, {hi}]!')
    pt = np.asarray(point, dtype=np.float64).reshape(2)
    return _Projector(poly, iterations).project(pt, t_init, lo, hi)


def _reproject(
    projector: _Projector,
    points: np.ndarray,
    ts: np.ndarray,
) -> np.ndarray:
    """One Gauss-Seidel sweep of foot-point updates over the interior points.

    Point i searches between its already-updated predecessor and its
    not-yet-updated successor, so order is kept. A move is only kept if it
    brings the curve point closer.
    """
    ts = ts.copy()
    for i in range(1, len(ts) - 1):
        # The predecessor only moved within [its predecessor, ts[i]], so ts[i] is inside.
        cand = projector.project(points[i], ts[i], ts[i - 1], ts[i + 1])
        if projector.dist(points[i], cand) <= projector.dist(points[i], ts[i]):
            ts[i] = cand
    return ts


class _JointStep:
    """Levenberg-Marquardt over the free control points and inner parameters together."""
    def __init__(self, pin_endpoints: bool) -> None:
        self.pin = pin_endpoints
        self.damping = 1e-3

    def __call__(
        self,
        points: np.ndarray,
        poly: ControlPolygon,
        ts: np.ndarray,
        loss: float,
    ) -> Tuple[ControlPolygon, np.ndarray, float]:
        n = poly.degree
        count = len(points)
        basis = bernstein_matrix(n, ts)
        first = derivative(poly)
        tangents = bernstein_matrix(first.degree, ts) @ first.points
        resid = (basis @ poly.points - points).reshape(-1)

        free = list(range(1, n)) if self.pin else list(range(n + 1))
        inner = count - 2
        width = 2 * len(free) + inner
        if width == 0:
            return poly, ts, loss
        jac = np.zeros((2 * count, width))
        for col, k in enumerate(free):
            jac[0::2, 2 * col] = basis[:, k]
            jac[1::2, 2 * col + 1] = basis[:, k]
        rows = np.arange(1, count - 1)
        cols = 2 * len(free) + np.arange(inner)
        jac[2 * rows, cols] = tangents[1:-1, 0]
        jac[2 * rows + 1, cols] = tangents[1:-1, 1]

        normal = jac.T @ jac
        grad = jac.T @ resid
        diag = np.diag(normal).copy()
        for _ in range(4):
            system = normal + self.damping * np.diag(diag + 1e-12)
            try:
                step = -scipy.linalg.solve(system, grad, assume_a='pos')
            except (np.linalg.LinAlgError, ValueError):
                self.damping *= 10.0
                continue
            new_points = poly.points.copy()
            for col, k in enumerate(free):
                new_points[k] += step[2 * col:2 * col + 2]
            new_ts = ts.copy()
            new_ts[1:-1] = np.clip(ts[1:-1] + step[2 * len(free):], 0.0, 1.0)
            new_ts = np.maximum.accumulate(new_ts)
            if np.all(np.isfinite(new_points)):
                cand = ControlPolygon(new_points)
                new_loss = curve_loss(cand, new_ts, points)
                if new_loss < loss:
                    self.damping = max(self.damping * 0.3, 1e-12)
                    return cand, new_ts, new_loss
            self.damping *= 10.0
        return poly, ts, loss


def alternate_fit(
    points: PointsLike,
    degree: int,
    config: OracleConfig=OracleConfig(),
    init: Optional[Tuple[Optional[ControlPolygon], Optional[ParamVector]]]=None,
) -> OracleFit:
    """Fit one curve by alternating least squares and foot-point reprojection.

    init may give starting parameters, and a starting polygon of the same
    degree which is kept if the first solve does no better. The loss history
    never increases.
    """
    arr = _as_points(points)
    if len(arr) < degree + 1:
        raise ValueError(f'Degree {degree} needs at least {degree + 1} points, not {len(arr)}!')
    start_poly, start_params = init if init is not None else (None, None)
    if start_params is not None:
        if len(start_params) != len(arr):
            raise ValueError(f'{len(start_params)} initial parameters for {len(arr)} points!')
        ts = np.array(start_params.values)
    else:
        ts = np.array(chord_length_params(arr).values)

    poly = solve_control_points(arr, ts, degree, config.pin_endpoints, config.ridge)
    loss = curve_loss(poly, ts, arr)
    if start_poly is not None:
        if start_poly.degree != degree:
            raise ValueError(f'Initial polygon has degree {start_poly.degree}, not {degree}!')
        start_loss = curve_loss(start_poly, ts, arr)
        if start_loss < loss:
            poly, loss = start_poly, start_loss
    history = [loss]
    joint = _JointStep(config.pin_endpoints) if config.joint_step else None

    iterations = 0
    for iterations in range(1, config.max_iter + 1):
        prev = loss
        ts = _reproject(_Projector(poly, config.newton_iters), arr, ts)
        loss = min(loss, curve_loss(poly, ts, arr))
        if len(np.unique(ts)) >= degree + 1:
            cand = solve_control_points(arr, ts, degree, config.pin_endpoints, config.ridge)
            cand_loss = curve_loss(cand, ts, arr)
            if cand_loss <= loss:
                poly, loss = cand, cand_loss
        if joint is not None:
            poly, ts, loss = joint(arr, poly, ts, loss)
        history.append(loss)
        if prev - loss <= config.tolerance * prev:
            break
    LOGGER.debug('Degree {} fit: loss {:.3g} after {} rounds', degree, loss, iterations)
    return OracleFit(poly, ParamVector.from_cumulative(ts), loss, history, iterations)


def fit_degrees(
    points: PointsLike,
    degrees: Iterable[int],
    config: OracleConfig=OracleConfig(),
) -> Dict[int, OracleFit]:
    """Fit every degree, each warm-started from the elevated fit one below.

    Elevation reproduces the lower curve exactly, so a higher degree never
    ends up worse than the one below it.
    """
    arr = _as_points(points)
    fits: Dict[int, OracleFit] = {}
    below: Optional[OracleFit] = None
    for n in sorted(degrees):
        init = None
        if below is not None:
            init = (elevate(below.poly, n), below.params)
        fit = alternate_fit(arr, n, config, init)
        fits[n] = fit
        below = fit
    return fits


def _fit_stroke(stroke: Stroke, degree: int, config: OracleConfig) -> Tuple[EncodedStroke, Optional[OracleFit]]:
    try:
        params = chord_length_params(stroke)
    except ValueError:
        # All points identical: a curve collapsed onto that point.
        poly = ControlPolygon(np.repeat(stroke.points[:1], degree + 1, axis=0))
        return EncodedStroke(poly, stroke.offset, 0.0), None
    # Repeated points share a parameter, and each degree needs n+1 distinct ones.
    n = min(degree, len(np.unique(params.values)) - 1)
    fit = alternate_fit(stroke, n, config, (None, params))
    return EncodedStroke(fit.poly, stroke.offset, fit.loss), fit


def fit_sketch(
    sequence: StrokeSequence,
    degree: int,
    config: OracleConfig=OracleConfig(),
    workers: int=1,
) -> Tuple[EncodedSketch, List[Optional[OracleFit]]]:
    """Fit every stroke of a sketch at one degree.

    Strokes too short for the degree are fit at the highest degree they
    allow. Strokes with no extent become constant curves, and have no fit
    record.
    """
    results = map_ordered(lambda stroke: _fit_stroke(stroke, degree, config), sequence.strokes, workers)
    collapsed = sum(1 for _, fit in results if fit is None)
    if collapsed:
        LOGGER.warning('{} stroke(s) had no extent and were collapsed to a point.', collapsed)
    encoded = EncodedSketch([enc for enc, _ in results], sequence.category, sequence.raw_length)
    return encoded, [fit for _, fit in results]
