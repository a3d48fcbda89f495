"""A small reverse-mode automatic differentiation engine over numpy arrays.

Operations applied to tensors while a Tape is active are recorded, in
creation order, which is already a topological order. Tape.backward()
walks that record in reverse once, applying each node's adjoint rule.
Outside a tape, operations only compute values.

Shapes are explicit. The only broadcasting is add() of a bias row onto a
matrix.
"""
import contextvars
import math
from concurrent.futures import ThreadPoolExecutor
from typing import (
    Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union,
)

import numpy as np
from scipy.special import logsumexp as _logsumexp

from vecsketch import VecSketchError
from vecsketch.bezier import MAX_DEGREE, binomial
from vecsketch.logger import get_logger

LOGGER = get_logger(__name__)

__all__ = [
    'NumericError', 'Tensor', 'Tape', 'ParamStore', 'GRUCell', 'TanhCell',
    'as_tensor', 'matmul', 'add', 'sub', 'multiply', 'scale', 'negative',
    'tanh', 'sigmoid', 'exp', 'log', 'softmax', 'log_softmax', 'logsumexp',
    'cumsum', 'concatenate', 'index', 'slice_rows', 'slice_cols', 'reshape',
    'sum', 'squared_difference', 'gather', 'bernstein_basis',
    'backward', 'bidirectional', 'make_cell', 'run_cell',
    'check_gradients', 'numeric_gradient', 'map_ordered',
]

ArrayLike = Union['Tensor', np.ndarray, float, Sequence[float]]
Adjoint = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
T = TypeVar('T')
R = TypeVar('R')

_ACTIVE: 'contextvars.ContextVar[Optional[Tape]]' = contextvars.ContextVar('vecsketch_tape', default=None)


class NumericError(VecSketchError, ArithmeticError):
    """A loss or gradient was not finite, or a solve failed."""
    category = 'numeric'


class Tensor:
    """An array value, and if recorded on a tape, how it was computed."""
    __slots__ = ['value', 'tape', 'parents', 'adjoint']

    def __init__(
        self,
        value: Union[np.ndarray, float],
        tape: 'Optional[Tape]'=None,
        parents: Tuple['Tensor', ...]=(),
        adjoint: Optional[Adjoint]=None,
    ) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.adjoint = adjoint

    @property
    def shape(self) -> Tuple[int, ...]:
        """The array shape."""
        return self.value.shape

    @property
    def is_finite(self) -> bool:
        """Check the value contains no NaN or infinity."""
        return bool(np.all(np.isfinite(self.value)))

    def item(self) -> float:
        """The value of a single-element tensor."""
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float('nan')

    def __repr__(self) -> str:
        tracked = 'tracked' if self.tape is not None else 'const'
        return f'<Tensor {tracked} shape={self.shape}>'

    def __add__(self, other: ArrayLike) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other: ArrayLike) -> 'Tensor':
        return self.__mul__(other)

    def __neg__(self) -> 'Tensor':
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, key: object) -> 'Tensor':
        return index(self, key)


class Tape:
    """Records operations for differentiation. Use as a context manager."""
    def __init__(self) -> None:
        self.nodes: List[Tensor] = []
        self.grads: Dict[int, np.ndarray] = {}
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> 'Tape':
        if self._token is not None:
            raise ValueError('Tape is already active!')
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        assert self._token is not None
        _ACTIVE.reset(self._token)
        self._token = None

    def leaf(self, value: Union[np.ndarray, float]) -> Tensor:
        """Create a differentiable input."""
        tensor = Tensor(np.array(value, dtype=np.float64), self)
        self.nodes.append(tensor)
        return tensor

    def backward(self, loss: Tensor) -> None:
        """Compute gradients of a scalar loss with respect to every recorded node."""
        if loss.value.size != 1:
            raise ValueError(f'Loss must be a scalar, not shape {loss.shape}!')
        self.grads = {id(loss): np.ones_like(loss.value)}
        if loss.tape is not self:
            return  # A constant, nothing depends on the leaves.
        for node in reversed(self.nodes):
            grad = self.grads.get(id(node))
            if grad is None or node.adjoint is None:
                continue
            for parent, parent_grad in zip(node.parents, node.adjoint(grad)):
                if parent.tape is not self or parent_grad is None:
                    continue
                key = id(parent)
                if key in self.grads:
                    self.grads[key] = self.grads[key] + parent_grad
                else:
                    self.grads[key] = parent_grad

    def grad(self, tensor: Tensor) -> np.ndarray:
        """The gradient for this tensor, zero if it does not affect the loss."""
        try:
            return self.grads[id(tensor)]
        except KeyError:
            return np.zeros_like(tensor.value)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants, passing tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _make(value: np.ndarray, parents: Tuple[Tensor, ...], adjoint: Adjoint) -> Tensor:
    """Create an operation result, recording it if any input is tracked."""
    tape = _ACTIVE.get()
    if tape is None or not any(parent.tape is tape for parent in parents):
        return Tensor(value)
    out = Tensor(value, tape, parents, adjoint)
    tape.nodes.append(out)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f'{op}: shape mismatch {a.shape} vs {b.shape}!')


def _expand_constants(a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """Let plain scalar constants stand in for a full array."""
    if a.value.ndim == 0 and a.tape is None and b.value.ndim > 0:
        a = Tensor(np.full(b.shape, float(a.value)))
    elif b.value.ndim == 0 and b.tape is None and a.value.ndim > 0:
        b = Tensor(np.full(a.shape, float(b.value)))
    return a, b


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of two 2D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f'matmul: incompatible shapes {a.shape} @ {b.shape}!')
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise sum. b may also be a bias row, added to every row of a."""
    a, b = _expand_constants(as_tensor(a), as_tensor(b))
    if a.shape == b.shape:
        return _make(a.value + b.value, (a, b), lambda g: (g, g))
    if a.value.ndim == 2 and b.value.size == a.shape[1] and b.value.ndim <= 2:
        bshape = b.shape
        return _make(
            a.value + b.value.reshape(1, -1), (a, b),
            lambda g: (g, g.sum(axis=0).reshape(bshape)),
        )
    raise ValueError(f'add: shape mismatch {a.shape} vs {b.shape}!')


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise difference."""
    a, b = _expand_constants(as_tensor(a), as_tensor(b))
    _check_same('sub', a, b)
    return _make(a.value - b.value, (a, b), lambda g: (g, -g))


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same('multiply', a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: ArrayLike, factor: float) -> Tensor:
    """Multiply by a constant."""
    a = as_tensor(a)
    factor = float(factor)
    return _make(a.value * factor, (a, ), lambda g: (g * factor, ))


def negative(a: ArrayLike) -> Tensor:
    """Negate."""
    return scale(a, -1.0)


def tanh(a: ArrayLike) -> Tensor:
    """Hyperbolic tangent."""
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a, ), lambda g: (g * (1.0 - out * out), ))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp() never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: ArrayLike) -> Tensor:
    """Logistic function."""
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _make(out, (a, ), lambda g: (g * out * (1.0 - out), ))


def exp(a: ArrayLike) -> Tensor:
    """Elementwise exponential. Overflow gives infinity rather than an error."""
    a = as_tensor(a)
    with np.errstate(over='ignore'):
        out = np.exp(a.value)
    return _make(out, (a, ), lambda g: (g * out, ))


def log(a: ArrayLike) -> Tensor:
    """Natural logarithm. Values outside the domain give NaN or -inf."""
    a = as_tensor(a)
    av = a.value
    with np.errstate(divide='ignore', invalid='ignore'):
        out = np.log(av)
    return _make(out, (a, ), lambda g: (g / av, ))


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def softmax(a: ArrayLike, axis: int=-1) -> Tensor:
    """Normalised exponentials along an axis."""
    a = as_tensor(a)
    out = _softmax(a.value, axis)
    return _make(
        out, (a, ),
        lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)), ),
    )


def log_softmax(a: ArrayLike, axis: int=-1) -> Tensor:
    """Logarithm of softmax(), computed stably."""
    a = as_tensor(a)
    out = a.value - _logsumexp(a.value, axis=axis, keepdims=True)
    probs = np.exp(out)
    return _make(
        out, (a, ),
        lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True), ),
    )


def logsumexp(a: ArrayLike, axis: int=-1) -> Tensor:
    """log(sum(exp(a))) along an axis, which is removed."""
    a = as_tensor(a)
    out = _logsumexp(a.value, axis=axis)
    probs = _softmax(a.value, axis)
    return _make(
        out, (a, ),
        lambda g: (np.expand_dims(g, axis) * probs, ),
    )


def cumsum(a: ArrayLike, axis: int=0) -> Tensor:
    """Cumulative sum along an axis."""
    a = as_tensor(a)
    return _make(
        np.cumsum(a.value, axis=axis), (a, ),
        lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis), ),
    )


def concatenate(parts: Sequence[ArrayLike], axis: int=0) -> Tensor:
    """Join tensors along an existing axis."""
    tensors = tuple(as_tensor(part) for part in parts)
    if not tensors:
        raise ValueError('concatenate: nothing to join!')
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.value for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def index(a: ArrayLike, key: object) -> Tensor:
    """Numpy indexing, with the gradient scattered back."""
    a = as_tensor(a)
    shape = a.shape

    def adjoint(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full, )
    return _make(np.array(a.value[key]), (a, ), adjoint)


def slice_rows(a: ArrayLike, start: int, stop: int) -> Tensor:
    """Rows start:stop of a 2D tensor."""
    return index(a, (slice(start, stop), slice(None)))


def slice_cols(a: ArrayLike, start: int, stop: int) -> Tensor:
    """Columns start:stop of a 2D tensor."""
    return index(a, (slice(None), slice(start, stop)))


def gather(a: ArrayLike, indices: Sequence[int], axis: int=0) -> Tensor:
    """Pick entries along an axis by integer index, repeats allowed."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def adjoint(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full, )
    return _make(np.take(a.value, idx, axis=axis), (a, ), adjoint)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Change the shape, keeping row-major order."""
    a = as_tensor(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a, ), lambda g: (g.reshape(old), ))


def sum(a: ArrayLike, axis: Optional[int]=None, keepdims: bool=False) -> Tensor:  # noqa: A001
    """Sum over one axis, or everything."""
    a = as_tensor(a)
    shape = a.shape

    def adjoint(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(), )
    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a, ), adjoint)


def squared_difference(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise (a - b)^2."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same('squared_difference', a, b)
    diff = a.value - b.value
    return _make(diff * diff, (a, b), lambda g: (2.0 * g * diff, -2.0 * g * diff))


def _basis(t: np.ndarray, n: int) -> np.ndarray:
    """Bernstein table for a column of parameters. Degree -1 is all zeros."""
    if n < 0:
        return np.zeros((len(t), 1))
    i = np.arange(n + 1, dtype=np.float64)
    coeffs = np.array([binomial(n, k) for k in range(n + 1)])
    return coeffs * t ** i * (1.0 - t) ** (n - i)


def bernstein_basis(t: ArrayLike, n: int) -> Tensor:
    """The (N, n+1) table of B(i, n, t_k) for a column of parameters.

    The derivative is n (B(i-1, n-1, t) - B(i, n-1, t)).
    """
    t = as_tensor(t)
    if n < 1 or n > MAX_DEGREE:
        raise ValueError(f'Degree must be within 1..{MAX_DEGREE}, not {n}!')
    tv = t.value.reshape(-1, 1)
    lower = _basis(tv, n - 1)
    padded = np.hstack([np.zeros((len(tv), 1)), lower, np.zeros((len(tv), 1))])
    deriv = n * (padded[:, :-1] - padded[:, 1:])
    shape = t.shape
    return _make(
        _basis(tv, n), (t, ),
        lambda g: (np.sum(g * deriv, axis=1).reshape(shape), ),
    )


def backward(tape: Tape, loss: Tensor, store: 'ParamStore', leaves: Dict[str, Tensor]) -> None:
    """Backpropagate the loss, adding gradients for the bound leaves into the store."""
    if not loss.is_finite:
        raise NumericError(f'Loss is not finite ({loss.item()})!')
    tape.backward(loss)
    store.accumulate({name: tape.grad(leaf) for name, leaf in leaves.items()})


class ParamStore:
    """Named trainable parameters, their gradients and optimiser state."""
    def __init__(self, seed: Union[int, np.random.Generator, None]=0) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.moment1: Dict[str, np.ndarray] = {}
        self.moment2: Dict[str, np.ndarray] = {}
        self.step_count = 0
        self.aborted_steps = 0
        self._rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def add(self, name: str, shape: Sequence[int], init: Union[str, float, np.ndarray]='xavier') -> np.ndarray:
        """Declare a parameter.

        init is 'xavier' (uniform, scaled by fan in and out), 'zeros', a
        constant, or an explicit array.
        """
        if name in self.params:
            raise ValueError(f'Parameter "{name}" already exists!')
        shape = tuple(shape)
        if isinstance(init, np.ndarray):
            value = np.array(init, dtype=np.float64).reshape(shape)
        elif init == 'xavier':
            fan_in = shape[0]
            fan_out = shape[1] if len(shape) > 1 else shape[0]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            value = self._rng.uniform(-limit, limit, size=shape)
        elif init == 'zeros':
            value = np.zeros(shape)
        elif isinstance(init, (int, float)):
            value = np.full(shape, float(init))
        else:
            raise ValueError(f'Unknown initialiser {init!r}!')
        self.params[name] = value
        self.grads[name] = np.zeros(shape)
        return value

    def bind(self, tape: Optional[Tape]=None) -> Dict[str, Tensor]:
        """Wrap every parameter as a tensor: leaves on the tape, or constants if None."""
        if tape is None:
            return {name: Tensor(value) for name, value in self.params.items()}
        return {name: tape.leaf(value) for name, value in self.params.items()}

    def accumulate(self, grads: Dict[str, np.ndarray], weight: float=1.0) -> None:
        """Add weighted gradients, in the fixed parameter order."""
        for name in self.params:
            try:
                grad = grads[name]
            except KeyError:
                continue
            if grad.shape != self.params[name].shape:
                raise ValueError(f'Gradient for "{name}" has shape {grad.shape}, not {self.params[name].shape}!')
            self.grads[name] += weight * grad

    def zero_grad(self) -> None:
        """Clear accumulated gradients."""
        for grad in self.grads.values():
            grad.fill(0.0)

    def grad_norm(self) -> float:
        """Global L2 norm over all gradients."""
        return math.sqrt(float(np.sum([np.sum(g * g) for g in self.grads.values()])))

    def _prepare(self, clip: Optional[float]) -> bool:
        """Check for non-finite gradients, then clip. False means the step is aborted."""
        norm = self.grad_norm()
        if not math.isfinite(norm):
            self.aborted_steps += 1
            LOGGER.warning('Non-finite gradient at step {}, skipping update.', self.step_count)
            self.zero_grad()
            return False
        if clip is not None and norm > clip:
            factor = clip / norm
            for grad in self.grads.values():
                grad *= factor
        return True

    def sgd_step(self, lr: float, clip: Optional[float]=None) -> bool:
        """Plain gradient descent. Returns False if the step was aborted."""
        if not self._prepare(clip):
            return False
        for name, value in self.params.items():
            value -= lr * self.grads[name]
        self.step_count += 1
        self.zero_grad()
        return True

    def adam_step(
        self,
        lr: float,
        beta1: float=0.9,
        beta2: float=0.999,
        eps: float=1e-8,
        clip: Optional[float]=None,
    ) -> bool:
        """Adam update with bias correction. Returns False if the step was aborted."""
        if not self._prepare(clip):
            return False
        self.step_count += 1
        step = self.step_count
        for name, value in self.params.items():
            grad = self.grads[name]
            m = self.moment1.setdefault(name, np.zeros_like(value))
            v = self.moment2.setdefault(name, np.zeros_like(value))
            m *= beta1
            m += (1.0 - beta1) * grad
            v *= beta2
            v += (1.0 - beta2) * grad * grad
            m_hat = m / (1.0 - beta1 ** step)
            v_hat = v / (1.0 - beta2 ** step)
            value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        self.zero_grad()
        return True

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Every parameter and optimiser moment, keyed for a checkpoint."""
        state = {f'param/{name}': value for name, value in self.params.items()}
        state.update({f'adam_m/{name}': value for name, value in self.moment1.items()})
        state.update({f'adam_v/{name}': value for name, value in self.moment2.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], step_count: int=0) -> None:
        """Restore values exported by state_dict(). Every declared parameter must be present."""
        for name, value in self.params.items():
            try:
                saved = state[f'param/{name}']
            except KeyError:
                raise ValueError(f'Missing parameter "{name}"!') from None
            if saved.shape != value.shape:
                raise ValueError(f'Parameter "{name}" has shape {saved.shape}, expected {value.shape}!')
            value[...] = saved
            for prefix, moments in [('adam_m/', self.moment1), ('adam_v/', self.moment2)]:
                if prefix + name in state:
                    moments[name] = np.array(state[prefix + name], dtype=np.float64)
        self.step_count = step_count
        self.zero_grad()


class TanhCell:
    """Plain recurrent cell, h' = tanh(x W + h U + b)."""
    def __init__(self, store: ParamStore, prefix: str, input_size: int, hidden: int) -> None:
        self.prefix = prefix
        self.hidden = hidden
        store.add(prefix + '.W', (input_size, hidden))
        store.add(prefix + '.U', (hidden, hidden))
        store.add(prefix + '.b', (hidden, ), 'zeros')

    def __call__(self, params: Dict[str, Tensor], x: Tensor, state: Tensor) -> Tensor:
        p = self.prefix
        return tanh(add(add(matmul(x, params[p + '.W']), matmul(state, params[p + '.U'])), params[p + '.b']))


class GRUCell:
    """Gated recurrent cell, with update gate z, reset gate r and candidate n."""
    def __init__(self, store: ParamStore, prefix: str, input_size: int, hidden: int) -> None:
        self.prefix = prefix
        self.hidden = hidden
        store.add(prefix + '.W', (input_size, 3 * hidden))
        store.add(prefix + '.U', (hidden, 3 * hidden))
        store.add(prefix + '.b', (3 * hidden, ), 'zeros')

    def __call__(self, params: Dict[str, Tensor], x: Tensor, state: Tensor) -> Tensor:
        p = self.prefix
        h = self.hidden
        from_x = add(matmul(x, params[p + '.W']), params[p + '.b'])
        from_h = matmul(state, params[p + '.U'])
        update = sigmoid(add(slice_cols(from_x, 0, h), slice_cols(from_h, 0, h)))
        reset = sigmoid(add(slice_cols(from_x, h, 2 * h), slice_cols(from_h, h, 2 * h)))
        cand = tanh(add(
            slice_cols(from_x, 2 * h, 3 * h),
            multiply(reset, slice_cols(from_h, 2 * h, 3 * h)),
        ))
        # (1 - z) * n + z * h
        return add(sub(cand, multiply(update, cand)), multiply(update, state))


Cell = Union[GRUCell, TanhCell]
CELL_TYPES = {'gru': GRUCell, 'tanh': TanhCell}


def make_cell(kind: str, store: ParamStore, prefix: str, input_size: int, hidden: int) -> Cell:
    """Build a cell by its configured name."""
    try:
        cls = CELL_TYPES[kind]
    except KeyError:
        raise ValueError(f'Unknown cell type "{kind}", expected one of {sorted(CELL_TYPES)}!') from None
    return cls(store, prefix, input_size, hidden)


def run_cell(cell: Cell, params: Dict[str, Tensor], inputs: Tensor, reverse: bool=False) -> List[Tensor]:
    """Run a cell over the rows of inputs from a zero state. Returns the state after each row, in row order."""
    state = as_tensor(np.zeros((1, cell.hidden)))
    count = inputs.shape[0]
    states: List[Tensor] = [state] * count
    order = range(count - 1, -1, -1) if reverse else range(count)
    for i in order:
        state = cell(params, slice_rows(inputs, i, i + 1), state)
        states[i] = state
    return states


def bidirectional(
    forward: Cell,
    backward_cell: Cell,
    params: Dict[str, Tensor],
    inputs: Tensor,
) -> Tuple[Tensor, Tensor]:
    """Run cells both ways over the rows of inputs.

    Returns the per-row concatenated states (N, 2h), and the summary
    (1, 2h) joining the last forward state with the last backward state.
    """
    fwd = run_cell(forward, params, inputs)
    bwd = run_cell(backward_cell, params, inputs, reverse=True)
    per_step = concatenate([concatenate(fwd, axis=0), concatenate(bwd, axis=0)], axis=1)
    summary = concatenate([fwd[-1], bwd[0]], axis=1)
    return per_step, summary


def numeric_gradient(
    func: Callable[[Dict[str, Tensor]], Tensor],
    values: Dict[str, np.ndarray],
    eps: float=1e-5,
) -> Dict[str, np.ndarray]:
    """Central finite differences of a scalar function of named arrays."""
    result = {}
    work = {name: np.array(value, dtype=np.float64) for name, value in values.items()}
    for name, arr in work.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = func({k: Tensor(v) for k, v in work.items()}).item()
            flat[i] = orig - eps
            minus = func({k: Tensor(v) for k, v in work.items()}).item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * eps)
        result[name] = grad
    return result


def check_gradients(
    func: Callable[[Dict[str, Tensor]], Tensor],
    values: Union[ParamStore, Dict[str, np.ndarray]],
    eps: float=1e-5,
) -> float:
    """Compare reverse-mode gradients with finite differences.

    Returns the worst relative error over the named inputs, measured as
    |analytic - numeric| / max(|analytic|, |numeric|) over each whole array.
    """
    arrays = values.params if isinstance(values, ParamStore) else values
    with Tape() as tape:
        leaves = {name: tape.leaf(value) for name, value in arrays.items()}
        loss = func(leaves)
    tape.backward(loss)
    numeric = numeric_gradient(func, arrays, eps)
    worst = 0.0
    for name, leaf in leaves.items():
        analytic = tape.grad(leaf)
        scale_ = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric[name])), 1e-8)
        err = float(np.linalg.norm(analytic - numeric[name])) / scale_
        if err > worst:
            worst = err
            LOGGER.debug('Gradient check: "{}" rel-err {:.3g}', name, err)
    return worst


def map_ordered(func: Callable[[T], R], items: Iterable[T], workers: int=1) -> List[R]:
    """Apply func to every item, possibly on threads, returning results in input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
