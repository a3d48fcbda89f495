"""Test the reverse-mode differentiation engine."""
import math

import numpy as np
import pytest

from vecsketch import autodiff as ad
from vecsketch.autodiff import NumericError, ParamStore, Tape, Tensor
from vecsketch.bezier import bernstein_matrix


def test_softmax_uniform() -> None:
    """Equal inputs give equal weights."""
    assert np.allclose(ad.softmax(np.zeros(4)).value, [0.25] * 4)
    rng = np.random.default_rng(3)
    probs = ad.softmax(rng.normal(size=(5, 7)) * 30, axis=1).value
    assert np.all(probs > 0.0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_cumsum() -> None:
    """Check a cumulative sum."""
    assert ad.cumsum([0.25, 0.25, 0.25, 0.25]).value.tolist() == [0.25, 0.5, 0.75, 1.0]


def test_square_gradient() -> None:
    """d/dx sum(x^2) = 2x."""
    with Tape() as tape:
        x = tape.leaf([1.0, 2.0])
        loss = ad.sum(ad.multiply(x, x))
    tape.backward(loss)
    assert tape.grad(x).tolist() == [2.0, 4.0]


def test_constant_loss() -> None:
    """A loss not depending on the leaves gives zero gradients."""
    with Tape() as tape:
        x = tape.leaf([1.0, 2.0])
        loss = ad.sum(ad.as_tensor([3.0, 4.0]))
    tape.backward(loss)
    assert tape.grad(x).tolist() == [0.0, 0.0]


def test_unreachable_leaf() -> None:
    """Leaves not used by the loss get zero."""
    with Tape() as tape:
        x = tape.leaf([1.0, 2.0])
        y = tape.leaf([5.0])
        loss = ad.sum(ad.scale(x, 3.0))
    tape.backward(loss)
    assert tape.grad(x).tolist() == [3.0, 3.0]
    assert tape.grad(y).tolist() == [0.0]


def test_linearity() -> None:
    """The gradient of a sum of losses is the sum of gradients."""
    def first(x: Tensor) -> Tensor:
        return ad.sum(ad.tanh(x))

    def second(x: Tensor) -> Tensor:
        return ad.sum(ad.exp(ad.scale(x, 0.5)))

    value = np.array([0.3, -1.2, 2.0])
    grads = []
    for func in [first, second, lambda x: ad.add(first(x), second(x))]:
        with Tape() as tape:
            x = tape.leaf(value)
            loss = func(x)
        tape.backward(loss)
        grads.append(tape.grad(x))
    assert np.allclose(grads[0] + grads[1], grads[2], atol=1e-14)


def test_non_scalar_loss() -> None:
    """Only scalars can be differentiated."""
    with Tape() as tape:
        x = tape.leaf([1.0, 2.0])
        y = ad.scale(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_shape_errors() -> None:
    """Mismatched shapes are rejected."""
    with pytest.raises(ValueError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        ad.multiply(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        ad.add(np.ones((2, 3)), np.ones(4))
    with pytest.raises(ValueError):
        ad.concatenate([])


def test_domain_violations() -> None:
    """log and exp outside their domain flag non-finite values."""
    assert not ad.log([-1.0, 1.0]).is_finite
    assert not ad.log([0.0]).is_finite
    assert not ad.exp([1000.0]).is_finite
    assert ad.exp([1.0]).is_finite


def test_outside_tape() -> None:
    """Without a tape only values are computed."""
    out = ad.tanh(ad.as_tensor([0.0, 1.0]))
    assert out.tape is None
    assert out.value[0] == 0.0


def test_bias_add() -> None:
    """A bias row is added to every row."""
    with Tape() as tape:
        mat = tape.leaf(np.ones((3, 2)))
        bias = tape.leaf([1.0, 2.0])
        loss = ad.sum(ad.add(mat, bias))
    assert loss.item() == 6.0 + 9.0
    tape.backward(loss)
    assert tape.grad(bias).tolist() == [3.0, 3.0]


PRIMITIVES = {
    'matmul': lambda p: ad.sum(ad.matmul(p['a'], p['b'])),
    'add': lambda p: ad.sum(ad.multiply(ad.add(p['a'], p['a']), p['a'])),
    'sub': lambda p: ad.sum(ad.tanh(ad.sub(p['a'], ad.scale(p['a'], 0.3)))),
    'multiply': lambda p: ad.sum(ad.multiply(p['a'], ad.tanh(p['a']))),
    'tanh': lambda p: ad.sum(ad.tanh(p['a'])),
    'sigmoid': lambda p: ad.sum(ad.multiply(ad.sigmoid(p['a']), p['a'])),
    'exp': lambda p: ad.sum(ad.exp(ad.scale(p['a'], 0.5))),
    'log': lambda p: ad.sum(ad.log(ad.add(ad.multiply(p['a'], p['a']), 1.0))),
    'softmax': lambda p: ad.sum(ad.multiply(ad.softmax(p['a'], axis=1), p['c'])),
    'log_softmax': lambda p: ad.sum(ad.multiply(ad.log_softmax(p['a'], axis=0), p['c'])),
    'logsumexp': lambda p: ad.sum(ad.multiply(ad.logsumexp(p['a'], axis=1), ad.logsumexp(p['a'], axis=1))),
    'cumsum': lambda p: ad.sum(ad.multiply(ad.cumsum(p['a'], axis=0), p['c'])),
    'concatenate': lambda p: ad.sum(ad.tanh(ad.concatenate([p['a'], ad.scale(p['c'], 2.0)], axis=1))),
    'slice': lambda p: ad.sum(ad.tanh(ad.slice_cols(ad.slice_rows(p['a'], 1, 3), 0, 2))),
    'gather': lambda p: ad.sum(ad.tanh(ad.gather(p['a'], [0, 2, 2], axis=0))),
    'index': lambda p: ad.sum(ad.tanh(p['a'][1])),
    'reshape': lambda p: ad.sum(ad.multiply(ad.reshape(p['a'], (4, 3)), ad.reshape(p['c'], (4, 3)))),
    'sum_axis': lambda p: ad.sum(ad.tanh(ad.sum(p['a'], axis=0))),
    'squared_difference': lambda p: ad.sum(ad.squared_difference(p['a'], p['c'])),
    'bernstein_basis': lambda p: ad.sum(ad.multiply(ad.bernstein_basis(p['t'], 3), p['w'])),
}


@pytest.mark.parametrize('name', sorted(PRIMITIVES))
def test_primitive_gradients(name: str) -> None:
    """Every primitive agrees with finite differences."""
    rng = np.random.default_rng(sorted(PRIMITIVES).index(name))
    values = {
        'a': rng.normal(size=(3, 4)),
        'b': rng.normal(size=(4, 2)),
        'c': rng.normal(size=(3, 4)),
        't': rng.uniform(0.05, 0.95, size=(5, 1)),
        'w': rng.normal(size=(5, 4)),
    }
    assert ad.check_gradients(PRIMITIVES[name], values) < 1e-6


def test_bernstein_basis_values() -> None:
    """The tensor basis matches the plain table."""
    t = np.linspace(0.0, 1.0, 7).reshape(-1, 1)
    assert np.allclose(ad.bernstein_basis(t, 5).value, bernstein_matrix(5, t), atol=1e-14)
    with pytest.raises(ValueError):
        ad.bernstein_basis(t, 0)


@pytest.mark.parametrize('kind', ['gru', 'tanh'])
def test_cell_gradients(kind: str) -> None:
    """Recurrent cells differentiate through time."""
    store = ParamStore(5)
    cell = ad.make_cell(kind, store, 'cell', 3, 4)
    inputs = np.random.default_rng(6).normal(size=(4, 3))

    def loss(params):
        states = ad.run_cell(cell, params, ad.as_tensor(inputs))
        return ad.sum(ad.multiply(states[-1], states[-1]))

    assert ad.check_gradients(loss, store) < 1e-5


def test_cell_zero() -> None:
    """Zero weights, state and input keep the state at zero."""
    store = ParamStore(0)
    cell = ad.make_cell('gru', store, 'cell', 2, 3)
    for name in store:
        store[name].fill(0.0)
    state = cell(store.bind(), ad.as_tensor(np.zeros((1, 2))), ad.as_tensor(np.zeros((1, 3))))
    assert state.value.tolist() == [[0.0, 0.0, 0.0]]
    with pytest.raises(ValueError):
        ad.make_cell('lstm', store, 'other', 2, 3)


def test_cell_deterministic() -> None:
    """The same seed gives identical states."""
    results = []
    for _ in range(2):
        store = ParamStore(11)
        fwd = ad.make_cell('gru', store, 'fwd', 2, 3)
        bwd = ad.make_cell('gru', store, 'bwd', 2, 3)
        per_step, summary = ad.bidirectional(fwd, bwd, store.bind(), ad.as_tensor(np.arange(10.0).reshape(5, 2)))
        assert per_step.shape == (5, 6)
        assert summary.shape == (1, 6)
        results.append(per_step.value.tobytes())
    assert results[0] == results[1]


def test_sgd_quadratic() -> None:
    """Gradient descent on x^2 shrinks x by (1 - 2 lr) each step."""
    store = ParamStore(0)
    store.add('x', (1, ), 3.0)
    expected = 3.0
    for _ in range(5):
        x = store['x'][0]
        store.accumulate({'x': np.array([2.0 * x])})
        assert store.sgd_step(0.1)
        expected *= 0.8
        assert math.isclose(store['x'][0], expected, rel_tol=1e-12)
    assert store.step_count == 5


def test_zero_gradient_step() -> None:
    """No gradient, no change."""
    for step in ['sgd_step', 'adam_step']:
        store = ParamStore(0)
        store.add('w', (2, 2))
        before = store['w'].copy()
        getattr(store, step)(0.1)
        assert store['w'].tolist() == before.tolist()


def test_adam_first_step() -> None:
    """Adam's first step moves each parameter by about lr against the gradient sign."""
    store = ParamStore(0)
    store.add('w', (3, ), np.array([1.0, 2.0, 3.0]))
    store.accumulate({'w': np.array([0.5, -2.0, 0.0])})
    store.adam_step(0.01)
    assert np.allclose(store['w'], [0.99, 2.01, 3.0], atol=1e-9)


def test_clipping() -> None:
    """Gradients are scaled to the clip norm."""
    store = ParamStore(0)
    store.add('w', (2, ), 'zeros')
    store.accumulate({'w': np.array([3.0, 4.0])})
    assert store.grad_norm() == 5.0
    store.sgd_step(1.0, clip=1.0)
    assert np.allclose(store['w'], [-0.6, -0.8])


def test_non_finite_gradient_aborts() -> None:
    """A non-finite gradient skips the update."""
    store = ParamStore(0)
    store.add('w', (2, ), 1.0)
    store.accumulate({'w': np.array([math.nan, 1.0])})
    assert not store.adam_step(0.1)
    assert store['w'].tolist() == [1.0, 1.0]
    assert store.aborted_steps == 1
    assert store.step_count == 0
    # Gradients are cleared, so the next step works.
    store.accumulate({'w': np.array([1.0, 1.0])})
    assert store.sgd_step(0.5)
    assert store['w'].tolist() == [0.5, 0.5]


def test_backward_rejects_nan_loss() -> None:
    """Non-finite losses raise a numeric error."""
    store = ParamStore(0)
    store.add('w', (2, ), 1.0)
    with Tape() as tape:
        params = store.bind(tape)
        loss = ad.sum(ad.log(ad.scale(params['w'], -1.0)))
    with pytest.raises(NumericError):
        ad.backward(tape, loss, store, params)


def test_identical_runs() -> None:
    """Two runs from the same seed follow identical trajectories."""
    trajectories = []
    for _ in range(2):
        store = ParamStore(42)
        store.add('w', (3, 2))
        target = np.arange(6.0).reshape(3, 2)
        history = []
        for _ in range(4):
            with Tape() as tape:
                params = store.bind(tape)
                loss = ad.sum(ad.squared_difference(params['w'], target))
            ad.backward(tape, loss, store, params)
            store.adam_step(0.1)
            history.append(store['w'].tobytes())
        trajectories.append(history)
    assert trajectories[0] == trajectories[1]


def test_state_dict() -> None:
    """Parameters and moments round trip through state_dict()."""
    store = ParamStore(1)
    store.add('w', (2, 3))
    store.accumulate({'w': np.ones((2, 3))})
    store.adam_step(0.1)
    other = ParamStore(2)
    other.add('w', (2, 3))
    other.load_state_dict(store.state_dict(), store.step_count)
    assert other['w'].tolist() == store['w'].tolist()
    assert other.moment1['w'].tolist() == store.moment1['w'].tolist()
    assert other.step_count == 1

    wrong = ParamStore(0)
    wrong.add('w', (3, 2))
    with pytest.raises(ValueError):
        wrong.load_state_dict(store.state_dict())
    with pytest.raises(ValueError):
        store.add('w', (2, 3))


def test_map_ordered() -> None:
    """Results come back in input order for any worker count."""
    items = list(range(20))
    assert ad.map_ordered(lambda x: x * x, items, 1) == [x * x for x in items]
    assert ad.map_ordered(lambda x: x * x, items, 4) == [x * x for x in items]
