"""Central finite-difference checks for every differentiable operation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import ClientDataset
from .models import EncoderSpec, HyperNetworkSpec, TargetModelSpec, WeightBundle, init_encoder, init_hypernet
from .protocol import ServerState, composite_loss_tape, federation_loss
from .tensor import Tape, Tensor

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckRow:
    name: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max(max|a|, max|b|, 1e-6)``."""
    den = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), 1e-6)
    return float(np.max(np.abs(a - b), initial=0.0)) / den


def numeric_gradient(f: Callable[[List[np.ndarray]], float], inputs: List[np.ndarray], h: float = STEP) -> List[np.ndarray]:
    grads = []
    for i, x in enumerate(inputs):
        g = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            plus = [v.copy() for v in inputs]
            minus = [v.copy() for v in inputs]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (f(plus) - f(minus)) / (2 * h)
        grads.append(g)
    return grads


def _check(build: Callable[[List[Tensor]], Tensor], inputs: List[np.ndarray], rng: np.random.Generator) -> float:
    """Compare a random projection of the output through the tape and by differences."""
    probe_shape = build([Tensor(x) for x in inputs]).shape
    probe = rng.standard_normal(probe_shape)

    def scalar(vals):
        return float(np.sum(build([Tensor(v) for v in vals]).data * probe))

    with Tape() as tape:
        leaves = [tape.watch(Tensor(x)) for x in inputs]
        out = build(leaves)
    res = tape.backward(T.AdjointSeed(out.node_id, Tensor(probe)), [t.node_id for t in leaves])
    analytic = [res[t.node_id].data for t in leaves]
    numeric = numeric_gradient(scalar, inputs)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.1 + x, x)


def _op_cases() -> Dict[str, Callable[[np.random.Generator], Tuple[Callable, List[np.ndarray]]]]:
    def labels(rng, n, c):
        return rng.integers(0, c, n)

    return {
        "matmul": lambda r: (lambda t: T.matmul(t[0], t[1]), [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
        "add": lambda r: (lambda t: T.add(t[0], t[1]), [r.standard_normal((3, 2)), r.standard_normal((3, 2))]),
        "sub": lambda r: (lambda t: T.sub(t[0], t[1]), [r.standard_normal((3, 2)), r.standard_normal((3, 2))]),
        "mul": lambda r: (lambda t: T.mul(t[0], t[1]), [r.standard_normal((3, 2)), r.standard_normal((3, 2))]),
        "relu": lambda r: (lambda t: T.relu(t[0]), [_away_from_zero(r, (4, 3))]),
        "scale": lambda r: (lambda t: T.scale(t[0], -1.7), [r.standard_normal((2, 3))]),
        "add_row": lambda r: (lambda t: T.add_row(t[0], t[1]), [r.standard_normal((4, 3)), r.standard_normal(3)]),
        "sum": lambda r: (lambda t: T.tsum(t[0]), [r.standard_normal((3, 3))]),
        "reshape": lambda r: (lambda t: T.reshape(t[0], (3, 4)), [r.standard_normal(12)]),
        "columns": lambda r: (lambda t: T.columns(t[0], 1, 3), [r.standard_normal((3, 5))]),
        "concat": lambda r: (lambda t: T.concat([t[0], t[1]]), [r.standard_normal(3), r.standard_normal(2)]),
        "set_pool_mean": lambda r: (lambda t: T.set_pool(t[0], "mean"), [r.standard_normal((5, 3))]),
        "set_pool_max": lambda r: (lambda t: T.set_pool(t[0], "max"), [r.standard_normal((5, 3))]),
        "normalize_rows": lambda r: (lambda t: T.normalize_rows(t[0]), [r.standard_normal((4, 3))]),
        "softmax_cross_entropy": lambda r: (
            (lambda lab: (lambda t: T.softmax_cross_entropy(t[0], lab)))(labels(r, 5, 4)),
            [r.standard_normal((5, 4))],
        ),
    }


def check_operations(instances: int = 20, seed: int = 0) -> List[CheckRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, make in _op_cases().items():
        worst = 0.0
        for _ in range(instances):
            build, inputs = make(rng)
            worst = max(worst, _check(build, inputs, rng))
        rows.append(CheckRow(name, instances, worst))
    return rows


def small_composite(rng: np.random.Generator, n_clients: int = 3, m: int = 6) -> Tuple[ServerState, List[ClientDataset]]:
    """A tiny encoder plus hypernetwork plus target over ``n_clients`` random clients."""
    d, c, D = 3, 3, 4
    target = TargetModelSpec(d, c, (5,))
    enc = EncoderSpec(d, D, phi_hidden_dims=(6,), pool_split=True)
    hn = HyperNetworkSpec(D, target, trunk_hidden_dims=(7,), head_gain=1.0)
    state = ServerState(hn, enc, init_hypernet(hn, rng), init_encoder(enc, rng))
    clients = [ClientDataset(i, rng.standard_normal((m, d)), rng.integers(0, c, m), c) for i in range(n_clients)]
    return state, clients


def check_composite(instances: int = 20, seed: int = 0, coords: int = 12) -> CheckRow:
    """Loss gradient of the full encoder-hypernetwork-target chain.

    Per instance, ``coords`` random coordinates of theta and gamma are
    compared against central differences of the loss.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        state, clients = small_composite(rng)
        tape, loss, theta, gamma = composite_loss_tape(state, clients)
        names = [("theta", k) for k in theta] + [("gamma", k) for k in gamma]
        tensors = [theta[k] if g == "theta" else gamma[k] for g, k in names]
        grads = T.grad(tape, loss, tensors)
        analytic, numeric = [], []
        for _ in range(coords):
            j = int(rng.integers(len(names)))
            group, key = names[j]
            idx = tuple(int(rng.integers(s)) for s in tensors[j].shape)
            vals = []
            for sgn in (1, -1):
                bundle = dict(getattr(state, group))
                arr = bundle[key].copy()
                arr[idx] += sgn * STEP
                bundle[key] = arr
                probe = ServerState(state.hn_spec, state.enc_spec, state.theta, state.gamma)
                setattr(probe, group, WeightBundle(bundle))
                vals.append(federation_loss(probe, clients))
            numeric.append((vals[0] - vals[1]) / (2 * STEP))
            analytic.append(grads[j][idx])
        worst = max(worst, relative_error(np.array(analytic), np.array(numeric)))
    return CheckRow("composite_loss", instances, worst)


def run_all(instances: int = 20, seed: int = 0) -> List[CheckRow]:
    return check_operations(instances, seed) + [check_composite(instances, seed)]


def format_rows(rows: Sequence[CheckRow]) -> str:
    lines = ["op,instances,max_rel_error,passed"]
    lines += [f"{r.name},{r.instances},{r.max_rel_error:.3e},{'yes' if r.passed else 'no'}" for r in rows]
    return "\n".join(lines) + "\n"
