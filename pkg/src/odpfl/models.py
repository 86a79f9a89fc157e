"""Target classifier, DeepSet client encoder and hypernetwork.

All three are pure functions of a parameter mapping and an input. They are
written against :mod:`odpfl.tensor`, so calling them inside an active
:class:`~odpfl.tensor.Tape` records the computation for backpropagation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import DimensionError, EmptySetError, Tensor

ParamLike = Union[Tensor, np.ndarray]


class WeightBundle(Mapping[str, np.ndarray]):
    """Ordered, read-only collection of named float64 arrays.

    Used for every parameter set in the package: generated target weights,
    hypernetwork parameters, encoder parameters and descriptors.
    """

    def __init__(self, arrays: Mapping[str, object]):
        self._arrays: Dict[str, np.ndarray] = {}
        for k, v in arrays.items():
            a = np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
            a.flags.writeable = False
            self._arrays[k] = a

    def __getitem__(self, key: str) -> np.ndarray:
        return self._arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {list(v.shape)}" for k, v in self._arrays.items())
        return f"WeightBundle({inner})"

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    @classmethod
    def from_flat(cls, shapes: Mapping[str, Sequence[int]], vector: np.ndarray) -> "WeightBundle":
        out, pos = {}, 0
        for k, shp in shapes.items():
            n = int(np.prod(shp))
            out[k] = np.asarray(vector[pos : pos + n]).reshape(shp)
            pos += n
        if pos != len(vector):
            raise DimensionError(f"flat vector has {len(vector)} values, shapes need {pos}")
        return cls(out)

    def tensors(self, tape: Optional[T.Tape] = None) -> Dict[str, Tensor]:
        """Fresh tensors for every entry, watched on ``tape`` if given."""
        out = {k: Tensor(v) for k, v in self._arrays.items()}
        if tape is not None:
            for t in out.values():
                tape.watch(t)
        return out

    def zeros_like(self) -> "WeightBundle":
        return WeightBundle({k: np.zeros_like(v) for k, v in self._arrays.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self._arrays.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).astype("<f8").tobytes())
        return h.hexdigest()

    def same_layout(self, other: Mapping[str, np.ndarray]) -> bool:
        return list(self) == list(other) and all(self[k].shape == np.shape(other[k]) for k in self)


def _tensor(p: ParamLike) -> Tensor:
    return p if isinstance(p, Tensor) else Tensor(p)


def _dense(h: Tensor, w: ParamLike, b: ParamLike) -> Tensor:
    return T.add_row(T.matmul(h, _tensor(w)), _tensor(b))


def _uniform(rng: np.random.Generator, fan_in: int, shape, gain: float = 1.0) -> np.ndarray:
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# target model


@dataclass(frozen=True)
class TargetModelSpec:
    input_dim: int
    num_classes: int
    hidden_dims: Tuple[int, ...] = (500, 500)
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def layer_sizes(self) -> List[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        sizes = self.layer_sizes
        shapes: Dict[str, Tuple[int, ...]] = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"dense{i}.weight"] = (a, b)
            shapes[f"dense{i}.bias"] = (b,)
        return shapes

    @property
    def num_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def init_target(spec: TargetModelSpec, rng: np.random.Generator) -> WeightBundle:
    out = {}
    for name, shape in spec.param_shapes().items():
        fan_in = shape[0] if name.endswith("weight") else spec.param_shapes()[name.replace("bias", "weight")][0]
        out[name] = _uniform(rng, fan_in, shape)
    return WeightBundle(out)


def forward_target(
    spec: TargetModelSpec,
    w: Mapping[str, ParamLike],
    x: Union[Tensor, np.ndarray],
    dropout_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Logits of the MLP ``dense -> relu -> ... -> dense``.

    Dropout is applied after each hidden activation only when ``dropout_rng``
    is given; the mask is drawn up front and enters the tape as a constant.
    """
    h = _tensor(x)
    if h.data.ndim != 2 or h.shape[1] != spec.input_dim:
        raise DimensionError(f"target expects [m x {spec.input_dim}] input, got {list(h.shape)}")
    n_layers = len(spec.layer_sizes) - 1
    for i in range(n_layers):
        h = _dense(h, w[f"dense{i}.weight"], w[f"dense{i}.bias"])
        if i < n_layers - 1:
            h = T.relu(h)
            if dropout_rng is not None and spec.dropout_rate > 0:
                keep = 1.0 - spec.dropout_rate
                mask = (dropout_rng.random(h.shape) < keep) / keep
                h = T.mul(h, Tensor(mask))
    return h


def predict(spec: TargetModelSpec, w: Mapping[str, ParamLike], x: np.ndarray) -> np.ndarray:
    return np.argmax(forward_target(spec, w, x).data, axis=1)


def accuracy(spec: TargetModelSpec, w: Mapping[str, ParamLike], x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise EmptySetError("cannot score an empty dataset")
    return float(np.mean(predict(spec, w, x) == np.asarray(y)))


# ---------------------------------------------------------------------------
# client encoder


def default_descriptor_dim(n_train: int) -> int:
    """Embedding size of a quarter of the training-client count.

    Halves round to the even neighbour (Python's ``round``), minimum 1.
    """
    return max(1, round(n_train / 4))


@dataclass(frozen=True)
class EncoderSpec:
    """DeepSet encoder ``psi(pool(phi(x_1), ..., phi(x_m)))``.

    ``phi_out_dim`` is the width that gets pooled. With ``pool_split`` the
    first half of it is mean-pooled and the second half max-pooled, so it
    must be even. ``psi_kind='identity_mean'`` passes the pooled vector
    through unchanged (pure mean pooling, no split).
    """

    input_dim: int
    descriptor_dim: int
    phi_hidden_dims: Tuple[int, ...] = (64,)
    phi_out_dim: Optional[int] = None
    pool_split: bool = True
    unit_sphere_normalize: bool = False
    psi_kind: str = "linear_head"

    def __post_init__(self):
        object.__setattr__(self, "phi_hidden_dims", tuple(int(h) for h in self.phi_hidden_dims))
        if self.psi_kind not in ("identity_mean", "linear_head"):
            raise ValueError(f"unknown psi_kind {self.psi_kind!r}")
        if self.descriptor_dim < 1:
            raise ValueError("descriptor_dim must be positive")
        if self.phi_out_dim is None:
            width = self.descriptor_dim
            if self.pool_split and width % 2:
                width += 1
            object.__setattr__(self, "phi_out_dim", width)
        if self.pool_split and self.phi_out_dim % 2:
            raise ValueError("pooled width must be even when pool_split is on")
        if self.psi_kind == "identity_mean":
            if self.pool_split:
                raise ValueError("identity_mean psi requires pool_split off")
            if self.phi_out_dim != self.descriptor_dim:
                raise ValueError("identity_mean psi requires phi_out_dim == descriptor_dim")

    @property
    def dp_compatible(self) -> bool:
        return self.unit_sphere_normalize and not self.pool_split

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        sizes = [self.input_dim, *self.phi_hidden_dims, self.phi_out_dim]
        shapes: Dict[str, Tuple[int, ...]] = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"phi{i}.weight"] = (a, b)
            shapes[f"phi{i}.bias"] = (b,)
        if self.psi_kind == "linear_head":
            shapes["psi.weight"] = (self.phi_out_dim, self.descriptor_dim)
            shapes["psi.bias"] = (self.descriptor_dim,)
        return shapes


def init_encoder(spec: EncoderSpec, rng: np.random.Generator) -> WeightBundle:
    shapes = spec.param_shapes()
    out = {}
    for name, shape in shapes.items():
        fan_in = shapes[name.rsplit(".", 1)[0] + ".weight"][0]
        out[name] = _uniform(rng, fan_in, shape)
    return WeightBundle(out)


def phi_features(spec: EncoderSpec, gamma: Mapping[str, ParamLike], x: Union[Tensor, np.ndarray]) -> Tensor:
    """Per-sample network output, one row per sample."""
    h = _tensor(x)
    if h.data.ndim != 2 or h.shape[1] != spec.input_dim:
        raise DimensionError(f"encoder expects [m x {spec.input_dim}] input, got {list(h.shape)}")
    if h.shape[0] == 0:
        raise EmptySetError("empty client dataset")
    n_layers = len(spec.phi_hidden_dims) + 1
    for i in range(n_layers):
        h = _dense(h, gamma[f"phi{i}.weight"], gamma[f"phi{i}.bias"])
        if i < n_layers - 1:
            h = T.relu(h)
    if spec.unit_sphere_normalize:
        h = T.normalize_rows(h)
    return h


def encode_dataset(spec: EncoderSpec, gamma: Mapping[str, ParamLike], samples: Union[Tensor, np.ndarray]) -> Tensor:
    """Descriptor of an unordered sample set."""
    z = phi_features(spec, gamma, samples)
    if spec.pool_split:
        half = spec.phi_out_dim // 2
        pooled = T.concat([T.set_pool(T.columns(z, 0, half), "mean"), T.set_pool(T.columns(z, half, spec.phi_out_dim), "max")])
    else:
        pooled = T.set_pool(z, "mean")
    if spec.psi_kind == "identity_mean":
        return pooled
    row = T.reshape(pooled, (1, spec.phi_out_dim))
    return T.reshape(_dense(row, gamma["psi.weight"], gamma["psi.bias"]), (spec.descriptor_dim,))


def encode_batched(
    spec: EncoderSpec,
    gamma: Mapping[str, ParamLike],
    samples: Union[Tensor, np.ndarray],
    batch_size: int,
    rng: np.random.Generator,
) -> Tensor:
    """Mean of descriptors over a random partition into batches of ``batch_size``."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    x = samples.data if isinstance(samples, Tensor) else np.asarray(samples, dtype=np.float64)
    m = x.shape[0]
    if m == 0:
        raise EmptySetError("empty client dataset")
    if batch_size >= m:
        return encode_dataset(spec, gamma, samples)
    perm = rng.permutation(m)
    parts = [perm[i : i + batch_size] for i in range(0, m, batch_size)]
    return mean_descriptors([encode_dataset(spec, gamma, x[idx]) for idx in parts])


def mean_descriptors(descs: Sequence[Tensor]) -> Tensor:
    acc = descs[0]
    for d in descs[1:]:
        acc = T.add(acc, d)
    return T.scale(acc, 1.0 / len(descs))


def spectral_norm(w: np.ndarray, tol: float = 1e-8, max_iter: int = 100_000) -> float:
    """Largest singular value by power iteration on ``w^T w``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"spectral_norm needs a matrix, got shape {list(w.shape)}")
    if not np.any(w):
        return 0.0
    v = np.random.default_rng(0).standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            # start vector fell in the null space; this basically never happens
            v = np.random.default_rng(1).standard_normal(w.shape[1])
            v /= np.linalg.norm(v)
            continue
        v_new = w.T @ (u / nu)
        new_sigma = np.linalg.norm(v_new)
        v = v_new / new_sigma
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(sigma)


# ---------------------------------------------------------------------------
# hypernetwork


@dataclass(frozen=True)
class HyperNetworkSpec:
    embedding_dim: int
    target: TargetModelSpec
    trunk_hidden_dims: Tuple[int, ...] = (100, 100, 100)
    head_gain: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "trunk_hidden_dims", tuple(int(h) for h in self.trunk_hidden_dims))
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")

    @property
    def trunk_out(self) -> int:
        return self.trunk_hidden_dims[-1] if self.trunk_hidden_dims else self.embedding_dim

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        sizes = [self.embedding_dim, *self.trunk_hidden_dims]
        shapes: Dict[str, Tuple[int, ...]] = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"trunk{i}.weight"] = (a, b)
            shapes[f"trunk{i}.bias"] = (b,)
        for name, shp in self.target.param_shapes().items():
            n = int(np.prod(shp))
            shapes[f"head.{name}.weight"] = (self.trunk_out, n)
            shapes[f"head.{name}.bias"] = (n,)
        return shapes

    def head_output_size(self) -> int:
        return sum(int(np.prod(s)) for k, s in self.param_shapes().items() if k.startswith("head.") and k.endswith(".bias"))


def init_hypernet(spec: HyperNetworkSpec, rng: np.random.Generator) -> WeightBundle:
    """Uniform 1/sqrt(fan_in) init; heads are further scaled by ``head_gain``.

    Head biases start at a standard init of the target tensor they produce,
    so the generated model is a sensible network before any training.
    """
    out = {}
    target_shapes = spec.target.param_shapes()
    for name, shape in spec.param_shapes().items():
        if name.startswith("head."):
            tname = name[len("head.") :].rsplit(".", 1)[0]
            if name.endswith(".weight"):
                out[name] = _uniform(rng, shape[0], shape, spec.head_gain)
            else:
                tshape = target_shapes[tname]
                fan_in = target_shapes[tname.replace("bias", "weight")][0]
                out[name] = _uniform(rng, fan_in, tshape).ravel()
        else:
            fan_in = shape[0] if name.endswith("weight") else spec.param_shapes()[name.replace("bias", "weight")][0]
            out[name] = _uniform(rng, fan_in, shape)
    return WeightBundle(out)


def generate_weights(
    spec: HyperNetworkSpec,
    theta: Mapping[str, ParamLike],
    e: Union[Tensor, np.ndarray],
) -> Dict[str, Tensor]:
    """Target weights ``f_theta(e)`` as a name -> tensor mapping."""
    e = _tensor(e)
    if e.shape != (spec.embedding_dim,):
        raise DimensionError(f"hypernetwork expects a descriptor of length {spec.embedding_dim}, got {list(e.shape)}")
    h = T.reshape(e, (1, spec.embedding_dim))
    for i in range(len(spec.trunk_hidden_dims)):
        h = T.relu(_dense(h, theta[f"trunk{i}.weight"], theta[f"trunk{i}.bias"]))
    out = {}
    for name, shp in spec.target.param_shapes().items():
        flat = _dense(h, theta[f"head.{name}.weight"], theta[f"head.{name}.bias"])
        out[name] = T.reshape(flat, shp)
    return out


def generate_bundle(spec: HyperNetworkSpec, theta: Mapping[str, ParamLike], e: Union[Tensor, np.ndarray]) -> WeightBundle:
    return WeightBundle(generate_weights(spec, theta, e))
