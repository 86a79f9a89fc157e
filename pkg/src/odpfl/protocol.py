"""Server/client choreography for training the encoder and hypernetwork.

One round, per cohort member::

    server -> client   EncoderDownload(gamma)
    client -> server   DescriptorUpload(e_i)          e_i = g_gamma(X_i)
    server -> client   ModelDownload(w_i)             w_i = f_theta(e_i)
    client -> server   DeltaUpload(dw_i)              local SGD on (X_i, y_i)
    server -> client   DescriptorGradDownload(de_i)   chain rule through f_theta
    client -> server   EncoderGradUpload(dgamma_i)    chain rule through g_gamma

The server seeds the hypernetwork's chain rule with ``-dw_i`` (``+dw_i``
with ``sign='raw'``), averages the parameter gradients over the cohort and
takes one optimizer step on theta and one on gamma.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import ClientDataset, UnlabeledClient
from .models import (
    EncoderSpec,
    HyperNetworkSpec,
    TargetModelSpec,
    WeightBundle,
    encode_batched,
    encode_dataset,
    forward_target,
    generate_weights,
    init_encoder,
    init_hypernet,
)
from .tensor import AdjointSeed, Tape, Tensor


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.lr < 0:
            raise ValueError("local lr must be non-negative")


@dataclass(frozen=True)
class ServerConfig:
    lr_hn: float = 0.05
    lr_encoder: float = 0.05
    lr_embedding: float = 0.05
    momentum: float = 0.9
    weight_decay_hn: float = 0.0
    weight_decay_encoder: float = 0.0
    sign: str = "descent"
    encode_budget: int = 4096
    encode_batch_size: int = 512

    def __post_init__(self):
        if self.sign not in ("descent", "raw"):
            raise ValueError("sign must be 'descent' or 'raw'")


@dataclass
class ServerState:
    hn_spec: HyperNetworkSpec
    enc_spec: EncoderSpec
    theta: WeightBundle
    gamma: WeightBundle
    config: ServerConfig = field(default_factory=ServerConfig)
    round: int = 0
    theta_velocity: Optional[Dict[str, np.ndarray]] = None
    gamma_velocity: Optional[Dict[str, np.ndarray]] = None
    embeddings: Optional[np.ndarray] = None
    theta_pretune: Optional[WeightBundle] = None

    @property
    def target_spec(self) -> TargetModelSpec:
        return self.hn_spec.target

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.theta.checksum().encode())
        h.update(self.gamma.checksum().encode())
        h.update(str(self.round).encode())
        if self.embeddings is not None:
            h.update(np.ascontiguousarray(self.embeddings).tobytes())
        return h.hexdigest()


def init_server(
    hn_spec: HyperNetworkSpec,
    enc_spec: EncoderSpec,
    rng: np.random.Generator,
    config: Optional[ServerConfig] = None,
    n_embeddings: int = 0,
) -> ServerState:
    if hn_spec.embedding_dim != enc_spec.descriptor_dim:
        raise ValueError("hypernetwork embedding_dim must equal encoder descriptor_dim")
    theta = init_hypernet(hn_spec, rng)
    gamma = init_encoder(enc_spec, rng)
    table = None
    if n_embeddings:
        table = rng.normal(0.0, 1.0 / np.sqrt(hn_spec.embedding_dim), (n_embeddings, hn_spec.embedding_dim))
    return ServerState(hn_spec, enc_spec, theta, gamma, config or ServerConfig(), embeddings=table)


# ---------------------------------------------------------------------------
# messages


class MessageKind(str, Enum):
    ENCODER_DOWNLOAD = "EncoderDownload"
    DESCRIPTOR_UPLOAD = "DescriptorUpload"
    MODEL_DOWNLOAD = "ModelDownload"
    DELTA_UPLOAD = "DeltaUpload"
    DESCRIPTOR_GRAD_DOWNLOAD = "DescriptorGradDownload"
    ENCODER_GRAD_UPLOAD = "EncoderGradUpload"


UPLOADS = {MessageKind.DESCRIPTOR_UPLOAD, MessageKind.DELTA_UPLOAD, MessageKind.ENCODER_GRAD_UPLOAD}

LEGAL_ROUND = (
    MessageKind.ENCODER_DOWNLOAD,
    MessageKind.DESCRIPTOR_UPLOAD,
    MessageKind.MODEL_DOWNLOAD,
    MessageKind.DELTA_UPLOAD,
    MessageKind.DESCRIPTOR_GRAD_DOWNLOAD,
    MessageKind.ENCODER_GRAD_UPLOAD,
)
LEGAL_FROZEN_ENCODER_ROUND = LEGAL_ROUND[:4]
LEGAL_EMBEDDING_ROUND = (MessageKind.MODEL_DOWNLOAD, MessageKind.DELTA_UPLOAD)
LEGAL_INFERENCE = LEGAL_ROUND[:3]


@dataclass(frozen=True)
class RoundMessage:
    round: int
    client_id: int
    kind: MessageKind
    n_floats: int

    @property
    def nbytes(self) -> int:
        return 8 * self.n_floats

    @property
    def upload(self) -> bool:
        return self.kind in UPLOADS


def validate_transcript(messages: Sequence[RoundMessage], legal: Sequence[MessageKind] = LEGAL_ROUND) -> None:
    """Raise :class:`ProtocolError` unless each (round, client) exchange is exactly ``legal``."""
    groups: Dict[Tuple[int, int], List[MessageKind]] = {}
    current = None
    for m in messages:
        key = (m.round, m.client_id)
        if key != current:
            if key in groups:
                raise ProtocolError(f"interleaved exchange for client {m.client_id} in round {m.round}")
            groups[key] = []
            current = key
        groups[key].append(m.kind)
    for key, kinds in groups.items():
        if tuple(kinds) != tuple(legal):
            raise ProtocolError(f"round {key[0]} client {key[1]}: got {[k.value for k in kinds]}")


# ---------------------------------------------------------------------------
# client side


@dataclass
class LocalUpdate:
    delta: WeightBundle
    loss_before: float
    loss_after: float


def mean_loss(spec: TargetModelSpec, w: Mapping[str, np.ndarray], data: ClientDataset) -> float:
    return float(T.softmax_cross_entropy(forward_target(spec, w, data.features), data.labels).data)


def local_sgd(
    spec: TargetModelSpec,
    w: Mapping[str, np.ndarray],
    data: ClientDataset,
    cfg: LocalTrainConfig,
    rng: np.random.Generator,
    prox_mu: float = 0.0,
) -> Dict[str, np.ndarray]:
    """E epochs of minibatch SGD from ``w``; ``prox_mu`` adds ``mu/2 ||w - w0||^2``.

    The proximal term is handled by forward-backward splitting: an SGD step on
    the task loss, then the exact minimizer of ``mu/2 ||w - w0||^2 +
    ||w - w'||^2 / (2 lr)``. That is stable for any ``mu * lr``; an explicit
    gradient step on the term diverges once ``mu * lr > 2``.
    """
    anchor = {k: np.asarray(v) for k, v in w.items()}
    params = dict(anchor)
    velocity = None
    m = data.m
    for _ in range(cfg.epochs):
        perm = rng.permutation(m)
        for start in range(0, m, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            with Tape() as tape:
                tw = {k: tape.watch(Tensor(v)) for k, v in params.items()}
                logits = forward_target(spec, tw, data.features[idx], dropout_rng=rng if spec.dropout_rate > 0 else None)
                loss = T.softmax_cross_entropy(logits, data.labels[idx])
            names = list(tw)
            gs = T.grad(tape, loss, [tw[k] for k in names])
            params, velocity = T.sgd_step(params, dict(zip(names, gs)), cfg.lr, cfg.momentum, velocity, cfg.weight_decay)
            if prox_mu:
                shrink = cfg.lr * prox_mu
                params = {k: (v + shrink * anchor[k]) / (1.0 + shrink) for k, v in params.items()}
    return params


def proximal_value(w: Mapping[str, np.ndarray], w_global: Mapping[str, np.ndarray], mu: float) -> float:
    return 0.5 * mu * sum(float(np.sum((w[k] - w_global[k]) ** 2)) for k in w)


def client_update(
    spec: TargetModelSpec,
    w: Mapping[str, np.ndarray],
    data: ClientDataset,
    cfg: LocalTrainConfig,
    rng: np.random.Generator,
    prox_mu: float = 0.0,
) -> LocalUpdate:
    """Local training from ``w``; returns ``w_new - w`` and the losses around it."""
    if not data.labeled:
        raise ProtocolError(f"client {data.client_id} has no labels; local training needs them")
    before = mean_loss(spec, w, data)
    new = local_sgd(spec, w, data, cfg, rng, prox_mu)
    delta = WeightBundle({k: new[k] - np.asarray(w[k]) for k in w})
    return LocalUpdate(delta, before, mean_loss(spec, new, data))


@dataclass
class EncodedRecord:
    tape: Tape
    gamma: Dict[str, Tensor]
    descriptor: Tensor
    round: int


def client_encode(state: ServerState, features: np.ndarray, rng: Optional[np.random.Generator] = None) -> EncodedRecord:
    """Record ``e = g_gamma(X)``, batching when ``X`` exceeds the encode budget."""
    with Tape() as tape:
        gamma = state.gamma.tensors(tape)
        e = _encode(state, gamma, features, rng)
    return EncodedRecord(tape, gamma, e, state.round)


def _encode(state: ServerState, gamma, features: np.ndarray, rng) -> Tensor:
    cfg = state.config
    if len(features) > cfg.encode_budget:
        if rng is None:
            rng = np.random.default_rng(0)
        return encode_batched(state.enc_spec, gamma, features, cfg.encode_batch_size, rng)
    return encode_dataset(state.enc_spec, gamma, features)


def client_backprop(record: EncodedRecord, delta_e: np.ndarray, current_round: int) -> WeightBundle:
    """``J_gamma^T delta_e`` on the client's own encoding tape."""
    if record.round != current_round:
        raise ProtocolError(f"encoder tape from round {record.round} used in round {current_round}")
    res = record.tape.backward(
        AdjointSeed(record.descriptor.node_id, Tensor(delta_e)),
        [t.node_id for t in record.gamma.values()],
    )
    return WeightBundle({k: res[t.node_id].data for k, t in record.gamma.items()})


# ---------------------------------------------------------------------------
# server side


@dataclass
class GeneratedRecord:
    tape: Tape
    theta: Dict[str, Tensor]
    descriptor: Tensor
    weights: Dict[str, Tensor]

    def bundle(self) -> WeightBundle:
        return WeightBundle(self.weights)


def server_generate(state: ServerState, e: np.ndarray, theta: Optional[WeightBundle] = None) -> GeneratedRecord:
    with Tape() as tape:
        th = (theta or state.theta).tensors(tape)
        et = tape.watch(Tensor(e))
        w = generate_weights(state.hn_spec, th, et)
    return GeneratedRecord(tape, th, et, w)


def server_backprop(record: GeneratedRecord, delta_w: Mapping[str, np.ndarray], sign: str = "descent") -> Tuple[WeightBundle, np.ndarray]:
    """Return ``(J_theta^T s, J_e^T s)`` with seed ``s = -delta_w`` (``+delta_w`` for ``raw``)."""
    if list(delta_w) != list(record.weights):
        raise T.DimensionError(f"delta names {list(delta_w)} do not match generated bundle {list(record.weights)}")
    factor = -1.0 if sign == "descent" else 1.0
    seeds = []
    for k, t in record.weights.items():
        d = np.asarray(delta_w[k])
        if d.shape != t.shape:
            raise T.DimensionError(f"delta for {k} has shape {list(d.shape)}, generated tensor has {list(t.shape)}")
        seeds.append(AdjointSeed(t.node_id, Tensor(factor * d)))
    wrt = [t.node_id for t in record.theta.values()] + [record.descriptor.node_id]
    res = record.tape.backward(seeds, wrt)
    d_theta = WeightBundle({k: res[t.node_id].data for k, t in record.theta.items()})
    return d_theta, res[record.descriptor.node_id].data.copy()


def _mean_bundles(bundles: Sequence[Mapping[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    out = {}
    for k in bundles[0]:
        acc = np.array(bundles[0][k], dtype=np.float64)
        for b in bundles[1:]:
            acc = acc + b[k]
        out[k] = acc / len(bundles)
    return out


def _apply_theta(state: ServerState, grad: Mapping[str, np.ndarray]) -> None:
    cfg = state.config
    p, v = T.sgd_step(dict(state.theta), grad, cfg.lr_hn, cfg.momentum, state.theta_velocity, cfg.weight_decay_hn)
    state.theta, state.theta_velocity = WeightBundle(p), v


def _apply_gamma(state: ServerState, grad: Mapping[str, np.ndarray]) -> None:
    cfg = state.config
    p, v = T.sgd_step(dict(state.gamma), grad, cfg.lr_encoder, cfg.momentum, state.gamma_velocity, cfg.weight_decay_encoder)
    state.gamma, state.gamma_velocity = WeightBundle(p), v


def copy_state(state: ServerState) -> ServerState:
    return copy.copy(state)


# ---------------------------------------------------------------------------
# rounds


@dataclass
class ClientRoundEntry:
    client_id: int
    loss_before: float
    loss_after: float
    bytes_up: int
    bytes_down: int


@dataclass
class RoundLog:
    round: int
    entries: List[ClientRoundEntry] = field(default_factory=list)
    transcript: List[RoundMessage] = field(default_factory=list)

    def csv_rows(self, method: Optional[str] = None) -> List[list]:
        rows = []
        for e in self.entries:
            row = [self.round, e.client_id, repr(e.loss_before), repr(e.loss_after), e.bytes_up, e.bytes_down]
            rows.append(([method] if method is not None else []) + row)
        return rows


ROUND_LOG_HEADER = ["round", "client_id", "local_loss_before", "local_loss_after", "bytes_up", "bytes_down"]


def sample_cohort(n_clients: int, cohort_size: int, rng: np.random.Generator) -> List[int]:
    if n_clients < 1:
        raise ProtocolError("empty federation")
    if cohort_size < 1:
        raise ValueError("cohort_size must be at least 1")
    k = min(cohort_size, n_clients)
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def _client_rng(rng_seed: int, rnd: int, cid: int) -> np.random.Generator:
    return np.random.default_rng([rng_seed, rnd, cid])


def _log_entry(rnd: int, cid: int, kinds_sizes, transcript, entries, upd: LocalUpdate):
    up = down = 0
    for kind, n in kinds_sizes:
        msg = RoundMessage(rnd, cid, kind, n)
        transcript.append(msg)
        if msg.upload:
            up += msg.nbytes
        else:
            down += msg.nbytes
    entries.append(ClientRoundEntry(cid, upd.loss_before, upd.loss_after, up, down))


def train_round(
    state: ServerState,
    clients: Sequence[ClientDataset],
    cohort_size: int,
    rng: np.random.Generator,
    local: LocalTrainConfig,
    cohort: Optional[Sequence[int]] = None,
    update_encoder: bool = True,
) -> Tuple[ServerState, RoundLog]:
    """One communication round over a random cohort; returns a new state.

    ``clients`` are the labeled training splits. ``cohort`` overrides the
    random draw (positions into ``clients``). With ``update_encoder=False``
    gamma is frozen and the last two messages are skipped.
    """
    if not clients:
        raise ProtocolError("empty federation")
    members = list(cohort) if cohort is not None else sample_cohort(len(clients), cohort_size, rng)
    seed = int(rng.integers(2**63))
    rnd = state.round
    log = RoundLog(rnd)
    d_thetas, d_gammas = [], []
    for pos in members:
        ds = clients[pos]
        crng = _client_rng(seed, rnd, ds.client_id)
        enc = client_encode(state, ds.features, crng)
        gen = server_generate(state, enc.descriptor.data)
        w = gen.bundle()
        upd = client_update(state.target_spec, w, ds, local, crng)
        d_theta, d_e = server_backprop(gen, upd.delta, state.config.sign)
        d_thetas.append(d_theta)
        sizes = [
            (MessageKind.ENCODER_DOWNLOAD, state.gamma.num_params),
            (MessageKind.DESCRIPTOR_UPLOAD, d_e.size),
            (MessageKind.MODEL_DOWNLOAD, w.num_params),
            (MessageKind.DELTA_UPLOAD, upd.delta.num_params),
        ]
        if update_encoder:
            d_gammas.append(client_backprop(enc, d_e, rnd))
            sizes += [(MessageKind.DESCRIPTOR_GRAD_DOWNLOAD, d_e.size), (MessageKind.ENCODER_GRAD_UPLOAD, state.gamma.num_params)]
        _log_entry(rnd, ds.client_id, sizes, log.transcript, log.entries, upd)

    new = copy_state(state)
    _apply_theta(new, _mean_bundles(d_thetas))
    if update_encoder:
        _apply_gamma(new, _mean_bundles(d_gammas))
    new.round = rnd + 1
    return new, log


# ---------------------------------------------------------------------------
# two-phase training


@dataclass(frozen=True)
class TwoPhaseConfig:
    phase1_rounds: int = 500
    phase2_epochs: int = 200
    phase3_rounds: int = 0
    cohort_size: int = 5
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)


@dataclass
class TwoPhaseResult:
    state: ServerState
    phase1_logs: List[RoundLog]
    phase2_losses: List[float]
    phase3_logs: List[RoundLog]


def embedding_round(
    state: ServerState,
    clients: Sequence[ClientDataset],
    cohort_size: int,
    rng: np.random.Generator,
    local: LocalTrainConfig,
) -> Tuple[ServerState, RoundLog]:
    """Phase-1 round: theta and the per-client embedding table, no encoder.

    Row ``i`` of the table belongs to ``clients[i]``.
    """
    if state.embeddings is None or len(state.embeddings) != len(clients):
        raise ProtocolError("embedding table must have one row per training client")
    members = sample_cohort(len(clients), cohort_size, rng)
    seed = int(rng.integers(2**63))
    rnd = state.round
    log = RoundLog(rnd)
    d_thetas, d_es = [], []
    for pos in members:
        ds = clients[pos]
        crng = _client_rng(seed, rnd, ds.client_id)
        gen = server_generate(state, state.embeddings[pos])
        w = gen.bundle()
        upd = client_update(state.target_spec, w, ds, local, crng)
        d_theta, d_e = server_backprop(gen, upd.delta, state.config.sign)
        d_thetas.append(d_theta)
        d_es.append(d_e)
        sizes = [(MessageKind.MODEL_DOWNLOAD, w.num_params), (MessageKind.DELTA_UPLOAD, upd.delta.num_params)]
        _log_entry(rnd, ds.client_id, sizes, log.transcript, log.entries, upd)
    new = copy_state(state)
    _apply_theta(new, _mean_bundles(d_thetas))
    table = state.embeddings.copy()
    for pos, d_e in zip(members, d_es):
        table[pos] = table[pos] - state.config.lr_embedding * d_e
    new.embeddings = table
    new.round = rnd + 1
    return new, log


def encoder_regression_loss(state: ServerState, clients: Sequence[ClientDataset], gamma: Optional[WeightBundle] = None) -> float:
    """Mean over clients of ``||g_gamma(X_i) - e_i||^2``."""
    g = gamma or state.gamma
    total = 0.0
    for pos, ds in enumerate(clients):
        e = encode_dataset(state.enc_spec, g, ds.features).data
        total += float(np.sum((e - state.embeddings[pos]) ** 2))
    return total / len(clients)


def encoder_regression_step(state: ServerState, clients: Sequence[ClientDataset]) -> Tuple[ServerState, float]:
    """One full-federation gradient step on the encoder regression loss.

    Each client computes its gradient locally against its own table row;
    the server averages. Returns the loss before the step.
    """
    grads, total = [], 0.0
    for pos, ds in enumerate(clients):
        with Tape() as tape:
            gamma = state.gamma.tensors(tape)
            e = encode_dataset(state.enc_spec, gamma, ds.features)
            diff = T.sub(e, Tensor(state.embeddings[pos]))
            loss = T.tsum(T.mul(diff, diff))
        total += float(loss.data)
        names = list(gamma)
        grads.append(dict(zip(names, T.grad(tape, loss, [gamma[k] for k in names]))))
    new = copy_state(state)
    _apply_gamma(new, _mean_bundles(grads))
    return new, total / len(clients)


def train_two_phase(
    state: ServerState,
    clients: Sequence[ClientDataset],
    cfg: TwoPhaseConfig,
    rng: np.random.Generator,
) -> TwoPhaseResult:
    """Embedding-table hypernetwork, then encoder regression, then optional fine-tuning.

    Before phase 3 changes theta, the phase-1 hypernetwork is kept in
    ``state.theta_pretune`` so training clients can still be served from it.
    """
    if cfg.phase1_rounds < 1:
        raise ValueError("phase 1 needs at least one round")
    if state.embeddings is None:
        state = copy_state(state)
        state.embeddings = rng.normal(0.0, 1.0 / np.sqrt(state.hn_spec.embedding_dim), (len(clients), state.hn_spec.embedding_dim))
    logs1, logs3, losses = [], [], []
    for _ in range(cfg.phase1_rounds):
        state, log = embedding_round(state, clients, cfg.cohort_size, rng, cfg.local)
        logs1.append(log)
    for _ in range(cfg.phase2_epochs):
        state, loss = encoder_regression_step(state, clients)
        losses.append(loss)
    if cfg.phase3_rounds > 0:
        state = copy_state(state)
        state.theta_pretune = state.theta
        state.theta_velocity = None
        for _ in range(cfg.phase3_rounds):
            state, log = train_round(state, clients, cfg.cohort_size, rng, cfg.local, update_encoder=False)
            logs3.append(log)
    return TwoPhaseResult(state, logs1, losses, logs3)


# ---------------------------------------------------------------------------
# losses and evaluation


def federation_loss(
    state: ServerState,
    clients: Sequence[ClientDataset],
    descriptor_fn: Optional[Callable[[int, ClientDataset], np.ndarray]] = None,
    theta: Optional[WeightBundle] = None,
) -> float:
    """Mean over clients of the mean cross-entropy of ``f_theta(e_i)`` on client ``i``.

    ``descriptor_fn(pos, ds)`` supplies ``e_i``; by default the encoder.
    """
    th = theta or state.theta
    total = 0.0
    for pos, ds in enumerate(clients):
        e = descriptor_fn(pos, ds) if descriptor_fn else encode_dataset(state.enc_spec, state.gamma, ds.features).data
        w = generate_weights(state.hn_spec, th, e)
        total += float(T.softmax_cross_entropy(forward_target(state.target_spec, w, ds.features), ds.labels).data)
    return total / len(clients)


def composite_loss_tape(state: ServerState, clients: Sequence[ClientDataset]):
    """Record the whole objective encoder -> hypernetwork -> target -> loss on one tape.

    Returns ``(tape, loss, theta_tensors, gamma_tensors)``.
    """
    with Tape() as tape:
        theta = state.theta.tensors(tape)
        gamma = state.gamma.tensors(tape)
        losses = []
        for ds in clients:
            e = encode_dataset(state.enc_spec, gamma, ds.features)
            w = generate_weights(state.hn_spec, theta, e)
            losses.append(T.softmax_cross_entropy(forward_target(state.target_spec, w, ds.features), ds.labels))
        total = losses[0]
        for l in losses[1:]:
            total = T.add(total, l)
        loss = T.scale(total, 1.0 / len(losses))
    return tape, loss, theta, gamma


def descriptor_for(state: ServerState, features: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return _encode(state, state.gamma, features, rng).data.copy()


def model_for(state: ServerState, features: np.ndarray, theta: Optional[WeightBundle] = None) -> WeightBundle:
    return WeightBundle(generate_weights(state.hn_spec, theta or state.theta, descriptor_for(state, features)))


# ---------------------------------------------------------------------------
# inference for a novel client


@dataclass
class InferenceResult:
    weights: WeightBundle
    descriptor: np.ndarray
    transcript: List[RoundMessage]
    sigma: float = 0.0


def infer_novel(state: ServerState, novel: UnlabeledClient, dp=None, rng: Optional[np.random.Generator] = None) -> InferenceResult:
    """Serve a personalized model to a client that only holds unlabeled data.

    ``dp`` (a :class:`odpfl.privacy.DPParams`) makes the client privatize its
    descriptor before upload; the server only ever sees that descriptor.
    """
    if not isinstance(novel, UnlabeledClient):
        raise TypeError("infer_novel takes an UnlabeledClient; call ClientDataset.unlabeled() first")
    if novel.m == 0:
        raise T.EmptySetError("empty client dataset")
    transcript = [RoundMessage(state.round, novel.client_id, MessageKind.ENCODER_DOWNLOAD, state.gamma.num_params)]
    sigma = 0.0
    if dp is None:
        e = descriptor_for(state, novel.features, rng)
    else:
        from .privacy import certify_encoder, privatize_descriptor

        if rng is None:
            raise ValueError("a random generator is required for private inference")
        cert = certify_encoder(state.enc_spec, state.gamma)
        # the sensitivity bound needs one mean over the whole set, never batched
        clean = encode_dataset(state.enc_spec, state.gamma, novel.features).data
        priv = privatize_descriptor(clean, replace(dp, m=novel.m), cert, rng)
        e, sigma = priv.values, priv.sigma
    transcript.append(RoundMessage(state.round, novel.client_id, MessageKind.DESCRIPTOR_UPLOAD, e.size))
    w = WeightBundle(generate_weights(state.hn_spec, state.theta, e))
    transcript.append(RoundMessage(state.round, novel.client_id, MessageKind.MODEL_DOWNLOAD, w.num_params))
    return InferenceResult(w, e, transcript, sigma)
