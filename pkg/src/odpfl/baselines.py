"""FL and adapted-PFL comparison methods on the shared target model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import ClientDataset
from .models import TargetModelSpec, WeightBundle, accuracy, forward_target, generate_weights, init_target
from .protocol import (
    ClientRoundEntry,
    LocalTrainConfig,
    LocalUpdate,
    MessageKind,
    ProtocolError,
    RoundLog,
    RoundMessage,
    ServerState,
    _client_rng,
    client_update,
    embedding_round,
    sample_cohort,
)


@dataclass
class GlobalModelState:
    spec: TargetModelSpec
    weights: WeightBundle
    round: int = 0


def init_global(spec: TargetModelSpec, rng: np.random.Generator) -> GlobalModelState:
    return GlobalModelState(spec, init_target(spec, rng))


def weighted_average(bundles: Sequence[WeightBundle], sizes: Sequence[float]) -> WeightBundle:
    """Average of bundles with weights proportional to ``sizes``."""
    if not bundles:
        raise ValueError("nothing to aggregate")
    total = float(sum(sizes))
    out = {}
    for k in bundles[0]:
        acc = np.zeros_like(bundles[0][k])
        for b, s in zip(bundles, sizes):
            acc = acc + (s / total) * b[k]
        out[k] = acc
    return WeightBundle(out)


def fedprox_local_update(
    spec: TargetModelSpec,
    w_global: WeightBundle,
    data: ClientDataset,
    mu: float,
    cfg: LocalTrainConfig,
    rng: np.random.Generator,
) -> LocalUpdate:
    """Local update on ``loss + mu/2 ||w - w_global||^2``."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    return client_update(spec, w_global, data, cfg, rng, prox_mu=mu)


def fedavg_round(
    state: GlobalModelState,
    clients: Sequence[ClientDataset],
    cohort_size: int,
    cfg: LocalTrainConfig,
    rng: np.random.Generator,
    prox_mu: float = 0.0,
    cohort: Optional[Sequence[int]] = None,
) -> Tuple[GlobalModelState, RoundLog]:
    """Cohort trains from the global model; the server takes the size-weighted mean."""
    if not clients:
        raise ProtocolError("empty federation")
    members = list(cohort) if cohort is not None else sample_cohort(len(clients), cohort_size, rng)
    if not members:
        raise ProtocolError("empty cohort")
    seed = int(rng.integers(2**63))
    log = RoundLog(state.round)
    results, sizes = [], []
    n = state.weights.num_params
    for pos in members:
        ds = clients[pos]
        crng = _client_rng(seed, state.round, ds.client_id)
        upd = fedprox_local_update(state.spec, state.weights, ds, prox_mu, cfg, crng)
        results.append(WeightBundle({k: state.weights[k] + upd.delta[k] for k in state.weights}))
        sizes.append(ds.m)
        log.transcript += [
            RoundMessage(state.round, ds.client_id, MessageKind.MODEL_DOWNLOAD, n),
            RoundMessage(state.round, ds.client_id, MessageKind.DELTA_UPLOAD, n),
        ]
        log.entries.append(ClientRoundEntry(ds.client_id, upd.loss_before, upd.loss_after, 8 * n, 8 * n))
    return GlobalModelState(state.spec, weighted_average(results, sizes), state.round + 1), log


# ---------------------------------------------------------------------------
# personalized pool (embedding-table hypernetwork)


@dataclass
class PersonalizedPool:
    spec: TargetModelSpec
    bundles: List[WeightBundle]
    client_ids: List[int] = field(default_factory=list)


def materialize_pool(state: ServerState, client_ids: Sequence[int]) -> PersonalizedPool:
    """One generated model per row of the embedding table."""
    if state.embeddings is None:
        raise ValueError("server has no embedding table")
    bundles = [WeightBundle(generate_weights(state.hn_spec, state.theta, e)) for e in state.embeddings]
    return PersonalizedPool(state.target_spec, bundles, list(client_ids))


def build_personalized_pool(
    state: ServerState,
    clients: Sequence[ClientDataset],
    rounds: int,
    cohort_size: int,
    cfg: LocalTrainConfig,
    rng: np.random.Generator,
) -> Tuple[PersonalizedPool, ServerState]:
    for _ in range(rounds):
        state, _ = embedding_round(state, clients, cohort_size, rng, cfg)
    return materialize_pool(state, [c.client_id for c in clients]), state


def pfl_sampled(pool: PersonalizedPool, novel: ClientDataset) -> float:
    """Expected accuracy of a uniformly drawn pool member on ``novel``."""
    if not pool.bundles:
        raise ValueError("empty pool")
    return float(np.mean([accuracy(pool.spec, b, novel.features, novel.labels) for b in pool.bundles]))


def pfl_ensemble(pool: PersonalizedPool, x: np.ndarray) -> np.ndarray:
    """Logits averaged over every pool member."""
    if not pool.bundles:
        raise ValueError("empty pool")
    acc = forward_target(pool.spec, pool.bundles[0], x).data.copy()
    for b in pool.bundles[1:]:
        acc += forward_target(pool.spec, b, x).data
    return acc / len(pool.bundles)


def ensemble_accuracy(pool: PersonalizedPool, novel: ClientDataset) -> float:
    return float(np.mean(np.argmax(pfl_ensemble(pool, novel.features), axis=1) == novel.labels))


def a_distance(a: np.ndarray, b: np.ndarray, steps: int = 200, lr: float = 0.5, seed: int = 0) -> float:
    """Proxy A-distance ``2 (1 - 2 err)`` from a logistic domain classifier.

    Features are standardized with the pooled mean and std, each set is
    split in half for training and held-out scoring, and the classifier
    runs ``steps`` full-batch gradient steps. Clamped to [0, 2].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each set needs at least two samples to split")
    both = np.vstack([a, b])
    mu, sd = both.mean(axis=0), both.std(axis=0)
    sd[sd == 0] = 1.0
    a, b = (a - mu) / sd, (b - mu) / sd
    rng = np.random.default_rng(seed)
    pa, pb = rng.permutation(len(a)), rng.permutation(len(b))
    ha, hb = len(a) // 2, len(b) // 2
    x_tr = np.vstack([a[pa[:ha]], b[pb[:hb]]])
    y_tr = np.r_[np.zeros(ha), np.ones(hb)]
    x_te = np.vstack([a[pa[ha:]], b[pb[hb:]]])
    y_te = np.r_[np.zeros(len(a) - ha), np.ones(len(b) - hb)]
    w = np.zeros(x_tr.shape[1])
    c = 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(x_tr @ w + c)))
        r = p - y_tr
        w -= lr * x_tr.T @ r / len(y_tr)
        c -= lr * r.mean()
    err = float(np.mean(((x_te @ w + c) > 0) != y_te))
    return float(min(2.0, max(0.0, 2.0 * (1.0 - 2.0 * err))))


def pfl_nearest(
    pool: PersonalizedPool,
    train_features: Sequence[np.ndarray],
    novel_features: np.ndarray,
    seed: int = 0,
) -> Tuple[WeightBundle, int]:
    """Pool member of the training client closest to the novel one in A-distance."""
    if len(train_features) != len(pool.bundles):
        raise ValueError("pool and training clients are not aligned")
    dists = [a_distance(x, novel_features, seed=seed) for x in train_features]
    j = int(np.argmin(dists))
    return pool.bundles[j], j
