"""Client datasets, non-IID splitters, synthetic federations and shift diagnostics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import expm

logger = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class UnlabeledClient:
    """Label-free view of a client, the only thing inference code accepts."""

    client_id: int
    features: np.ndarray

    @property
    def m(self) -> int:
        return int(self.features.shape[0])


@dataclass
class ClientDataset:
    client_id: int
    features: np.ndarray
    labels: Optional[np.ndarray]
    num_classes: int
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be a matrix, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError("labels and features disagree on sample count")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"labels outside [0, {self.num_classes})")

    @property
    def m(self) -> int:
        return int(self.features.shape[0])

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def label_histogram(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError(f"client {self.client_id} has no labels")
        return np.bincount(self.labels, minlength=self.num_classes)

    def unlabeled(self) -> UnlabeledClient:
        return UnlabeledClient(self.client_id, self.features)

    def subset(self, idx: np.ndarray) -> "ClientDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ClientDataset(
            self.client_id,
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.num_classes,
            None if self.indices is None else self.indices[idx],
        )


def train_val_split(ds: ClientDataset, train_fraction: float, rng: np.random.Generator) -> Tuple[ClientDataset, ClientDataset]:
    """Random split of one client's samples; the train part keeps at least one sample."""
    if not 0.0 < train_fraction <= 1.0:
        raise ConfigurationError("train_fraction must lie in (0, 1]")
    perm = rng.permutation(ds.m)
    n_train = min(ds.m, max(1, int(round(train_fraction * ds.m))))
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


@dataclass
class SplitResult:
    clients: List[ClientDataset]
    dropped: np.ndarray

    def manifest_rows(self) -> List[Tuple[int, str]]:
        return [(c.client_id, " ".join(str(i) for i in c.indices)) for c in self.clients]


def write_split_manifest(path: Union[str, Path], result: SplitResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["client_id", "sample_indices"])
        w.writerows(result.manifest_rows())
        w.writerow(["dropped", " ".join(str(i) for i in result.dropped)])


# ---------------------------------------------------------------------------
# splitters


def pathological_split(features: np.ndarray, labels: np.ndarray, n_clients: int, shards: int, seed: int) -> SplitResult:
    """Sort by label, cut into ``n_clients * shards`` equal shards, deal ``shards`` per client.

    The ``len(labels) mod (n_clients * shards)`` samples at the end of the
    sorted order are dropped and reported in ``SplitResult.dropped``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_shards = n_clients * shards
    if n_clients < 1 or shards < 1:
        raise ConfigurationError("need at least one client and one shard per client")
    if n_shards > len(labels):
        raise ConfigurationError(f"{n_shards} shards requested but only {len(labels)} samples")
    num_classes = int(labels.max()) + 1 if labels.size else 0
    order = np.argsort(labels, kind="stable")
    size = len(labels) // n_shards
    used = size * n_shards
    shard_idx = order[:used].reshape(n_shards, size)
    perm = np.random.default_rng(seed).permutation(n_shards)
    clients = []
    for i in range(n_clients):
        idx = np.concatenate([shard_idx[s] for s in perm[i * shards : (i + 1) * shards]])
        clients.append(ClientDataset(i, features[idx], labels[idx], num_classes, idx))
    return SplitResult(clients, np.sort(order[used:]))


def _largest_remainder(q: np.ndarray, total: int) -> np.ndarray:
    raw = q * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # ties resolved by class index
        order = np.lexsort((np.arange(len(q)), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def class_counts(q: np.ndarray, quota: int, rng: np.random.Generator, sampling: str = "rounded") -> np.ndarray:
    """Per-class sample counts for a client with label distribution ``q``.

    ``rounded`` takes the expected counts with largest-remainder rounding;
    ``multinomial`` draws them.
    """
    if sampling == "rounded":
        return _largest_remainder(q, quota)
    if sampling == "multinomial":
        return rng.multinomial(quota, q)
    raise ValueError(f"unknown sampling {sampling!r}")


def dirichlet_proportions(alpha: float, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    q = rng.dirichlet(np.full(num_classes, float(alpha)))
    if not np.all(np.isfinite(q)) or q.sum() <= 0:
        # all gamma draws underflowed, which happens for tiny alpha
        q = np.zeros(num_classes)
        q[rng.integers(num_classes)] = 1.0
    return q


def dirichlet_split(
    features: np.ndarray,
    labels: np.ndarray,
    n_clients: int,
    alpha: float,
    seed: int,
    quotas: Optional[Sequence[int]] = None,
    sampling: str = "rounded",
) -> SplitResult:
    """Label-skewed split with client label proportions ``q_i ~ Dir(alpha)``.

    Every client gets an equal quota (``len(labels) // n_clients``) unless
    ``quotas`` is given. Samples are taken without replacement from shuffled
    per-class pools. When a pool runs dry the client's ``q_i`` is
    renormalized over the classes that still have samples and the shortfall
    is redrawn; each fallback is logged. Leftover samples are returned in
    ``dropped``.
    """
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    if quotas is None:
        quotas = [len(labels) // n_clients] * n_clients
    if len(quotas) != n_clients or sum(quotas) > len(labels):
        raise ConfigurationError("quotas must have one entry per client and fit in the dataset")
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(num_classes)]
    clients = []
    for i in range(n_clients):
        q = dirichlet_proportions(alpha, num_classes, rng)
        need = class_counts(q, quotas[i], rng, sampling)
        taken: List[int] = []
        while True:
            short = 0
            for c in range(num_classes):
                k = min(int(need[c]), len(pools[c]))
                taken.extend(pools[c][:k])
                del pools[c][:k]
                short += int(need[c]) - k
            if short == 0:
                break
            avail = np.array([len(p) > 0 for p in pools], dtype=float)
            if not avail.any():
                logger.warning("client %d: all class pools exhausted, %d samples short", i, short)
                break
            logger.info("client %d: pool exhausted, redrawing %d samples over remaining classes", i, short)
            q = q * avail
            q = q / q.sum() if q.sum() > 0 else avail / avail.sum()
            need = class_counts(q, short, rng, sampling)
        idx = np.sort(np.array(taken, dtype=np.int64))
        clients.append(ClientDataset(i, features[idx], labels[idx], num_classes, idx))
    dropped = np.sort(np.array([j for p in pools for j in p], dtype=np.int64))
    return SplitResult(clients, dropped)


# ---------------------------------------------------------------------------
# synthetic federations


@dataclass(frozen=True)
class FederationSpec:
    """Class-conditional Gaussian federation.

    Class centroids sit on a scaled orthonormal frame so every pair of
    centroids is ``class_sep`` apart (in units of ``noise_std``) when
    ``feature_dim >= num_classes``. ``split`` picks the label heterogeneity:
    ``dirichlet`` (``alpha``), ``pathological`` (``shards`` per client) or
    ``iid``. ``client_rotation`` > 0 adds a per-client random rotation of the
    feature space on top of the label skew.
    """

    n_clients: int = 55
    n_novel: Optional[int] = None
    samples_per_client: int = 100
    novel_samples_per_client: Optional[int] = None
    feature_dim: int = 16
    num_classes: int = 10
    class_sep: float = 3.0
    noise_std: float = 1.0
    split: str = "dirichlet"
    alpha: float = 0.1
    shards: int = 2
    client_rotation: float = 0.0
    train_fraction: float = 0.85

    @property
    def novel_count(self) -> int:
        return self.n_novel if self.n_novel is not None else max(1, self.n_clients // 10)

    @property
    def train_count(self) -> int:
        return self.n_clients - self.novel_count


@dataclass
class Federation:
    spec: FederationSpec
    train: List[ClientDataset]
    novel: List[ClientDataset]
    centroids: np.ndarray = field(repr=False, default=None)


def _centroids(spec: FederationSpec, rng: np.random.Generator) -> np.ndarray:
    d, c = spec.feature_dim, spec.num_classes
    if d >= c:
        q, _ = np.linalg.qr(rng.standard_normal((d, c)))
        frame = q.T
    else:
        frame = rng.standard_normal((c, d))
        frame /= np.linalg.norm(frame, axis=1, keepdims=True)
    return frame * (spec.class_sep * spec.noise_std / np.sqrt(2.0))


def make_synthetic_federation(spec: FederationSpec, seed: int) -> Federation:
    """Generate train and novel clients; identical ``(spec, seed)`` give identical data."""
    if spec.num_classes < 1 or spec.feature_dim < 1:
        raise ConfigurationError("need at least one class and one feature")
    if spec.train_count < 1 or spec.novel_count < 0:
        raise ConfigurationError("need at least one training client")
    rng = np.random.default_rng(seed)
    centroids = _centroids(spec, rng)
    roles = rng.permutation(spec.n_clients)
    novel_ids = set(int(i) for i in roles[: spec.novel_count])
    novel_m = spec.novel_samples_per_client or spec.samples_per_client
    quotas = [novel_m if i in novel_ids else spec.samples_per_client for i in range(spec.n_clients)]
    C = spec.num_classes

    if spec.split == "pathological":
        if len(set(quotas)) != 1:
            raise ConfigurationError("pathological split needs equal client sizes")
        total = sum(quotas)
        pool = np.repeat(np.arange(C), -(-total // C))[:total]
        res = pathological_split(np.zeros((total, 1)), pool, spec.n_clients, spec.shards, int(rng.integers(2**31)))
        label_sets = [c.labels for c in res.clients]
    elif spec.split in ("dirichlet", "iid"):
        label_sets = []
        for i in range(spec.n_clients):
            if spec.split == "iid":
                counts = rng.multinomial(quotas[i], np.full(C, 1.0 / C))
            else:
                counts = class_counts(dirichlet_proportions(spec.alpha, C, rng), quotas[i], rng)
            label_sets.append(np.repeat(np.arange(C), counts))
    else:
        raise ConfigurationError(f"unknown split {spec.split!r}")

    train, novel = [], []
    for i in range(spec.n_clients):
        y = rng.permutation(label_sets[i])
        x = centroids[y] + spec.noise_std * rng.standard_normal((len(y), spec.feature_dim))
        if spec.client_rotation > 0:
            x = x @ rotation_matrix(spec.feature_dim, spec.client_rotation, int(rng.integers(2**31))).T
        ds = ClientDataset(i, x, y, C)
        (novel if i in novel_ids else train).append(ds)
    return Federation(spec, train, novel, centroids)


# ---------------------------------------------------------------------------
# covariate corruption


def rotation_matrix(dim: int, severity: float, seed: int) -> np.ndarray:
    """Seeded orthogonal matrix ``expm(severity * A)``.

    ``A`` is a random skew-symmetric matrix scaled to spectral norm pi, so
    severity 1 rotates the most-affected plane by half a turn and severity 0
    is the identity.
    """
    g = np.random.default_rng(seed).standard_normal((dim, dim))
    a = g - g.T
    a *= np.pi / np.linalg.norm(a, 2)
    return expm(severity * a)


def corrupt_covariate(ds: ClientDataset, kind: str, severity: float, seed: int = 0) -> ClientDataset:
    """Feature-space corruption of one client.

    ``rotation`` applies :func:`rotation_matrix`; ``additive_noise`` adds
    zero-mean Gaussian noise with per-feature std ``severity * feature_std``.
    """
    if severity < 0:
        raise ValueError("severity must be non-negative")
    if kind not in ("rotation", "additive_noise"):
        raise ValueError(f"unknown corruption {kind!r}")
    if severity == 0:
        return replace(ds)
    if kind == "rotation":
        x = ds.features @ rotation_matrix(ds.features.shape[1], severity, seed).T
    else:
        std = ds.features.std(axis=0)
        x = ds.features + np.random.default_rng(seed).standard_normal(ds.features.shape) * (severity * std)
    return replace(ds, features=x)


# ---------------------------------------------------------------------------
# shift diagnostics


def label_kl(a: Sequence[float], b: Sequence[float], smoothing: float = 1e-3) -> float:
    """``KL(p_a || p_b)`` between smoothed, renormalized label histograms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("histograms must have the same class count")
    p = a / a.sum() + smoothing
    q = b / b.sum() + smoothing
    p /= p.sum()
    q /= q.sum()
    return max(0.0, float(np.sum(p * np.log(p / q))))


def kl_to_nearest_train(novel: ClientDataset, train: Sequence[ClientDataset], smoothing: float = 1e-3) -> float:
    if not train:
        raise ValueError("no training clients to compare against")
    h = novel.label_histogram
    return min(label_kl(h, t.label_histogram, smoothing) for t in train)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=float) / np.sum(p)
    q = np.asarray(q, dtype=float) / np.sum(q)
    return 0.5 * float(np.abs(p - q).sum())


# ---------------------------------------------------------------------------
# ingestion


def read_feature_csv(path: Union[str, Path], num_classes: Optional[int] = None) -> List[ClientDataset]:
    """Read ``client_id,label,f0,...`` rows into one dataset per client.

    A header row is skipped when its first field is not an integer. Empty
    labels mark unlabeled clients (all of a client's labels must be present
    or all absent).
    """
    rows: Dict[int, Tuple[list, list]] = {}
    with open(path, newline="") as f:
        for k, r in enumerate(csv.reader(f)):
            if not r:
                continue
            if k == 0:
                try:
                    int(r[0])
                except ValueError:
                    continue
            cid = int(r[0])
            feats, labs = rows.setdefault(cid, ([], []))
            labs.append(None if r[1].strip() == "" else int(r[1]))
            feats.append([float(v) for v in r[2:]])
    return _group(rows, num_classes)


def _group(rows: Dict[int, Tuple[list, list]], num_classes: Optional[int]) -> List[ClientDataset]:
    all_labels = [l for _, labs in rows.values() for l in labs if l is not None]
    C = num_classes if num_classes is not None else (max(all_labels) + 1 if all_labels else 1)
    out = []
    for cid in sorted(rows):
        feats, labs = rows[cid]
        if any(l is None for l in labs) and not all(l is None for l in labs):
            raise ValueError(f"client {cid} mixes labeled and unlabeled rows")
        y = None if labs[0] is None else np.array(labs)
        out.append(ClientDataset(cid, np.array(feats), y, C))
    return out


def write_feature_csv(path: Union[str, Path], clients: Iterable[ClientDataset]) -> None:
    clients = list(clients)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if clients:
            w.writerow(["client_id", "label", *[f"f{j}" for j in range(clients[0].features.shape[1])]])
        for c in clients:
            for j in range(c.m):
                lab = "" if c.labels is None else int(c.labels[j])
                w.writerow([c.client_id, lab, *("%.17g" % v for v in c.features[j])])


def read_feature_bundle(path: Union[str, Path], num_classes: Optional[int] = None) -> List[ClientDataset]:
    """Binary variant: a bundle with ``client_id``, ``label`` (NaN = unlabeled) and ``features``."""
    from .formats import read_bundle

    b = read_bundle(path)
    rows: Dict[int, Tuple[list, list]] = {}
    for cid, lab, x in zip(b["client_id"], b["label"], b["features"]):
        feats, labs = rows.setdefault(int(cid), ([], []))
        labs.append(None if np.isnan(lab) else int(lab))
        feats.append(list(x))
    return _group(rows, num_classes)
