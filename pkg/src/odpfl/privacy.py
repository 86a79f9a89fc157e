"""(epsilon, delta)-DP for the descriptor a novel client uploads.

For a mean-pooled DeepSet ``g(D) = psi(mean phi(x))`` with linear ``psi``
(Lipschitz ``L_psi``) and ``||phi(x)|| <= B_phi``, replacing one sample moves
the descriptor by at most ``2 L_psi B_phi / |D|``. The Gaussian mechanism
then adds ``N(0, sigma^2)`` per coordinate with
``sigma^2 = 2 sens^2 ln(1.25/delta) / epsilon^2``.

Guarantees hold for a single query; repeated queries by one client compose
and are not accounted for here.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .data import ClientDataset
from .models import EncoderSpec, WeightBundle, accuracy, encode_dataset, generate_weights, phi_features, spectral_norm

logger = logging.getLogger(__name__)


class CertificationError(ValueError):
    """The encoder configuration does not admit a sensitivity bound."""


@dataclass(frozen=True)
class DPParams:
    epsilon: float
    delta: float = 0.01
    m: int = 1
    L_psi: Optional[float] = None
    B_phi: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.m < 1:
            raise ValueError("dataset size m must be at least 1")
        for name in ("L_psi", "B_phi"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class EncoderCertificate:
    L_psi: float
    B_phi: float


def certify_encoder(spec: EncoderSpec, gamma: WeightBundle) -> EncoderCertificate:
    """Constants for the sensitivity bound, or refuse.

    Needs unit-sphere ``phi`` (so ``B_phi = 1``) and pure mean pooling. ``psi``
    is either the identity (``L_psi = 1``) or a linear head whose spectral norm
    is measured.
    """
    if not spec.unit_sphere_normalize:
        raise CertificationError("phi outputs are not normalized; B_phi is unbounded")
    if spec.pool_split:
        raise CertificationError("max pooling has no 1/|D| sensitivity bound; disable pool_split")
    if spec.psi_kind == "identity_mean":
        return EncoderCertificate(1.0, 1.0)
    # power iteration converges from below; pad by its tolerance
    return EncoderCertificate(spectral_norm(gamma["psi.weight"]) * (1 + 1e-6), 1.0)


def sensitivity_bound(L_psi: float, B_phi: float, m: int) -> float:
    if m < 1:
        raise ValueError("dataset size must be at least 1")
    return 2.0 / m * L_psi * B_phi


def gaussian_sigma(sensitivity: float, epsilon: float, delta: float) -> float:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0.0 < delta < 1.25:
        raise ValueError("delta must lie in (0, 1.25) for ln(1.25/delta) to be positive")
    return math.sqrt(2.0 * sensitivity**2 * math.log(1.25 / delta) / epsilon**2)


@dataclass(frozen=True)
class PrivatizedDescriptor:
    values: np.ndarray
    sigma: float
    params: DPParams


def privatize_descriptor(
    e: np.ndarray,
    dp: DPParams,
    certificate: EncoderCertificate,
    rng: np.random.Generator,
) -> PrivatizedDescriptor:
    """Add calibrated Gaussian noise to a clean descriptor (client side)."""
    if not isinstance(certificate, EncoderCertificate):
        raise CertificationError("an EncoderCertificate from certify_encoder is required")
    L = certificate.L_psi if dp.L_psi is None else dp.L_psi
    B = certificate.B_phi if dp.B_phi is None else dp.B_phi
    if L < certificate.L_psi or B < certificate.B_phi:
        raise CertificationError(f"claimed constants (L={L}, B={B}) are below the certified ones")
    sigma = gaussian_sigma(sensitivity_bound(L, B, dp.m), dp.epsilon, dp.delta)
    e = np.asarray(e, dtype=np.float64)
    noise = rng.normal(0.0, sigma, e.shape) if sigma > 0 else np.zeros_like(e)
    return PrivatizedDescriptor(e + noise, sigma, replace(dp, L_psi=L, B_phi=B))


def _require_certified(spec: EncoderSpec, gamma: WeightBundle) -> EncoderCertificate:
    return certify_encoder(spec, gamma)


def empirical_sensitivity(
    spec: EncoderSpec,
    gamma: WeightBundle,
    base: np.ndarray,
    trials: int,
    rng: np.random.Generator,
    candidates: Optional[np.ndarray] = None,
) -> float:
    """Largest descriptor change seen over random adjacent pairs.

    Each trial swaps one random sample of ``base`` for a fresh one drawn from
    ``candidates`` (default: Gaussian samples matching the per-feature mean
    and std of ``base``). This is a lower estimate of the sensitivity, an
    audit and not a proof.
    """
    _require_certified(spec, gamma)
    if trials < 1:
        raise ValueError("trials must be at least 1")
    base = np.asarray(base, dtype=np.float64)
    if candidates is None:
        mu, sd = base.mean(axis=0), base.std(axis=0) + 1e-12
        candidates = mu + sd * rng.standard_normal((trials, base.shape[1]))
    g0 = encode_dataset(spec, gamma, base).data
    worst = 0.0
    for _ in range(trials):
        j = rng.integers(len(base))
        other = base.copy()
        other[j] = candidates[rng.integers(len(candidates))]
        worst = max(worst, float(np.linalg.norm(encode_dataset(spec, gamma, other).data - g0)))
    return worst


def adversarial_pair_sensitivity(spec: EncoderSpec, gamma: WeightBundle, candidates: np.ndarray, m: int = 2) -> float:
    """Descriptor change for a hand-picked near-worst adjacent pair.

    Picks the two candidates whose ``phi`` outputs are closest to antipodal
    and swaps one for the other in a set of size ``m``.
    """
    _require_certified(spec, gamma)
    candidates = np.asarray(candidates, dtype=np.float64)
    if len(candidates) < m + 1:
        raise ValueError("need at least m + 1 candidates")
    z = phi_features(spec, gamma, candidates).data
    gram = z @ z.T
    i, j = np.unravel_index(np.argmin(gram), gram.shape)
    rest = [k for k in range(len(candidates)) if k not in (i, j)][: m - 1]
    d1 = candidates[[i, *rest]]
    d2 = candidates[[j, *rest]]
    return float(np.linalg.norm(encode_dataset(spec, gamma, d1).data - encode_dataset(spec, gamma, d2).data))


# ---------------------------------------------------------------------------
# privacy/accuracy sweep


@dataclass
class SweepRow:
    epsilon: float
    delta: float
    m: Optional[int]
    sigma: float
    accuracy_mean: float
    accuracy_sem: float
    repeats: int

    def csv_row(self) -> list:
        return [
            "inf" if math.isinf(self.epsilon) else repr(self.epsilon),
            repr(self.delta),
            "all" if self.m is None else self.m,
            repr(self.sigma),
            repr(self.accuracy_mean),
            repr(self.accuracy_sem),
            self.repeats,
        ]


SWEEP_HEADER = ["epsilon", "delta", "m", "sigma", "accuracy_mean", "accuracy_sem", "repeats"]


def sem(values: Sequence[float]) -> float:
    """Sample standard deviation over sqrt(n); 0 for fewer than two values."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(v.std(ddof=1) / math.sqrt(len(v)))


def dp_accuracy_sweep(
    state,
    novel: Sequence[ClientDataset],
    epsilons: Sequence[float],
    sizes: Sequence[int],
    repeats: int,
    rng: np.random.Generator,
    delta: float = 0.01,
) -> List[SweepRow]:
    """Novel-client accuracy under private descriptors, for each (epsilon, m).

    Per repeat, every novel client subsamples ``m`` of its points, encodes
    and privatizes them, and the generated model is scored on all of that
    client's points; the repeat's score is the mean over clients. Rows
    report mean and SEM over repeats. The first row is the noiseless
    reference computed from each client's full data.
    """
    from .protocol import infer_novel

    cert = certify_encoder(state.enc_spec, state.gamma)
    spec, target = state.enc_spec, state.target_spec

    ref = [accuracy(target, infer_novel(state, c.unlabeled()).weights, c.features, c.labels) for c in novel]
    rows = [SweepRow(math.inf, delta, None, 0.0, float(np.mean(ref)), 0.0, 1)]

    smallest = min(c.m for c in novel)
    for eps in epsilons:
        for m in sizes:
            if m > smallest:
                logger.warning("skipping m=%d: a novel client has only %d samples", m, smallest)
                continue
            dp = DPParams(eps, delta, m)
            sigma = gaussian_sigma(sensitivity_bound(cert.L_psi, cert.B_phi, m), eps, delta)
            scores = []
            for _ in range(repeats):
                accs = []
                for c in novel:
                    idx = rng.choice(c.m, size=m, replace=False)
                    e = encode_dataset(spec, state.gamma, c.features[idx]).data
                    e_priv = privatize_descriptor(e, dp, cert, rng).values
                    w = generate_weights(state.hn_spec, state.theta, e_priv)
                    accs.append(accuracy(target, w, c.features, c.labels))
                scores.append(float(np.mean(accs)))
            rows.append(SweepRow(float(eps), delta, m, sigma, float(np.mean(scores)), sem(scores), repeats))
    return rows
