"""Data-level Gaussian mechanism, k-anonymous client grouping, and microaggregation."""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PrivacyError, ShapeError


@dataclass
class PrivacyConfig:
    """Noise and grouping settings.

    ``sigma2`` is the noise variance in squared pixel units. ``epsilon``,
    ``delta`` and ``sensitivity`` only matter when the variance is derived
    with :meth:`calibrated`.
    """

    sigma2: float = 0.0
    epsilon: float = 1.0
    delta: float = 1e-5
    sensitivity: float = 1.0
    k: int = 1
    dp_enabled: bool = False
    ka_enabled: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.sigma2 < 0:
            raise ConfigError(f"sigma2 must be >= 0, got {self.sigma2}", key="privacy.sigma2")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}", key="privacy.k")
        if self.dp_enabled and self.sigma2 <= 0:
            raise ConfigError("dp_enabled requires sigma2 > 0", key="privacy.dp_enabled")
        if self.ka_enabled and self.k < 2:
            raise ConfigError("ka_enabled requires k >= 2", key="privacy.ka_enabled")
        if self.epsilon <= 0 or not 0 < self.delta < 1 or self.sensitivity <= 0:
            raise ConfigError("need epsilon > 0, 0 < delta < 1, sensitivity > 0", key="privacy")

    @classmethod
    def calibrated(cls, epsilon, delta, sensitivity=1.0, **kwargs):
        """Config whose variance is the square of the minimal Gaussian-mechanism scale."""
        sigma = calibrate_sigma(epsilon, delta, sensitivity)
        kwargs.setdefault("dp_enabled", True)
        return cls(sigma2=sigma * sigma, epsilon=epsilon, delta=delta, sensitivity=sensitivity, **kwargs)

    @property
    def noise_std(self):
        return math.sqrt(self.sigma2)


def calibrate_sigma(epsilon, delta, sensitivity=1.0):
    """Smallest noise standard deviation giving (epsilon, delta)-DP.

    sigma >= sensitivity * sqrt(2 ln(1.25 / delta)) / epsilon
    """
    if not epsilon > 0:
        raise PrivacyError(f"epsilon must be > 0, got {epsilon}", epsilon=epsilon)
    if not 0 < delta < 1:
        raise PrivacyError(f"delta must lie in (0, 1), got {delta}", delta=delta)
    if not sensitivity > 0:
        raise PrivacyError(f"sensitivity must be > 0, got {sensitivity}", sensitivity=sensitivity)
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def gaussian_mechanism(batch, sigma2, rng):
    """``batch`` plus i.i.d. N(0, sigma2) noise. No draw is made when sigma2 == 0."""
    if sigma2 < 0:
        raise PrivacyError(f"sigma2 must be >= 0, got {sigma2}", sigma2=sigma2)
    if sigma2 == 0:
        return batch.copy()
    noise = rng.normal(0.0, math.sqrt(sigma2), size=batch.shape)
    return (batch + noise).astype(batch.dtype, copy=False)


@dataclass(frozen=True)
class GroupAssignment:
    groups: tuple
    round: int = 0

    def group_of(self, client_id):
        for i, g in enumerate(self.groups):
            if client_id in g:
                return i
        raise KeyError(client_id)


def group_clients(client_ids, k, rng, round_index=0):
    """Random partition into floor(n/k) groups, each of size >= k.

    The n mod k leftover clients are dealt round-robin, so group sizes are
    k or k+1 whenever n mod k <= n // k and differ by at most one otherwise.
    Each group is returned sorted by client id.
    """
    ids = list(client_ids)
    n = len(ids)
    if k < 1:
        raise PrivacyError(f"k must be >= 1, got {k}", k=k)
    if n < k:
        raise PrivacyError(f"cannot form groups of {k} from {n} clients", n=n, k=k)
    order = [ids[i] for i in rng.permutation(n)]
    m = n // k
    groups = [order[i * k:(i + 1) * k] for i in range(m)]
    for j, c in enumerate(order[m * k:]):
        groups[j % m].append(c)
    return GroupAssignment(tuple(tuple(sorted(g)) for g in groups), round_index)


def microaggregate(smashed, group=None):
    """Element-wise mean of the group members' smashed tensors (accumulated in float64)."""
    tensors = list(smashed)
    if not tensors:
        raise ShapeError("microaggregate needs at least one tensor")
    if group is not None and len(group) != len(tensors):
        raise ShapeError(f"{len(tensors)} tensors for a group of {len(group)}", members=tuple(group))
    shape = tensors[0].shape
    labels = list(group) if group is not None else list(range(len(tensors)))
    offenders = [labels[i] for i, t in enumerate(tensors) if t.shape != shape]
    if offenders:
        raise ShapeError(
            f"smashed shapes differ within group: {offenders} do not match {shape}",
            offenders=offenders, expected=shape,
        )
    acc = np.zeros(shape, np.float64)
    for t in tensors:
        acc += t
    return (acc / len(tensors)).astype(tensors[0].dtype)
