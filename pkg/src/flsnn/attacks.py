"""Non-omniscient Byzantine update generators.

The crafting functions only ever see benign *updates* (a ``BenignView``),
never client data. Statistics are accumulated in float64 and the crafted
vector is rounded once to the dtype of the benign updates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import norm

AttackKind = Literal["none", "noise", "alie", "minmax", "ipm"]
Perturbation = Literal["unit-negative-mean", "negative-sign", "negative-std"]


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind = "none"
    malicious_fraction: float = 0.0
    sigma: float = 0.1
    epsilon: float = 1.0
    perturbation: Perturbation = "unit-negative-mean"
    tau: float = 1e-5

    def __post_init__(self):
        if self.kind not in ("none", "noise", "alie", "minmax", "ipm"):
            raise AttackConfigError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.malicious_fraction < 0.5:
            raise AttackConfigError("malicious_fraction must lie in [0, 0.5)")
        if self.kind == "noise" and self.sigma <= 0:
            raise AttackConfigError("noise attack needs sigma > 0")
        if self.kind == "ipm" and self.epsilon < 0:
            raise AttackConfigError("ipm epsilon must be non-negative")
        if self.kind == "minmax":
            if self.tau <= 0:
                raise AttackConfigError("minmax tau must be positive")
            if self.perturbation not in ("unit-negative-mean", "negative-sign", "negative-std"):
                raise AttackConfigError(f"unknown perturbation {self.perturbation!r}")

    def num_byzantine(self, num_clients: int) -> int:
        if self.kind == "none":
            return 0
        m = math.ceil(self.malicious_fraction * num_clients - 1e-9)
        if 2 * m >= num_clients:
            raise AttackConfigError(f"{m} Byzantine of {num_clients} clients is not a minority")
        return m

    @property
    def intensity(self) -> Optional[float]:
        """The knob the pre-evaluation sweeps vary for this kind."""
        return {"noise": self.sigma, "ipm": self.epsilon, "alie": self.malicious_fraction,
                "minmax": self.malicious_fraction}.get(self.kind)


@dataclass
class BenignView:
    """What a colluding adversary observes in one round: benign updates and counts."""

    updates: np.ndarray          # (n - m, d)
    num_clients: int             # n
    num_byzantine: int           # m

    def __post_init__(self):
        self.updates = np.atleast_2d(np.asarray(self.updates))
        if self.updates.shape[0] != self.num_clients - self.num_byzantine:
            raise AttackConfigError("view must hold exactly n - m benign updates")

    @property
    def dtype(self):
        return self.updates.dtype if self.updates.dtype.kind == "f" else np.float64

    def mean(self) -> np.ndarray:
        return self.updates.astype(np.float64).mean(axis=0)

    def std(self) -> np.ndarray:
        return self.updates.astype(np.float64).std(axis=0)


def noise_attack(own_update: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    own_update = np.asarray(own_update)
    z = rng.normal(0.0, sigma, size=own_update.shape)
    return (own_update.astype(np.float64) + z).astype(own_update.dtype)


def alie_z_max(n: int, m: int) -> float:
    s = math.floor(n / 2 + 1) - m
    benign = n - m
    if benign - s <= 0 or benign - s >= benign:
        raise AttackConfigError(f"ALIE z_max undefined for n={n}, m={m}")
    return float(norm.ppf((benign - s) / benign))


def alie_attack(view: BenignView) -> np.ndarray:
    n, m = view.num_clients, view.num_byzantine
    if n - m < 2:
        raise AttackConfigError("ALIE needs at least two benign updates")
    z = alie_z_max(n, m)
    return (view.mean() - z * view.std()).astype(view.dtype)


def _minmax_direction(mu: np.ndarray, view: BenignView, perturbation: str) -> np.ndarray:
    if perturbation == "unit-negative-mean" and np.linalg.norm(mu) > 0:
        p = -mu
    elif perturbation == "negative-std":
        p = -view.std()
    else:
        p = -np.sign(mu)
    norm_p = np.linalg.norm(p)
    return p / norm_p if norm_p > 0 else p


def minmax_gamma(mu: np.ndarray, direction: np.ndarray, benign: np.ndarray,
                 tau: float = 1e-5, gamma_init: float = 10.0) -> float:
    """Largest gamma with max_c ||mu + gamma*p - benign_c|| <= max pairwise benign distance.

    Doubles gamma while it stays feasible, then halves the step until it drops
    below ``tau``. The feasible set is an interval starting at 0 because the
    distance bound is convex in gamma and holds at gamma = 0.
    """
    benign = benign.astype(np.float64)
    bound = float(pdist(benign).max()) if len(benign) > 1 else 0.0

    def feasible(g):
        d = np.linalg.norm(mu + g * direction - benign, axis=1).max()
        return d <= bound

    gamma = gamma_init
    while feasible(gamma) and gamma < 1e12:
        gamma *= 2.0
    step = gamma
    gamma_ok = 0.0
    while abs(gamma_ok - gamma) > tau:
        if feasible(gamma):
            gamma_ok = gamma
            gamma += step / 2.0
        else:
            gamma -= step / 2.0
        step /= 2.0
    return gamma_ok


def minmax_attack(view: BenignView, perturbation: Perturbation = "unit-negative-mean",
                  tau: float = 1e-5) -> np.ndarray:
    if view.num_clients - view.num_byzantine < 2:
        raise AttackConfigError("MinMax needs at least two benign updates")
    if tau <= 0:
        raise AttackConfigError("tau must be positive")
    mu = view.mean()
    p = _minmax_direction(mu, view, perturbation)
    if not np.any(p):
        return mu.astype(view.dtype)
    gamma = minmax_gamma(mu, p, view.updates, tau)
    return (mu + gamma * p).astype(view.dtype)


def ipm_attack(view: BenignView, epsilon: float) -> np.ndarray:
    if view.num_clients - view.num_byzantine < 1:
        raise AttackConfigError("IPM needs at least one benign update")
    return (-epsilon * view.mean()).astype(view.dtype)


def craft(spec: AttackSpec, view: BenignView) -> np.ndarray:
    """The colluding vector shared by all Byzantine clients (not for noise)."""
    if spec.kind == "alie":
        return alie_attack(view)
    if spec.kind == "minmax":
        return minmax_attack(view, spec.perturbation, spec.tau)
    if spec.kind == "ipm":
        return ipm_attack(view, spec.epsilon)
    raise AttackConfigError(f"{spec.kind!r} has no colluding vector")
