"""Gaussian-DP accountant: calibration, composition, (epsilon, delta) duality.

The scalar feedback channel is a Gaussian mechanism on a statistic with
L2 sensitivity 2C/B observed at sample rate B/D, so one round is
(2C/(D*sigma))-GDP; T rounds compose to sqrt(T) times that, and the GDP
level converts losslessly to (epsilon, delta) through the standard normal
CDF.  Inverting the conversion calibrates sigma for a requested budget.
"""

import math
from dataclasses import dataclass

from scipy.special import log_ndtr

from .errors import BracketError
from .numerics import std_normal_cdf

_MU_BRACKET = (1e-6, 100.0)
_EPS_BRACKET = (0.0, 1000.0)
_BISECT_ITERS = 200

# Above this epsilon the e^eps * Phi(...) product is evaluated in log space;
# e^eps alone would overflow long before the product stops mattering.
_LOG_SPACE_EPS = 30.0


def gdp_to_delta(mu, epsilon):
    """delta(epsilon) = Phi(-eps/mu + mu/2) - e^eps * Phi(-eps/mu - mu/2)."""
    if mu <= 0:
        raise ValueError(f"GDP level must be positive, got {mu}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    a = -epsilon / mu + mu / 2.0
    b = -epsilon / mu - mu / 2.0
    if epsilon > _LOG_SPACE_EPS:
        second = math.exp(epsilon + float(log_ndtr(b)))
    else:
        second = math.exp(epsilon) * std_normal_cdf(b)
    delta = std_normal_cdf(a) - second
    return min(1.0, max(0.0, delta))


def _bisect(fn, lo, hi, target, increasing, what):
    f_lo = fn(lo)
    f_hi = fn(hi)
    lo_ok = f_lo <= target if increasing else f_lo >= target
    hi_ok = f_hi >= target if increasing else f_hi <= target
    if not (lo_ok and hi_ok):
        raise BracketError(
            f"{what}: target {target:g} unreachable in [{lo:g}, {hi:g}] "
            f"(f(lo)={f_lo:g}, f(hi)={f_hi:g})",
            lo, hi, f_lo, f_hi,
        )
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        f_mid = fn(mid)
        if (f_mid < target) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solve_mu(epsilon, delta_target):
    """The GDP level matching (epsilon, delta); delta is increasing in mu."""
    if not 0.0 < delta_target < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta_target}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return _bisect(
        lambda m: gdp_to_delta(m, epsilon),
        *_MU_BRACKET,
        target=delta_target,
        increasing=True,
        what="solve_mu",
    )


def solve_epsilon(mu, delta_target):
    """The epsilon matching (mu, delta); delta is decreasing in epsilon."""
    if not 0.0 < delta_target < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta_target}")
    if gdp_to_delta(mu, 0.0) <= delta_target:
        return 0.0
    return _bisect(
        lambda e: gdp_to_delta(mu, e),
        *_EPS_BRACKET,
        target=delta_target,
        increasing=False,
        what="solve_epsilon",
    )


def noise_scale(clip_c, rounds, dataset_size, mu):
    """sigma = 2 * C * sqrt(T) / (D * mu)."""
    if clip_c <= 0 or rounds <= 0 or dataset_size <= 0 or mu <= 0:
        raise ValueError("noise_scale needs strictly positive arguments")
    return 2.0 * clip_c * math.sqrt(rounds) / (dataset_size * mu)


def compose(mu_per_step, rounds):
    """T-fold composition of mu-GDP mechanisms is sqrt(T)*mu-GDP."""
    if rounds < 1:
        raise ValueError(f"composition needs at least one round, got {rounds}")
    return math.sqrt(rounds) * mu_per_step


def per_step_mu(clip_c, batch_size, dataset_size, sigma_dp):
    """Single-round GDP level: (B/D) * (2C/B) / sigma = 2C / (D * sigma)."""
    if clip_c <= 0 or batch_size <= 0 or dataset_size <= 0:
        raise ValueError("per_step_mu needs strictly positive arguments")
    if sigma_dp == 0:
        raise ValueError(
            "sigma_dp = 0 is a non-private run: the privacy loss is infinite "
            "and no finite budget can be reported"
        )
    if sigma_dp < 0:
        raise ValueError(f"noise scale must be nonnegative, got {sigma_dp}")
    rate = batch_size / dataset_size
    sensitivity = 2.0 * clip_c / batch_size
    return rate * sensitivity / sigma_dp


def clip_probability_bound(c0, ell):
    """Xi = 2*sqrt(2*pi) * exp(-C0^2 / (8*ell^2)).

    Valid as a clip-probability bound whenever the actual threshold C
    satisfies C >= C0 + L*lambda*d/2 (the caller's responsibility).  May
    exceed 1; clamp only for reporting.
    """
    if c0 < 0:
        raise ValueError(f"C0 must be nonnegative, got {c0}")
    if ell <= 0:
        raise ValueError(f"Lipschitz constant must be positive, got {ell}")
    return 2.0 * math.sqrt(2.0 * math.pi) * math.exp(-(c0 * c0) / (8.0 * ell * ell))


def realized_epsilon(clip_c, batch_size, dataset_size, sigma_dp, rounds, delta):
    """Budget spent after ``rounds`` privatized releases, at fixed delta."""
    if rounds == 0:
        return 0.0
    if sigma_dp == 0:
        return math.inf
    mu_t = compose(per_step_mu(clip_c, batch_size, dataset_size, sigma_dp), rounds)
    return solve_epsilon(mu_t, delta)


@dataclass
class PrivacySpec:
    """A calibrated (mu, epsilon, delta, T, D, B, C, sigma_dp) bundle."""

    mu: float
    epsilon: float
    delta: float
    rounds: int
    dataset_size: int
    batch_size: int
    clip_c: float
    sigma_dp: float

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        gap = abs(gdp_to_delta(self.mu, self.epsilon) - self.delta)
        if gap > 1e-9:
            raise ValueError(
                f"(mu, epsilon, delta) inconsistent: conversion gap {gap:g}"
            )
        expected = noise_scale(self.clip_c, self.rounds, self.dataset_size, self.mu)
        if abs(self.sigma_dp - expected) > 1e-12:
            raise ValueError(
                f"sigma_dp {self.sigma_dp!r} does not match calibration {expected!r}"
            )

    @classmethod
    def calibrate(cls, epsilon, delta, rounds, dataset_size, batch_size, clip_c):
        """Solve mu from (epsilon, delta) and set sigma_dp for T rounds."""
        mu = solve_mu(epsilon, delta)
        sigma = noise_scale(clip_c, rounds, dataset_size, mu)
        return cls(
            mu=mu,
            epsilon=epsilon,
            delta=delta,
            rounds=rounds,
            dataset_size=dataset_size,
            batch_size=batch_size,
            clip_c=clip_c,
            sigma_dp=sigma,
        )
