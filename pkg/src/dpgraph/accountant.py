"""Renyi privacy accounting for the clipped noisy training step.

The mechanism released each step is a sum of per-example clipped gradients
plus Gaussian noise, computed over a uniformly chosen fixed-size minibatch of
rooted subgraphs. Adding or removing one node changes at most d of the N
subgraphs, where d is the occurrence bound of the sampler, so the number of
affected examples in a batch of size m follows the hypergeometric law
rho ~ Hyper(N, d, m). The per-step Renyi divergence of order alpha is

    gamma(alpha) = ln E_rho[exp(alpha (alpha-1) 2 rho^2 C^2 / sigma^2)] / (alpha-1)

composed linearly over steps and converted to (epsilon, delta) by
epsilon = gamma_total + ln(1/delta)/(alpha-1), minimized over a grid of
orders. Everything runs in log-space: the summand exponent reaches
alpha (alpha-1) 2 d^2 C^2 / sigma^2 at rho = d, which overflows a float for
tight budgets long before the expectation itself does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .sampler import n_bound


class BudgetOverflowError(ValueError):
    """The Renyi divergence is not finite at the requested order."""


def default_alpha_grid() -> tuple[float, ...]:
    grid = {1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0,
            16.0, 20.0, 32.0, 64.0}
    grid.update(float(a) for a in range(2, 65))
    return tuple(sorted(grid))


@dataclass(frozen=True)
class PrivacySpec:
    """Everything the accountant needs to price a training run.

    `clip` and `sigma` are per accounting unit: with several blocks clipped
    at thresholds C_l and noised at sigma_l = lambda 2 C_l d, the joint
    mechanism prices identically to any single (C, sigma) pair with the same
    noise multiplier lambda, so callers typically pass clip=1 and
    sigma = lambda 2 d.
    """

    n_train: int
    k: int
    r: int
    batch_size: int
    clip: float
    sigma: float
    steps: int
    delta: float
    alpha_grid: tuple[float, ...] = field(default_factory=default_alpha_grid)

    def __post_init__(self) -> None:
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if not 1 <= self.batch_size <= self.n_train:
            raise ValueError("need 1 <= batch_size <= n_train")
        if self.k < 1 or self.r < 0:
            raise ValueError("need k >= 1 and r >= 0")
        if self.clip <= 0:
            raise ValueError("clip must be > 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not self.alpha_grid:
            raise ValueError("alpha_grid must be nonempty")
        if any(a <= 1.0 for a in self.alpha_grid):
            raise ValueError("all Renyi orders must exceed 1")
        object.__setattr__(self, "alpha_grid",
                           tuple(float(a) for a in self.alpha_grid))

    @property
    def occurrence_bound(self) -> int:
        """d: in how many subgraphs one node can appear, capped at n_train."""
        return min(n_bound(self.k, self.r), self.n_train)

    @property
    def noise_multiplier(self) -> float:
        return self.sigma / (2.0 * self.clip * n_bound(self.k, self.r))


@dataclass(frozen=True)
class AlphaRow:
    alpha: float
    gamma_step: float
    gamma_total: float
    epsilon: float


@dataclass(frozen=True)
class AccountantResult:
    """Epsilon curve over the order grid plus its minimizer."""

    per_alpha: tuple[AlphaRow, ...]
    epsilon: float
    best_alpha: float


def _log_comb(n: int, k: int) -> float:
    return float(special.gammaln(n + 1) - special.gammaln(k + 1)
                 - special.gammaln(n - k + 1))


def hypergeom_log_pmf(n: int, d: int, m: int, i: int) -> float:
    """log Pr[rho = i] for rho ~ Hyper(n, d, m), via log-gamma.

    rho counts marked items in a uniform m-subset of n items of which d are
    marked: pmf(i) = C(d, i) C(n-d, m-i) / C(n, m). Returns -inf outside the
    support [max(0, m+d-n), min(d, m)].
    """
    if not 0 <= d <= n:
        raise ValueError("need 0 <= d <= n")
    if not 0 <= m <= n:
        raise ValueError("need 0 <= m <= n")
    if i < max(0, m + d - n) or i > min(d, m):
        return float("-inf")
    return _log_comb(d, i) + _log_comb(n - d, m - i) - _log_comb(n, m)


def gamma_per_step(spec: PrivacySpec, alpha: float) -> float:
    """Amplified one-step Renyi divergence at the given order.

    Exact summation of the expectation over the hypergeometric support,
    carried out with log-sum-exp. With a full batch (m = N) the distribution
    degenerates to rho = d and this reduces to alpha 2 d^2 C^2 / sigma^2.
    """
    if alpha <= 1.0:
        raise ValueError("alpha must exceed 1")
    d = spec.occurrence_bound
    n, m = spec.n_train, spec.batch_size
    try:
        coef = alpha * (alpha - 1.0) * 2.0 * spec.clip ** 2 / spec.sigma ** 2
    except ZeroDivisionError:  # sigma > 0 but sigma^2 underflowed to zero
        coef = float("inf")
    if not math.isfinite(coef):
        raise BudgetOverflowError(
            f"budget overflow at alpha={alpha}: exponent coefficient not finite")
    lo, hi = max(0, m + d - n), min(d, m)
    terms = np.array([hypergeom_log_pmf(n, d, m, i) + coef * float(i) * float(i)
                      for i in range(lo, hi + 1)])
    log_mean = float(special.logsumexp(terms))
    gamma = log_mean / (alpha - 1.0)
    if not math.isfinite(gamma):
        raise BudgetOverflowError(
            f"budget overflow at alpha={alpha}: lower sigma demand or the order")
    # the expectation is >= 1, so gamma is nonnegative up to rounding
    return max(0.0, gamma)


def compose(gamma_step: float, steps: int) -> float:
    """Total Renyi divergence after `steps` identical releases."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if gamma_step < 0:
        raise ValueError("gamma_step must be >= 0")
    return gamma_step * steps


def rdp_to_dp(spec: PrivacySpec) -> AccountantResult:
    """Evaluate the epsilon curve over the order grid and take its minimum.

    Orders whose divergence overflows contribute inf rows (the curve keeps
    them visible); if every order overflows there is nothing to report and a
    BudgetOverflowError is raised.
    """
    log_inv_delta = math.log(1.0 / spec.delta)
    rows: list[AlphaRow] = []
    for alpha in spec.alpha_grid:
        try:
            gs = gamma_per_step(spec, alpha)
        except BudgetOverflowError:
            rows.append(AlphaRow(alpha, float("inf"), float("inf"), float("inf")))
            continue
        gt = compose(gs, spec.steps)
        eps = gt + log_inv_delta / (alpha - 1.0)
        rows.append(AlphaRow(alpha, gs, gt, eps))
    finite = [row for row in rows if math.isfinite(row.epsilon)]
    if not finite:
        raise BudgetOverflowError("budget overflow at every order in the grid")
    best = min(finite, key=lambda row: (row.epsilon, row.alpha))
    return AccountantResult(per_alpha=tuple(rows), epsilon=best.epsilon,
                            best_alpha=best.alpha)


_LAMBDA_LO = 1e-3
_LAMBDA_HI = 1e6


def calibrate_sigma(spec: PrivacySpec, target_epsilon: float) -> float:
    """Smallest-noise sigma whose epsilon matches the target within 0.1%.

    Bisects the noise multiplier lambda in [1e-3, 1e6] using the monotone
    decrease of epsilon in sigma; `spec.sigma` is ignored. Raises ValueError
    when the target is outside what that lambda range can produce.
    """
    if target_epsilon <= 0:
        raise ValueError("target_epsilon must be > 0")
    unit = 2.0 * spec.clip * n_bound(spec.k, spec.r)
    tol = 1e-3 * target_epsilon

    def eps_at(lam: float) -> float:
        try:
            return rdp_to_dp(replace(spec, sigma=lam * unit)).epsilon
        except BudgetOverflowError:
            return float("inf")

    lo, hi = _LAMBDA_LO, _LAMBDA_HI
    eps_hi = eps_at(hi)
    if abs(eps_hi - target_epsilon) <= tol:
        return hi * unit
    if eps_hi > target_epsilon:
        raise ValueError(
            f"target epsilon {target_epsilon} unreachable: even lambda={hi:g} "
            f"gives epsilon={eps_hi:g}")
    eps_lo = eps_at(lo)
    if abs(eps_lo - target_epsilon) <= tol:
        return lo * unit
    if eps_lo < target_epsilon:
        raise ValueError(
            f"target epsilon {target_epsilon} unreachable: even lambda={lo:g} "
            f"gives epsilon={eps_lo:g}")

    for _ in range(200):
        mid = math.sqrt(lo * hi)
        e = eps_at(mid)
        if abs(e - target_epsilon) <= tol:
            return mid * unit
        if e > target_epsilon:
            lo = mid
        else:
            hi = mid
    raise ValueError("calibration failed to converge")
