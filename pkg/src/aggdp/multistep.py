"""Multistep aggregation: ``k`` original transitions between aggregate visits,
and lambda-aggregation for policy evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import AggregationScheme, BoundReport, _check_pair, _check_r, check_error_bound, lift_costs
from .errors import ConvergenceError, ValidationError
from .mdp import VI_MAX_ITER, Mdp, bellman_optimal, bellman_policy, check_policy, vi_threshold

MAX_SERIES_TERMS = 100_000


def _check_k(k: int) -> int:
    if int(k) != k or k < 1:
        raise ValidationError(f"k must be a positive integer, got {k}")
    return int(k)


def lifted_kstep(mdp: Mdp, scheme: AggregationScheme, k: int, r) -> np.ndarray:
    """``J~_0 = T^k (Phi r)``."""
    _check_pair(mdp, scheme)
    J = lift_costs(scheme, r)
    for _ in range(_check_k(k)):
        J = bellman_optimal(mdp, J)
    return J


def kstep_operator(mdp: Mdp, scheme: AggregationScheme, k: int, r) -> np.ndarray:
    """``D T^k (Phi r)``."""
    return scheme.D @ lifted_kstep(mdp, scheme, k, r)


@dataclass(frozen=True)
class KStepSolution:
    r: np.ndarray
    J0: np.ndarray
    iterations: int
    residual: float


def solve_kstep(
    mdp: Mdp, scheme: AggregationScheme, k: int, tol: float = 1e-10, r0=None, max_iter: int = VI_MAX_ITER
) -> KStepSolution:
    """Fixed point of ``D T^k Phi`` (modulus ``alpha^k``) plus the lifted ``J~_0``."""
    k = _check_k(k)
    if tol <= 0:
        raise ValidationError("tol must be positive")
    _check_pair(mdp, scheme)
    r = np.zeros(scheme.q) if r0 is None else _check_r(scheme, r0).copy()
    threshold = vi_threshold(tol, mdp.alpha**k)
    residual = np.inf
    for it in range(max_iter + 1):
        J0 = lifted_kstep(mdp, scheme, k, r)
        new = scheme.D @ J0
        residual = float(np.max(np.abs(new - r)))
        if not np.isfinite(residual):
            break
        if residual <= threshold:
            return KStepSolution(new, lifted_kstep(mdp, scheme, k, new), it, residual)
        r = new
    raise ConvergenceError(
        f"k-step aggregate iteration did not converge within {max_iter} iterations", residual=residual, iterations=max_iter
    )


def check_kstep_bound(mdp: Mdp, scheme: AggregationScheme, k: int, r_star, J_star, tol: float = 1e-9) -> BoundReport:
    """``|J*(i) - r*_l| <= eps / (1 - alpha^k) + tol`` on every cell."""
    if not scheme.is_hard():
        raise ValidationError("the k-step bound is stated for hard aggregation")
    return check_error_bound(mdp, scheme, r_star, J_star, tol=tol, k=_check_k(k))


def lambda_operator(mdp: Mdp, mu, lam: float, J, tol: float = 1e-12) -> np.ndarray:
    """``T_mu^(lambda) J = (1-lam) sum_l lam^l T_mu^(l+1) J`` by truncated series.

    The series stops after ``L+1`` terms with the leftover weight ``lam^(L+1)``
    put on ``T_mu^(L+1) J``, which keeps ``J_mu`` an exact fixed point. ``L`` is
    the smallest length with ``(alpha lam)^(L+1) ||T_mu J - J|| / (1-alpha) <= tol/10``.
    """
    if not 0.0 <= lam < 1.0:
        raise ValidationError(f"lambda must lie in [0, 1), got {lam}")
    if mdp.alpha >= 1.0:
        raise ValidationError("lambda evaluation is implemented for discounted problems")
    mu = check_policy(mdp, mu)
    J = np.asarray(J, dtype=float)
    TJ = bellman_policy(mdp, mu, J)
    if lam == 0.0:
        return TJ
    gap = float(np.max(np.abs(TJ - J))) / (1.0 - mdp.alpha)
    rate = mdp.alpha * lam
    L = 0
    while L < MAX_SERIES_TERMS and gap * rate ** (L + 1) > tol / 10:
        L += 1
    out = (1.0 - lam) * TJ
    cur = TJ
    weight = 1.0
    for _ in range(L):
        cur = bellman_policy(mdp, mu, cur)
        weight *= lam
        out += (1.0 - lam) * weight * cur
    return out + lam ** (L + 1) * cur


@dataclass(frozen=True)
class LambdaSolution:
    r: np.ndarray
    iterations: int
    residual: float


def lambda_evaluate(
    mdp: Mdp, scheme: AggregationScheme, mu, lam: float, tol: float = 1e-10, max_iter: int = VI_MAX_ITER
) -> LambdaSolution:
    """Solve ``r = D T_mu^(lambda) (Phi r)`` by fixed-point iteration.

    The composite map has modulus ``alpha (1-lam) / (1 - alpha lam)``.
    """
    _check_pair(mdp, scheme)
    mu = check_policy(mdp, mu)
    if tol <= 0:
        raise ValidationError("tol must be positive")
    modulus = mdp.alpha * (1.0 - lam) / (1.0 - mdp.alpha * lam)
    threshold = vi_threshold(tol, modulus) if modulus > 0 else tol
    r = np.zeros(scheme.q)
    residual = np.inf
    for it in range(max_iter + 1):
        new = scheme.D @ lambda_operator(mdp, mu, lam, lift_costs(scheme, r), tol=tol * (1.0 - modulus))
        residual = float(np.max(np.abs(new - r)))
        if residual <= threshold:
            return LambdaSolution(new, it, residual)
        r = new
    raise ConvergenceError(
        f"lambda aggregation did not converge within {max_iter} iterations", residual=residual, iterations=max_iter
    )
