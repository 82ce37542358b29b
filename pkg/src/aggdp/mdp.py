"""Tabular discounted MDPs and stochastic shortest path problems.

States are indexed ``0..n-1`` in the Python API. The JSON format uses the
1-based convention ``1..n`` and reserves index 0 for the termination state of
an SSP. Internally an SSP keeps only its non-terminal states; the probability
and cost of moving into termination live in ``p_term`` and ``cost_term`` and
the termination state always has cost-to-go 0.

Controls are indexed ``0..n_controls[i]-1`` at state ``i``. Arrays are padded
to the largest control count; padded entries are never used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ImproperPolicyError, ValidationError

PROB_TOL = 1e-12
TIE_TOL = 1e-12
VI_MAX_ITER = 10**6


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite MDP with padded dense arrays.

    ``P[i, u, j]`` and ``cost[i, u, j]`` describe moves between non-terminal
    states; ``p_term[i, u]`` and ``cost_term[i, u]`` describe the move into the
    termination state (always zero for discounted problems).
    """

    P: np.ndarray
    cost: np.ndarray
    n_controls: np.ndarray
    alpha: float
    ssp: bool = False
    p_term: np.ndarray | None = None
    cost_term: np.ndarray | None = None
    expected_cost: np.ndarray = field(init=False, repr=False)
    mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = _frozen(self.P)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValidationError(f"P must have shape (n, U, n), got {P.shape}")
        n, U, _ = P.shape
        cost = _frozen(self.cost)
        if cost.shape != P.shape:
            raise ValidationError(f"cost shape {cost.shape} does not match P shape {P.shape}")
        nc = np.array(self.n_controls, dtype=int)
        if nc.shape != (n,):
            raise ValidationError("n_controls must have one entry per state")
        if np.any(nc < 1):
            i = int(np.argmin(nc))
            raise ValidationError(f"state {i + 1} has an empty control set")
        if np.any(nc > U):
            raise ValidationError("n_controls exceeds the padded control dimension")
        nc.setflags(write=False)
        p_term = np.zeros((n, U)) if self.p_term is None else np.array(self.p_term, dtype=float)
        cost_term = np.zeros((n, U)) if self.cost_term is None else np.array(self.cost_term, dtype=float)
        if p_term.shape != (n, U) or cost_term.shape != (n, U):
            raise ValidationError("p_term/cost_term must have shape (n, U)")
        if not self.ssp and np.any(p_term != 0):
            raise ValidationError("termination probabilities are only allowed for SSP problems")
        alpha = float(self.alpha)
        if self.ssp:
            if alpha != 1.0:
                raise ValidationError("SSP problems are undiscounted (alpha = 1)")
        elif not 0.0 < alpha < 1.0:
            raise ValidationError(f"discount factor must lie in (0, 1), got {alpha}")

        mask = np.arange(U)[None, :] < nc[:, None]
        for i, u in zip(*np.nonzero(mask)):
            row = P[i, u]
            if np.any(row < 0) or p_term[i, u] < 0:
                raise ValidationError(f"negative transition probability at (i={i + 1}, u={u + 1})")
            total = row.sum() + p_term[i, u]
            if abs(total - 1.0) > PROB_TOL:
                raise ValidationError(
                    f"transition probabilities at (i={i + 1}, u={u + 1}) sum to {float(total)!r}, not 1"
                )
        if not (np.all(np.isfinite(cost[mask])) and np.all(np.isfinite(cost_term[mask]))):
            raise ValidationError("stage costs must be finite")

        gbar = np.einsum("iuj,iuj->iu", P, cost) + p_term * cost_term
        gbar = np.where(mask, gbar, np.nan)
        mask.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "n_controls", nc)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "p_term", _frozen(p_term))
        object.__setattr__(self, "cost_term", _frozen(cost_term))
        object.__setattr__(self, "expected_cost", _frozen(gbar))
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def max_controls(self) -> int:
        return self.P.shape[1]

    def controls(self, i: int) -> range:
        return range(int(self.n_controls[i]))

    def policy_matrices(self, mu) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(P_mu, g_mu)``; for an SSP ``P_mu`` is substochastic."""
        mu = check_policy(self, mu)
        idx = np.arange(self.n)
        return self.P[idx, mu], self.expected_cost[idx, mu]

    def successor_distribution(self, i: int, u: int) -> np.ndarray:
        """Probabilities over ``0..n-1`` followed by termination (index ``n``)."""
        return np.append(self.P[i, u], self.p_term[i, u])

    def successor_cost(self, i: int, u: int) -> np.ndarray:
        return np.append(self.cost[i, u], self.cost_term[i, u])


def check_policy(mdp: Mdp, mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=int)
    if mu.shape != (mdp.n,):
        raise ValidationError(f"policy has shape {mu.shape}, expected ({mdp.n},)")
    bad = np.nonzero((mu < 0) | (mu >= mdp.n_controls))[0]
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"policy control {mu[i]} infeasible at state {i + 1}")
    return mu


def _check_vector(mdp: Mdp, J) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    if J.shape != (mdp.n,):
        raise ValidationError(f"cost vector has shape {J.shape}, expected ({mdp.n},)")
    return J


def q_factors(mdp: Mdp, J) -> np.ndarray:
    """``Q[i, u] = sum_j p_ij(u) (g(i,u,j) + alpha J(j))``; +inf on padded controls."""
    J = _check_vector(mdp, J)
    Q = mdp.expected_cost + mdp.alpha * (mdp.P @ J)
    return np.where(mdp.mask, Q, np.inf)


def argmin_lowest(Q: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """Row-wise argmin picking the lowest index among values within ``tol`` of the min.

    The relative tolerance keeps policies stable when two routes compute the
    same Q-factor with different rounding.
    """
    Q = np.atleast_2d(Q)
    best = Q.min(axis=1, keepdims=True)
    near = Q <= best + tol * np.maximum(1.0, np.abs(best))
    return np.argmax(near, axis=1)


def bellman_policy(mdp: Mdp, mu, J) -> np.ndarray:
    """``T_mu J = g_mu + alpha P_mu J``."""
    J = _check_vector(mdp, J)
    P_mu, g_mu = mdp.policy_matrices(mu)
    return g_mu + mdp.alpha * (P_mu @ J)


def bellman_optimal(mdp: Mdp, J) -> np.ndarray:
    return q_factors(mdp, J).min(axis=1)


def policy_improve(mdp: Mdp, J) -> np.ndarray:
    """Greedy policy with respect to ``J``; ties go to the lowest control index."""
    return argmin_lowest(q_factors(mdp, J))


@dataclass(frozen=True)
class ValueIterationResult:
    J: np.ndarray
    iterations: int
    residual: float


def vi_threshold(tol: float, alpha: float) -> float:
    """Residual level at which ``||J - J*|| <= tol`` is guaranteed (discounted case)."""
    if alpha < 1.0:
        return tol * (1.0 - alpha) / alpha
    return tol


def solve_exact_vi(mdp: Mdp, tol: float = 1e-10, J0=None, max_iter: int = VI_MAX_ITER) -> ValueIterationResult:
    """Value iteration on ``T`` until the discount-aware residual test passes.

    ``iterations`` counts the applications of ``T`` performed before the
    residual test first succeeded; the returned vector is one further sweep.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    J = np.zeros(mdp.n) if J0 is None else _check_vector(mdp, J0).copy()
    threshold = vi_threshold(tol, mdp.alpha)
    residual = np.inf
    for k in range(max_iter + 1):
        TJ = bellman_optimal(mdp, J)
        residual = float(np.max(np.abs(TJ - J))) if mdp.n else 0.0
        if not np.isfinite(residual):
            break
        if residual <= threshold:
            return ValueIterationResult(TJ, k, residual)
        J = TJ
    raise ConvergenceError(
        f"value iteration did not reach residual {threshold:.3g} within {max_iter} iterations "
        f"(last residual {residual:.3g})",
        residual=residual,
        iterations=max_iter,
    )


def evaluate_policy(mdp: Mdp, mu) -> np.ndarray:
    """Exact ``J_mu`` via a dense linear solve.

    For an SSP the policy must be proper; an improper policy (spectral radius
    of ``P_mu`` equal to 1) raises :class:`ImproperPolicyError`.
    """
    mu = check_policy(mdp, mu)
    P_mu, g_mu = mdp.policy_matrices(mu)
    A = mdp.alpha * P_mu
    if mdp.ssp and mdp.n:
        rho = max(abs(np.linalg.eigvals(A)))
        if rho >= 1.0 - 1e-12:
            raise ImproperPolicyError(f"policy {format_policy(mu)} is improper", policy=mu)
    return np.linalg.solve(np.eye(mdp.n) - A, g_mu)


def format_policy(mu) -> str:
    """1-based rendering used in messages and reports."""
    return "(" + ",".join(str(int(u) + 1) for u in mu) + ")"


@dataclass(frozen=True)
class PolicyIterationResult:
    policy: np.ndarray
    J: np.ndarray
    iterations: int
    costs: list


def policy_iteration(mdp: Mdp, mu0=None, max_iter: int = 10_000) -> PolicyIterationResult:
    """Exact PI with linear-solve evaluation; stops when the policy repeats."""
    mu = np.zeros(mdp.n, dtype=int) if mu0 is None else check_policy(mdp, mu0).copy()
    costs = []
    for k in range(1, max_iter + 1):
        J = evaluate_policy(mdp, mu)
        costs.append(J)
        new = policy_improve(mdp, J)
        # keep the incumbent control on ties to rule out cycling between equals
        Q = q_factors(mdp, J)
        keep = Q[np.arange(mdp.n), mu] <= Q[np.arange(mdp.n), new] + TIE_TOL * np.maximum(1.0, np.abs(J))
        new = np.where(keep, mu, new)
        if np.array_equal(new, mu):
            return PolicyIterationResult(mu, J, k, costs)
        mu = new
    raise ConvergenceError("policy iteration exceeded its iteration cap", iterations=max_iter)


def count_policies(mdp: Mdp) -> int:
    return int(np.prod(mdp.n_controls.astype(object)))


# ---------------------------------------------------------------- builders


def from_transition_lists(states, alpha: float | None) -> Mdp:
    """Build from nested lists ``states[i][u] = [(j, p, g), ...]``.

    Indices follow the JSON convention: states ``1..n``; ``j = 0`` is the
    termination state and is only legal when ``alpha`` is None (SSP).
    """
    ssp = alpha is None
    n = len(states)
    if n == 0:
        raise ValidationError("MDP must have at least one state")
    U = max((len(s) for s in states), default=0)
    if U == 0:
        raise ValidationError("every state needs at least one control")
    P = np.zeros((n, U, n))
    cost = np.zeros((n, U, n))
    p_term = np.zeros((n, U))
    cost_term = np.zeros((n, U))
    nc = np.zeros(n, dtype=int)
    for i, controls in enumerate(states):
        nc[i] = len(controls)
        for u, transitions in enumerate(controls):
            if not transitions:
                raise ValidationError(f"control (i={i + 1}, u={u + 1}) has no transitions")
            # costs on duplicate successors are combined as a probability-weighted mean
            acc = {}
            for row in transitions:
                if len(row) != 3:
                    raise ValidationError(f"transition row at (i={i + 1}, u={u + 1}) must be [j, p, g]")
                j, p, g = int(row[0]), float(row[1]), float(row[2])
                if j == 0 and not ssp:
                    raise ValidationError("state 0 (termination) is only valid for SSP problems")
                if not 0 <= j <= n:
                    raise ValidationError(f"successor {j} out of range at (i={i + 1}, u={u + 1})")
                tp, tg = acc.get(j, (0.0, 0.0))
                acc[j] = (tp + p, tg + p * g)
            for j, (p, pg) in acc.items():
                g = pg / p if p > 0 else 0.0
                if j == 0:
                    p_term[i, u], cost_term[i, u] = p, g
                else:
                    P[i, u, j - 1], cost[i, u, j - 1] = p, g
    return Mdp(P, cost, nc, 1.0 if ssp else alpha, ssp=ssp, p_term=p_term, cost_term=cost_term)


def from_json_dict(d: dict) -> Mdp:
    try:
        states = [[c["transitions"] for c in s["controls"]] for s in d["states"]]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed MDP JSON: missing {exc}") from None
    if "n" in d and int(d["n"]) != len(states):
        raise ValidationError(f"'n' = {d['n']} but {len(states)} states listed")
    return from_transition_lists(states, d.get("alpha"))


def to_json_dict(mdp: Mdp) -> dict:
    states = []
    for i in range(mdp.n):
        controls = []
        for u in mdp.controls(i):
            rows = [[int(j) + 1, float(mdp.P[i, u, j]), float(mdp.cost[i, u, j])] for j in np.nonzero(mdp.P[i, u])[0]]
            if mdp.p_term[i, u] > 0:
                rows.append([0, float(mdp.p_term[i, u]), float(mdp.cost_term[i, u])])
            controls.append({"transitions": rows})
        states.append({"controls": controls})
    out = {"n": mdp.n, "states": states}
    if not mdp.ssp:
        out["alpha"] = mdp.alpha
    return out


def single_policy_mdp(mdp: Mdp, mu) -> Mdp:
    """Restrict every control set to ``{mu(i)}``."""
    mu = check_policy(mdp, mu)
    idx = np.arange(mdp.n)
    return Mdp(
        mdp.P[idx, mu][:, None, :],
        mdp.cost[idx, mu][:, None, :],
        np.ones(mdp.n, dtype=int),
        mdp.alpha,
        ssp=mdp.ssp,
        p_term=mdp.p_term[idx, mu][:, None],
        cost_term=mdp.cost_term[idx, mu][:, None],
    )


# ---------------------------------------------------------------- fixtures


def two_state(self_loop: bool = False) -> Mdp:
    """Deterministic cycle 1 -> 2 -> 1 with costs (1, 0) and alpha = 0.5.

    With ``self_loop`` state 1 gets a second control: stay put at cost 0.
    """
    states = [
        [[(2, 1.0, 1.0)]],
        [[(1, 1.0, 0.0)]],
    ]
    if self_loop:
        states[0].append([(1, 1.0, 0.0)])
    return from_transition_lists(states, 0.5)


def random_mdp(
    n: int,
    max_controls: int,
    alpha: float,
    rng: np.random.Generator,
    *,
    branching: int | None = None,
    fixed_controls: bool = False,
    cost_scale: float = 1.0,
) -> Mdp:
    """Random instance with Dirichlet transition rows and uniform costs.

    ``branching`` limits the number of successors per (i, u); control counts are
    drawn from ``1..max_controls`` unless ``fixed_controls``.
    """
    if fixed_controls:
        nc = np.full(n, max_controls)
    else:
        nc = rng.integers(1, max_controls + 1, size=n)
    b = n if branching is None else min(branching, n)
    P = np.zeros((n, max_controls, n))
    cost = np.zeros((n, max_controls, n))
    for i in range(n):
        for u in range(nc[i]):
            support = rng.choice(n, size=b, replace=False)
            P[i, u, support] = rng.dirichlet(np.ones(b))
            cost[i, u] = cost_scale * rng.random(n)
    P /= np.where(P.sum(axis=2, keepdims=True) > 0, P.sum(axis=2, keepdims=True), 1.0)
    return Mdp(P, cost, nc, alpha)
