"""Exact tabular oracles for the mutual-information bound and the modified
policy-iteration scheme.

Everything here works in nats. A variational table ``q`` is a dict keyed by
the ordered agent pair ``(cond, target)``; ``q[(i, j)][s, a_i, a_j]`` is
q(a_j | a_i, s).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np
from scipy.special import xlogy

from .envs import DiscreteGame, random_game

PMF_TOL = 1e-12
QROW_TOL = 1e-9


FIXED_POINT_TOL = 1e-8


class OracleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# discrete joints and mutual information


def check_pmf(p: np.ndarray, tol: float = PMF_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise OracleError("pmf has negative or non-finite entries")
    if abs(p.sum() - 1.0) > tol:
        raise OracleError(f"pmf sums to {p.sum()!r}, not 1")
    return p


def entropy(p: np.ndarray) -> float:
    return -float(xlogy(p, p).sum())


def brute_mi(joint: np.ndarray) -> float:
    """I(A;B) = sum p(a,b) log p(a,b) / (p(a) p(b)) for a 2-d joint pmf."""
    p = check_pmf(joint)
    if p.ndim != 2:
        raise OracleError(f"joint must be 2-d, got shape {p.shape}")
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / (pa * pb)[mask])))


def exact_conditionals(joint: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (q(b|a) as [A, B], q(a|b) as [B, A]); unreachable rows are uniform."""
    p = check_pmf(joint)
    return _conditional(p), _conditional(p.T)


def _conditional(p: np.ndarray) -> np.ndarray:
    row = p.sum(axis=1, keepdims=True)
    out = np.full_like(p, 1.0 / p.shape[1])
    np.divide(p, row, out=out, where=row > 0)
    return out


def _check_rows(q: np.ndarray, shape: tuple[int, int], what: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != shape:
        raise OracleError(f"{what} has shape {q.shape}, expected {shape}")
    if np.any(q < 0) or np.any(np.abs(q.sum(axis=-1) - 1.0) > QROW_TOL):
        raise OracleError(f"{what} rows are not normalized pmfs")
    return q


def mi_lower_bound_one_sided(joint: np.ndarray, q_b_given_a: np.ndarray) -> float:
    """H(B) + E log q(b|a)."""
    p = check_pmf(joint)
    q = _check_rows(q_b_given_a, p.shape, "q(b|a)")
    return entropy(p.sum(axis=0)) + float(xlogy(p, q).sum())


def mi_lower_bound(joint: np.ndarray, q_b_given_a: np.ndarray, q_a_given_b: np.ndarray) -> float:
    """Symmetrized bound 1/2 [H(A) + H(B) + E log q(a|b) + E log q(b|a)]."""
    p = check_pmf(joint)
    qba = _check_rows(q_b_given_a, p.shape, "q(b|a)")
    qab = _check_rows(q_a_given_b, p.T.shape, "q(a|b)")
    h = entropy(p.sum(axis=1)) + entropy(p.sum(axis=0))
    return 0.5 * (h + float(xlogy(p, qba).sum()) + float(xlogy(p.T, qab).sum()))


def pair_marginal(joint: np.ndarray, i: int, j: int) -> np.ndarray:
    """Marginal pmf over agents (i, j) of an N-d joint, axes ordered (i, j)."""
    other = tuple(k for k in range(joint.ndim) if k not in (i, j))
    m = joint.sum(axis=other) if other else joint
    return m if i < j else m.T


# ---------------------------------------------------------------------------
# tabular latent-variable policies


@dataclass
class TabularPolicy:
    """Per-agent action pmfs conditioned on (state, latent value).

    ``per_agent[k]`` has shape [S, Z, A_k]; ``latent`` is p(z) over Z values.
    """

    latent: np.ndarray
    per_agent: list[np.ndarray]

    def __post_init__(self):
        self.latent = check_pmf(self.latent)
        self.per_agent = [np.asarray(p, dtype=np.float64) for p in self.per_agent]
        z = len(self.latent)
        for k, p in enumerate(self.per_agent):
            if p.ndim != 3 or p.shape[1] != z:
                raise OracleError(f"agent {k} policy shape {p.shape} incompatible with |Z|={z}")
            if np.any(p < 0) or np.any(np.abs(p.sum(-1) - 1.0) > PMF_TOL):
                raise OracleError(f"agent {k} policy rows not normalized")

    @property
    def n_agents(self) -> int:
        return len(self.per_agent)

    @property
    def n_states(self) -> int:
        return self.per_agent[0].shape[0]

    def marginal(self, k: int) -> np.ndarray:
        """pi^k(a|s) = sum_z p(z) pi^k(a|s,z), shape [S, A_k]."""
        return np.einsum("z,sza->sa", self.latent, self.per_agent[k])

    def with_agent(self, k: int, table: np.ndarray) -> "TabularPolicy":
        per_agent = list(self.per_agent)
        per_agent[k] = table
        return replace(self, per_agent=per_agent)


def latent_marginal(policy: TabularPolicy, s: int) -> np.ndarray:
    """Exact joint pmf over all agents' actions at state ``s`` (N-d array)."""
    return _joint_from_tables(policy.latent, [p[s] for p in policy.per_agent])


def _joint_from_tables(latent: np.ndarray, tables: list[np.ndarray]) -> np.ndarray:
    # tables[k] has shape [Z, A_k]
    joint = 0.0
    for z, pz in enumerate(latent):
        if pz == 0:
            continue
        prod = tables[0][z]
        for t in tables[1:]:
            prod = np.multiply.outer(prod, t[z])
        joint = joint + pz * prod
    return np.asarray(joint)


def joint_table(policy: TabularPolicy) -> np.ndarray:
    """[S, A_joint] joint action pmf, joint index row-major over agents."""
    return np.stack([latent_marginal(policy, s).ravel() for s in range(policy.n_states)])


def uniform_policy(n_states: int, action_counts, n_latent: int = 1) -> TabularPolicy:
    return TabularPolicy(np.full(n_latent, 1.0 / n_latent),
                         [np.full((n_states, n_latent, a), 1.0 / a) for a in action_counts])


def random_policy(rng: np.random.Generator, n_states: int, action_counts, n_latent: int) -> TabularPolicy:
    latent = rng.dirichlet(np.ones(n_latent))
    per_agent = [rng.dirichlet(np.ones(a), size=(n_states, n_latent)) for a in action_counts]
    return TabularPolicy(latent, per_agent)


def uniform_q(n_states: int, action_counts) -> dict:
    n = len(action_counts)
    return {(i, j): np.full((n_states, action_counts[i], action_counts[j]), 1.0 / action_counts[j])
            for i in range(n) for j in range(n) if i != j}


def random_q(rng: np.random.Generator, n_states: int, action_counts) -> dict:
    n = len(action_counts)
    return {(i, j): rng.dirichlet(np.ones(action_counts[j]), size=(n_states, action_counts[i]))
            for i in range(n) for j in range(n) if i != j}


def exact_q(policy: TabularPolicy) -> dict:
    """True conditionals p(a_j | a_i, s) for every ordered pair."""
    n = policy.n_agents
    out = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            out[(i, j)] = np.stack([_conditional(pair_marginal(latent_marginal(policy, s), i, j))
                                    for s in range(policy.n_states)])
    return out


def two_point_family(t: float) -> TabularPolicy:
    """Two agents, two actions, |Z| = 2: each agent plays action z with
    probability 1 - t/2, so t = 0 is perfectly coordinated and t = 1 independent."""
    per = np.array([[(1 - t) * np.eye(2)[z] + t * 0.5 for z in range(2)]])
    return TabularPolicy(np.array([0.5, 0.5]), [per, per.copy()])


# ---------------------------------------------------------------------------
# modified policy evaluation


def state_bonus(policy: TabularPolicy, q: dict, beta: float, i: int) -> np.ndarray:
    """E_a[-beta log pi^i(a^i|s) + beta/N sum_j log q^(i,j)(a^i, a^j, s)] per state."""
    n = policy.n_agents
    pi_i = policy.marginal(i)
    out = beta * -xlogy(pi_i, pi_i).sum(axis=1)
    if n > 1:
        for s in range(policy.n_states):
            joint = latent_marginal(policy, s)
            acc = 0.0
            for j in range(n):
                if j == i:
                    continue
                p_ij = pair_marginal(joint, i, j)
                acc += float(xlogy(p_ij, q[(i, j)][s]).sum())
                acc += float(xlogy(p_ij.T, q[(j, i)][s]).sum())
            out[s] += beta / n * acc
    return out


def exact_value(game: DiscreteGame, policy: TabularPolicy, q: dict, beta: float,
                i: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Fixed point of the modified Bellman operator by a direct linear solve.

    Returns (V_i [S], Q_i [S, A_joint]).
    """
    if not 0 <= game.gamma < 1:
        raise OracleError(f"exact evaluation needs 0 <= gamma < 1, got {game.gamma}")
    pi = joint_table(policy)
    p_pi = np.einsum("sa,sat->st", pi, game.transition)
    r_pi = np.einsum("sa,sa->s", pi, game.reward) + state_bonus(policy, q, beta, i)
    system = np.eye(game.n_states) - game.gamma * p_pi
    try:
        v = np.linalg.solve(system, r_pi)
    except np.linalg.LinAlgError as exc:
        raise OracleError("singular policy-evaluation system") from exc
    q_values = game.reward + game.gamma * game.transition @ v
    return v, q_values


def bellman_apply(game: DiscreteGame, policy: TabularPolicy, q: dict, beta: float,
                  Q: np.ndarray, i: int = 0, bonus: np.ndarray | None = None) -> np.ndarray:
    """One application of T^pi to Q_i."""
    if Q.shape != game.reward.shape:
        raise OracleError(f"Q shape {Q.shape} != {game.reward.shape}")
    if bonus is None:
        bonus = state_bonus(policy, q, beta, i)
    v = np.einsum("sa,sa->s", joint_table(policy), Q) + bonus
    return game.reward + game.gamma * game.transition @ v


# ---------------------------------------------------------------------------
# variational policy improvement


def simplex_grid(n: int, resolution: int) -> np.ndarray:
    """All pmfs over n outcomes whose entries are multiples of 1/resolution."""
    points = [c for c in itertools.product(range(resolution + 1), repeat=n) if sum(c) == resolution]
    return np.asarray(points, dtype=np.float64) / resolution


@dataclass
class ImprovementReport:
    min_delta_q: float
    objective_gain: np.ndarray
    changed_states: list[int]
    q_old: np.ndarray
    q_new: np.ndarray


def _state_objective(latent, tables, i, q_s, q_row, beta) -> float:
    joint = _joint_from_tables(latent, tables)
    n = len(tables)
    pi_i = np.einsum("z,za->a", latent, tables[i])
    val = float(np.dot(joint.ravel(), q_row)) - beta * float(xlogy(pi_i, pi_i).sum())
    if n > 1:
        acc = 0.0
        for j in range(n):
            if j == i:
                continue
            p_ij = pair_marginal(joint, i, j)
            acc += float(xlogy(p_ij, q_s[(i, j)]).sum()) + float(xlogy(p_ij.T, q_s[(j, i)]).sum())
        val += beta / n * acc
    return val


def improvement_step(game: DiscreteGame, policy: TabularPolicy, q: dict, beta: float, i: int,
                     resolution: int = 4, candidates: np.ndarray | None = None,
                     tie_tol: float = 1e-12) -> tuple[TabularPolicy, dict, ImprovementReport]:
    """Maximize the per-state improvement objective for agent ``i``.

    The candidate set at each state is the product over latent values of
    ``candidates`` (default: a simplex grid) plus the current per-latent pmfs.
    For every policy candidate, q is either kept or replaced by the exact
    conditionals, whichever scores higher. Other agents stay fixed.
    """
    n_lat = len(policy.latent)
    if candidates is None:
        candidates = simplex_grid(game.action_counts[i], resolution)
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.size == 0:
        raise OracleError("empty candidate set")
    _, q_old_values = exact_value(game, policy, q, beta, i)
    old_table = policy.per_agent[i]
    new_table = old_table.copy()
    new_q = {k: v.copy() for k, v in q.items()}
    gains = np.zeros(game.n_states)
    changed = []
    pair_keys = [k for k in q if i in k]
    for s in range(game.n_states):
        tables = [p[s] for p in policy.per_agent]
        q_s = {k: v[s] for k, v in q.items()}
        best = _state_objective(policy.latent, tables, i, q_s, q_old_values[s], beta)
        baseline = best
        best_table, best_q = tables[i], None
        options = itertools.chain([tables[i]],
                                  (np.stack(c) for c in itertools.product(candidates, repeat=n_lat)))
        for cand in options:
            trial = list(tables)
            trial[i] = cand
            exact = _exact_pair_q(policy.latent, trial, pair_keys)
            for q_try in (None, exact):
                q_eval = q_s if q_try is None else {**q_s, **q_try}
                val = _state_objective(policy.latent, trial, i, q_eval, q_old_values[s], beta)
                if val > best + tie_tol:
                    best, best_table, best_q = val, cand, q_try
        gains[s] = best - baseline
        if best_table is not tables[i] or best_q is not None:
            changed.append(s)
        new_table[s] = best_table
        if best_q is not None:
            for k, v in best_q.items():
                new_q[k][s] = v
    new_policy = policy.with_agent(i, new_table)
    _, q_new_values = exact_value(game, new_policy, new_q, beta, i)
    report = ImprovementReport(float(np.min(q_new_values - q_old_values)), gains, changed,
                               q_old_values, q_new_values)
    return new_policy, new_q, report


def _exact_pair_q(latent, tables, keys) -> dict:
    joint = _joint_from_tables(latent, tables)
    return {(a, b): _conditional(pair_marginal(joint, a, b)) for a, b in keys}


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4,
                   atol: float = 1e-6) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, atol / rtol).

    The floor makes near-zero gradients pass exactly when their absolute
    error is below ``atol``, so ``error < rtol`` is the combined criterion.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


# ---------------------------------------------------------------------------
# suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_margin: float
    detail: dict = field(default_factory=dict)


def check_mi_bounds(rng: np.random.Generator, n_trials: int = 500) -> CheckResult:
    worst_violation = -math.inf
    worst_tight = 0.0
    counterexample = None
    for _ in range(n_trials):
        a, b = rng.integers(2, 7, size=2)
        joint = rng.dirichlet(np.full(a * b, rng.uniform(0.2, 2.0))).reshape(a, b)
        joint /= joint.sum()
        qba = rng.dirichlet(np.ones(b), size=a)
        qab = rng.dirichlet(np.ones(a), size=b)
        mi = brute_mi(joint)
        gap = mi_lower_bound(joint, qba, qab) - mi
        if gap > worst_violation:
            worst_violation = gap
            if gap > 1e-9:
                counterexample = {"joint": joint.tolist()}
        tight = abs(mi_lower_bound(joint, *exact_conditionals(joint)) - mi)
        worst_tight = max(worst_tight, tight)
    passed = worst_violation <= 1e-9 and worst_tight < 1e-12
    return CheckResult("mi_lower_bound", passed, max(worst_violation, 0.0),
                       {"max_bound_violation": max(worst_violation, 0.0),
                        "max_tightness_error": worst_tight, "counterexample": counterexample})


def contraction_iterations(gamma: float, initial_gap: float, tol: float = FIXED_POINT_TOL / 10) -> int:
    """Smallest k with gamma^k * initial_gap <= tol (the a-priori Banach bound)."""
    if initial_gap <= tol:
        return 1
    return max(1, math.ceil(math.log(tol / initial_gap) / math.log(gamma)))


def check_policy_evaluation(games: Iterable[tuple[DiscreteGame, TabularPolicy, dict, float]],
                            iterations: int | None = None) -> CheckResult:
    """Iterate the modified Bellman operator from Q = 0 and compare with the linear solve.

    ``iterations=None`` picks, per game, the count the contraction bound
    guarantees is enough; an integer applies that fixed count everywhere.
    """
    worst_fixed = 0.0
    per_gamma: dict[float, float] = {}
    worst_ratio_margin = -math.inf
    ratios = []
    failure = None
    rng = np.random.default_rng(12345)
    for game, policy, q, beta in games:
        try:
            _, q_star = exact_value(game, policy, q, beta)
        except OracleError as exc:
            failure = failure or {"gamma": game.gamma, "error": str(exc)}
            worst_fixed = math.inf
            continue
        bonus = state_bonus(policy, q, beta, 0)
        Q = np.zeros_like(game.reward)
        n_iter = iterations or contraction_iterations(game.gamma, float(np.max(np.abs(q_star))))
        for _ in range(n_iter):
            Q = bellman_apply(game, policy, q, beta, Q, bonus=bonus)
        err = float(np.max(np.abs(Q - q_star)))
        worst_fixed = max(worst_fixed, err)
        per_gamma[game.gamma] = max(per_gamma.get(game.gamma, 0.0), err)
        for _ in range(3):
            q1 = rng.normal(scale=10.0, size=game.reward.shape)
            q2 = rng.normal(scale=10.0, size=game.reward.shape)
            num = np.max(np.abs(bellman_apply(game, policy, q, beta, q1, bonus=bonus)
                                - bellman_apply(game, policy, q, beta, q2, bonus=bonus)))
            ratio = float(num / np.max(np.abs(q1 - q2)))
            ratios.append(ratio)
            worst_ratio_margin = max(worst_ratio_margin, ratio - game.gamma)
        if err >= FIXED_POINT_TOL and failure is None:
            failure = {"gamma": game.gamma, "iterations": n_iter, "fixed_point_error": err}
    passed = worst_fixed < FIXED_POINT_TOL and worst_ratio_margin <= 1e-12 and failure is None
    hist, edges = np.histogram(ratios, bins=10, range=(0.0, 1.0)) if ratios else (np.zeros(0), np.zeros(0))
    return CheckResult("policy_evaluation", passed, worst_fixed,
                       {"max_fixed_point_error": worst_fixed,
                        "max_error_by_gamma": {str(g): e for g, e in sorted(per_gamma.items())},
                        "max_ratio_minus_gamma": worst_ratio_margin,
                        "contraction_ratio_histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
                        "counterexample": failure})


def check_policy_improvement(games: Iterable[tuple[DiscreteGame, TabularPolicy, dict, float]]) -> CheckResult:
    worst = math.inf
    counterexample = None
    for game, policy, q, beta in games:
        _, _, report = improvement_step(game, policy, q, beta, 0, resolution=4)
        if report.min_delta_q < worst:
            worst = report.min_delta_q
            if worst < -1e-10:
                counterexample = {"gamma": game.gamma, "beta": beta, "min_delta_q": worst}
    return CheckResult("policy_improvement", worst >= -1e-10, worst,
                       {"min_delta_q": worst, "counterexample": counterexample})


def random_instances(rng: np.random.Generator, n: int, gammas=(0.5, 0.9, 0.99), max_actions: int = 3,
                     max_states: int = 4, n_latent: int = 2):
    for k in range(n):
        s = int(rng.integers(1, max_states + 1))
        acts = tuple(int(a) for a in rng.integers(2, max_actions + 1, size=2))
        gamma = gammas[k % len(gammas)]
        game = random_game(rng, s, acts, gamma)
        policy = random_policy(rng, s, acts, n_latent)
        q = random_q(rng, s, acts)
        beta = float(rng.choice([0.0, 0.05, 0.1, 0.5]))
        yield game, policy, q, beta


def run_suite(seed: int = 0, n_mi: int = 500, n_games: int = 100,
              negative_control: bool = False, gradients: bool = True) -> list[CheckResult]:
    """Run every oracle check; ``negative_control`` injects a gamma > 1 game."""
    rng = np.random.default_rng(seed)
    results = [check_mi_bounds(rng, n_mi)]
    eval_games = list(random_instances(rng, n_games))
    if negative_control:
        g, p, q, b = eval_games[0]
        eval_games.append((replace(g, gamma=1.5), p, q, b))
    results.append(check_policy_evaluation(eval_games))
    results.append(check_policy_improvement(random_instances(rng, n_games)))
    if gradients:
        from .gradcheck import gradient_checks
        results.extend(gradient_checks(rng))
    return results
