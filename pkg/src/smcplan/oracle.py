"""Exact solvers used as ground truth for the sampled planner.

Everything here operates on full transition tensors (no sampling):
finite-horizon soft values solved backward in log space, posterior
trajectory distributions by exhaustive enumeration, the evidence
decomposition into a lower bound plus a non-negative gap, and plain
value iteration. Outputs are exact up to floating point, which is what
makes them usable as oracles in the test-suite.

Conventions: rewards enter likelihoods as ``reward / temperature``, and
discounting is applied as an explicit ``gamma ** (t - 1)`` factor on the
reward at step t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, NumericalError, SupportError
from .mdp import (
    TabularMdp,
    check_policy_table,
    enumerate_trajectories,
    stage_policy_tables,
)


@dataclass(frozen=True)
class SoftSolution:
    """Soft values at the root planning stage.

    ``v_soft[s]`` is the log-expected exponentiated return under the
    prior, ``q_soft[s, a]`` its action-conditioned counterpart, and
    ``posterior_policy`` the prior reweighted by ``exp(q_soft)``.
    """

    v_soft: np.ndarray
    q_soft: np.ndarray
    posterior_policy: np.ndarray
    temperature: float

    def to_dict(self) -> dict:
        """JSON-ready dump, handy when debugging planner mismatches."""
        return {
            "v_soft": self.v_soft.tolist(),
            "q_soft": self.q_soft.tolist(),
            "posterior_policy": self.posterior_policy.tolist(),
            "temperature": self.temperature,
        }


def _soft_backup_sweeps(mdp: TabularMdp, prior, horizon: int, temperature: float):
    """Yield ``(v, q, posterior)`` per backward sweep, boundary values zero."""
    if horizon < 1:
        raise ContractError("horizon must be at least 1")
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    table = check_policy_table(prior, mdp.n_states, mdp.n_actions, "prior")
    with np.errstate(divide="ignore"):
        log_p = np.log(mdp.transition)
        log_prior = np.log(table)
    v = np.zeros(mdp.n_states)
    for _ in range(horizon):
        q = mdp.reward / temperature + mdp.discount * logsumexp(
            log_p + v[None, None, :], axis=2
        )
        v = logsumexp(log_prior + q, axis=1)
        if not np.isfinite(v).all():
            raise NumericalError("soft values overflowed; check reward/temperature scale")
        log_post = log_prior + q - v[:, None]
        posterior = np.exp(log_post)
        posterior /= posterior.sum(axis=1, keepdims=True)
        yield v, q, posterior


def soft_value_iteration(
    mdp: TabularMdp, prior, horizon: int, temperature: float
) -> SoftSolution:
    """Finite-horizon soft Bellman recursion with zero boundary values.

    The backup is ``q[s, a] = R(s, a)/T + gamma * log Eexp v(s')`` with
    ``v[s] = log sum_a prior(a|s) exp q[s, a]``, evaluated exactly over
    the full transition row. Returns the root-stage solution.
    """
    for v, q, posterior in _soft_backup_sweeps(mdp, prior, horizon, temperature):
        pass
    return SoftSolution(v, q, posterior, float(temperature))


def posterior_policy_stages(
    mdp: TabularMdp, prior, horizon: int, temperature: float
) -> np.ndarray:
    """Stage-dependent exact posterior policies, index 0 at the root.

    Stage t's table is the posterior with ``horizon - t`` steps to go, so
    stacking them gives the exact (non-stationary) posterior policy for a
    depth-``horizon`` problem.
    """
    sweeps = [p for _, _, p in _soft_backup_sweeps(mdp, prior, horizon, temperature)]
    return np.stack(sweeps[::-1], axis=0)


def _discounted_loglik(trajectory, gamma: float, temperature: float) -> float:
    return sum(
        (gamma**t) * r / temperature for t, r in enumerate(trajectory.rewards)
    )


def exact_posterior_trajectories(
    mdp: TabularMdp, prior, s0: int, depth: int, temperature: float
):
    """Posterior over depth-limited trajectories by exhaustive enumeration.

    Each trajectory's prior probability is reweighted by the exponential
    of its discounted reward sum over the temperature, then normalized.
    """
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    pairs = enumerate_trajectories(mdp, s0, prior, depth)
    log_w = np.array(
        [np.log(p) + _discounted_loglik(traj, mdp.discount, temperature) for traj, p in pairs]
    )
    log_norm = logsumexp(log_w)
    posterior = np.exp(log_w - log_norm)
    return [(traj, float(w)) for (traj, _), w in zip(pairs, posterior)]


def root_action_marginal(weighted_trajectories, n_actions: int) -> np.ndarray:
    """Marginal distribution of the first action of weighted trajectories."""
    mass = np.zeros(n_actions)
    for traj, p in weighted_trajectories:
        if not traj.actions:
            raise ContractError("trajectory has no root action to marginalize")
        mass[traj.actions[0]] += p
    return mass / mass.sum()


def elbo_and_gap(
    mdp: TabularMdp, proposal, prior, s0: int, depth: int, temperature: float
):
    """Evidence decomposition at ``s0``: ``(elbo, gap, log_evidence)``.

    The lower bound is the proposal's expected discounted reward (over
    temperature) minus its accumulated log-ratio to the prior; the gap is
    the divergence of the proposal path measure from the exact posterior.
    The two are computed from separate enumerations so the identity
    ``elbo + gap == log_evidence`` is a meaningful check, not an algebraic
    tautology.
    """
    prior_table = check_policy_table(prior, mdp.n_states, mdp.n_actions, "prior")
    proposal_tables = stage_policy_tables(proposal, depth, mdp, "proposal")
    pairs = enumerate_trajectories(mdp, s0, proposal_tables[:depth], depth)

    elbo = 0.0
    gap_vs_joint = 0.0  # sum of p_q * (log p_q - log p_prior - loglik)
    for traj, p_q in pairs:
        log_ratio = 0.0  # accumulated log q_t(a|s) - log prior(a|s)
        for t, (s, a) in enumerate(zip(traj.states, traj.actions)):
            q_prob = proposal_tables[t][s, a]
            pi_prob = prior_table[s, a]
            if pi_prob == 0.0:
                raise SupportError(
                    f"proposal puts mass on action {a} at state {s} where the "
                    "prior has none"
                )
            log_ratio += np.log(q_prob) - np.log(pi_prob)
        loglik = _discounted_loglik(traj, mdp.discount, temperature)
        elbo += p_q * (loglik - log_ratio)
        gap_vs_joint += p_q * (log_ratio - loglik)

    prior_pairs = enumerate_trajectories(mdp, s0, prior_table, depth)
    log_evidence = float(
        logsumexp(
            [
                np.log(p) + _discounted_loglik(traj, mdp.discount, temperature)
                for traj, p in prior_pairs
            ]
        )
    )
    gap = gap_vs_joint + log_evidence
    return float(elbo), float(gap), log_evidence


def optimal_policy(mdp: TabularMdp, horizon: int):
    """Finite-horizon value iteration; greedy ties split uniformly.

    Returns ``(policy, v_star)`` at the root stage.
    """
    if horizon < 1:
        raise ContractError("horizon must be at least 1")
    v = np.zeros(mdp.n_states)
    for _ in range(horizon):
        q = mdp.reward + mdp.discount * mdp.transition @ v
        v = q.max(axis=1)
    ties = np.abs(q - v[:, None]) <= 1e-9
    policy = ties / ties.sum(axis=1, keepdims=True)
    return policy, v


def policy_value(mdp: TabularMdp, policy, horizon: int) -> np.ndarray:
    """Exact expected discounted return of a policy over ``horizon`` steps.

    Accepts a stationary table or a stack of per-stage tables (root
    first). Exact dynamic programming, equivalent to enumerating every
    trajectory.
    """
    if horizon < 1:
        raise ContractError("horizon must be at least 1")
    tables = stage_policy_tables(policy, horizon, mdp)
    v = np.zeros(mdp.n_states)
    for steps_to_go in range(1, horizon + 1):
        table = tables[horizon - steps_to_go]
        q = mdp.reward + mdp.discount * mdp.transition @ v
        v = (table * q).sum(axis=1)
    return v
