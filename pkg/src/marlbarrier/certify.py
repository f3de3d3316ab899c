"""Scenario-based probabilistic safety verification.

Given N sampled trajectories from a trained policy, the per-trajectory
safety statistic is the total number of agent terminations; a trajectory
violates the constraint when that total exceeds the threshold omega.
Removing the k worst trajectories, the risk level epsilon is the smallest
value in (0, 1) satisfying

    C(k+m-1, k) * sum_{i=0}^{k+m-1} C(N, i) eps^i (1-eps)^{N-i} <= beta

so that with confidence at least 1 - beta, a fresh trajectory is safe
with probability at least 1 - epsilon. Binomial terms are evaluated in
log space; the inequality is solved by bisection.

The parameter count m defaults to 1 in the CLI: using the full network
parameter count makes the bound vacuous at desk scale (see README).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .battlegrid import read_trajectory_log

__all__ = [
    "CertifyError",
    "SafetyQuery",
    "SafetyCertificate",
    "epsilon_bound",
    "log_lhs",
    "certify_policy",
    "format_certificate",
]

BISECT_TOL = 1e-9


class CertifyError(ValueError):
    """Invalid query or trajectory log."""


@dataclass
class SafetyQuery:
    n_samples: int  # N sampled trajectories
    removed: int = 0  # k discarded constraints
    param_count: int = 1  # m
    beta: float = 0.05  # confidence parameter; 1-beta is the confidence
    omega: float = 0.0  # safety threshold on total deaths

    def validate(self) -> None:
        if self.n_samples < 1:
            raise CertifyError("safety query: n_samples must be >= 1")
        if self.removed < 0:
            raise CertifyError("safety query: removed must be >= 0")
        if self.param_count < 1:
            raise CertifyError("safety query: param_count must be >= 1")
        if self.removed + self.param_count - 1 >= self.n_samples:
            raise CertifyError(
                "safety query: need removed + param_count - 1 < n_samples, got "
                f"{self.removed} + {self.param_count} - 1 >= {self.n_samples}"
            )
        # beta = 1 is the vacuous-confidence boundary and is allowed
        if not (0.0 < self.beta <= 1.0):
            raise CertifyError("safety query: beta must be in (0, 1]")
        if self.omega < 0:
            raise CertifyError("safety query: omega must be >= 0")


@dataclass
class SafetyCertificate:
    epsilon: float
    violations: int
    satisfied: bool  # violations <= removed
    removed_episodes: tuple[int, ...] = ()


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def log_lhs(eps: float, n: int, k: int, m: int) -> float:
    """Log of the certificate inequality's left-hand side at `eps`."""
    j = k + m - 1
    prefix = _log_comb(j, k)
    if eps <= 0.0:
        return prefix  # only the i=0 term survives: C(N,0) * 1 * 1
    if eps >= 1.0:
        return -math.inf if j < n else prefix
    log_eps = math.log(eps)
    log_1m = math.log1p(-eps)
    terms = [_log_comb(n, i) + i * log_eps + (n - i) * log_1m for i in range(j + 1)]
    peak = max(terms)
    return prefix + peak + math.log(sum(math.exp(t - peak) for t in terms))


def epsilon_bound(query: SafetyQuery) -> float:
    """Smallest epsilon in (0, 1) satisfying the certificate inequality.

    Solved by bisection to absolute tolerance 1e-9; the left-hand side is
    strictly decreasing in epsilon on (0, 1).
    """
    query.validate()
    n, k, m = query.n_samples, query.removed, query.param_count
    log_beta = math.log(query.beta)
    if log_lhs(0.0, n, k, m) <= log_beta:
        return 0.0
    if log_lhs(1.0 - 1e-15, n, k, m) > log_beta:
        raise CertifyError(
            f"certificate inequality unsatisfiable for any epsilon < 1 "
            f"(N={n}, k={k}, m={m}, beta={query.beta})"
        )
    lo, hi = 0.0, 1.0
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if log_lhs(mid, n, k, m) <= log_beta:
            hi = mid
        else:
            lo = mid
    return hi


def certify_policy(trajectory_log, query: SafetyQuery) -> SafetyCertificate:
    """Check a trajectory log against the threshold and bound the risk.

    `trajectory_log` is a path to a battlegrid log or a list of parsed
    episode records; it must contain exactly `query.n_samples` complete
    episodes. The k removed constraints are the k largest-death episodes.
    """
    query.validate()
    if isinstance(trajectory_log, (str, bytes)) or hasattr(trajectory_log, "__fspath__"):
        episodes = read_trajectory_log(trajectory_log)
    else:
        episodes = list(trajectory_log)
    if len(episodes) != query.n_samples:
        raise CertifyError(
            f"trajectory log holds {len(episodes)} episodes, query expects "
            f"{query.n_samples}"
        )
    incomplete = [e.episode_id for e in episodes if not e.done]
    if incomplete:
        raise CertifyError(f"episodes {incomplete} are incomplete (no done step)")
    totals = np.array([e.total_deaths for e in episodes])
    violations = int((totals > query.omega).sum())
    order = np.argsort(-totals, kind="stable")[: query.removed]
    removed = tuple(int(episodes[i].episode_id) for i in order)
    return SafetyCertificate(
        epsilon=epsilon_bound(query),
        violations=violations,
        satisfied=violations <= query.removed,
        removed_episodes=removed,
    )


def format_certificate(cert: SafetyCertificate, query: SafetyQuery) -> str:
    """Human-readable report with a machine-readable key=value block."""
    confidence = 1.0 - query.beta
    lines = [
        "Scenario safety certificate",
        "---------------------------",
        f"Checked {query.n_samples} sampled trajectories against the death "
        f"threshold omega = {query.omega:g}.",
        f"{cert.violations} trajectories violate the threshold; "
        f"{query.removed} worst samples were removed.",
        f"Constraint satisfied after removal: {'yes' if cert.satisfied else 'no'}.",
        f"With confidence >= {confidence:g}, a fresh trajectory is safe with "
        f"probability >= {1.0 - cert.epsilon:.6f} (epsilon = {cert.epsilon:.9f}).",
        "",
        "[certificate]",
        f"N={query.n_samples}",
        f"k={query.removed}",
        f"m={query.param_count}",
        f"beta={query.beta!r}",
        f"omega={query.omega!r}",
        f"epsilon={cert.epsilon!r}",
        f"violations={cert.violations}",
        f"satisfied={int(cert.satisfied)}",
    ]
    return "\n".join(lines) + "\n"
