"""Moment constraints, feature-matrix audits and the maximum-entropy dual solve.

For one (head, relation, bin) context with K candidate tails, the
maximum-entropy distribution matching the mean structural feature c_S and the
mean composite energy c_D is p_i ∝ exp(beta*S_i - tau*D_i).  The multipliers
minimise the strictly convex dual

    g(beta, tau) = log sum_i exp(beta*S_i - tau*D_i) - beta*c_S + tau*c_D,

whose gradient is the moment residual and whose Hessian is the covariance of
(S, -D) under p.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import DegenerateFeatures, DomainError, EmptySupport, InfeasibleConstraints, IrreparableDegeneracy

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10
HESSIAN_COND_MAX = 1e8
FEASIBILITY_SLACK = 1e-6
JITTER_ETA = 1e-3
JITTER_SIGMA = 1.0


class NegativeTauWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MomentConstraints:
    c_D: float
    c_S: float


@dataclass(frozen=True)
class NondegeneracyReport:
    status: str  # "ok" | "rank_deficient" | "ill_conditioned"
    rank: int
    kappa: float
    singular_values: np.ndarray

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class MaxEntSolution:
    alpha: float
    beta: float
    tau: float
    probs: np.ndarray
    converged: bool
    iterations: int
    residual: tuple = (0.0, 0.0)

    @property
    def negative_tau(self) -> bool:
        return self.tau < 0

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())


def empirical_moments(energies, features, S_max=None) -> MomentConstraints:
    """Means of composite energy and structural feature over the observed positives."""
    energies = np.asarray(energies, dtype=float)
    features = np.asarray(features, dtype=float)
    if energies.size == 0:
        raise EmptySupport("no positives for this (relation, bin)")
    if energies.shape != features.shape:
        raise DomainError("energies and features must align")
    c = MomentConstraints(float(energies.mean()), float(features.mean()))
    if not (np.isfinite(c.c_D) and np.isfinite(c.c_S)) or c.c_D < 0:
        raise DomainError(f"invalid moments {c}")
    if S_max is not None and abs(c.c_S) > S_max:
        raise DomainError(f"c_S={c.c_S} outside [-S_max, S_max]")
    return c


def feature_matrix(S, D) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    D = np.asarray(D, dtype=float)
    if S.shape != D.shape or S.ndim != 1:
        raise DomainError("S and D must be 1-d arrays of equal length")
    return np.vstack([np.ones_like(S), S, D])


def check_nondegeneracy(S, D, C_cond=1e6) -> NondegeneracyReport:
    """SVD audit of the 3 x K matrix [1; S; D]."""
    F = feature_matrix(S, D)
    if not np.all(np.isfinite(F)):
        raise DomainError("non-finite feature matrix entries")
    sv = np.linalg.svd(F, compute_uv=False)
    kept = sv[sv > RANK_RTOL * sv[0]]
    rank = len(kept)
    kappa = float(kept[0] / kept[-1])
    if rank < 3:
        status = "rank_deficient"
    elif kappa > C_cond:
        status = "ill_conditioned"
    else:
        status = "ok"
    return NondegeneracyReport(status, rank, kappa, sv)


def repair_degeneracy(
    S,
    D,
    candidates,
    n_entities,
    feature_fn,
    C_cond=1e6,
    k_min=8,
    seed=0,
    eta=JITTER_ETA,
    sigma=JITTER_SIGMA,
    xi_dim=2,
    max_rounds=3,
):
    """Expand the candidate set to k_min, then jitter energies, re-checking after each.

    `feature_fn(tails) -> (S, D)` evaluates features for extra candidates.
    Jitter adds eta*|xi|^2 with xi ~ N(0, sigma^2 I_xi_dim) to each energy.
    Returns (S, D, candidates, report).
    """
    S = np.asarray(S, dtype=float)
    D = np.asarray(D, dtype=float)
    candidates = np.asarray(candidates)
    report = check_nondegeneracy(S, D, C_cond)
    if report.ok:
        return S, D, candidates, report
    rng = np.random.default_rng(seed)
    for _ in range(max_rounds):
        if len(candidates) < k_min and len(candidates) < n_entities:
            pool = np.setdiff1d(np.arange(n_entities), candidates)
            extra = rng.choice(pool, size=min(k_min - len(candidates), len(pool)), replace=False)
            S_new, D_new = feature_fn(extra)
            candidates = np.concatenate([candidates, extra])
            S = np.concatenate([S, S_new])
            D = np.concatenate([D, D_new])
            report = check_nondegeneracy(S, D, C_cond)
            if report.ok:
                return S, D, candidates, report
        xi = rng.normal(0.0, sigma, size=(len(D), xi_dim))
        D = D + eta * (xi**2).sum(axis=1)
        report = check_nondegeneracy(S, D, C_cond)
        if report.ok:
            return S, D, candidates, report
    raise IrreparableDegeneracy(f"feature matrix still {report.status} after {max_rounds} rounds (kappa={report.kappa:.3g})")


def is_feasible(S, D, c: MomentConstraints, slack=FEASIBILITY_SLACK) -> bool:
    """Is there p in the simplex matching both moments to within `slack`?"""
    S = np.asarray(S, dtype=float)
    D = np.asarray(D, dtype=float)
    K = len(S)
    # variables: p (K), then slacks s+ and s- for the two moment rows
    A_eq = np.zeros((3, K + 4))
    A_eq[0, :K] = 1.0
    A_eq[1, :K] = S
    A_eq[1, K : K + 2] = [1.0, -1.0]
    A_eq[2, :K] = D
    A_eq[2, K + 2 : K + 4] = [1.0, -1.0]
    b_eq = [1.0, c.c_S, c.c_D]
    cost = np.r_[np.zeros(K), np.ones(4)]
    res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * (K + 4), method="highs")
    return bool(res.status == 0 and res.fun <= slack)


def _dual_parts(theta, Phi, target):
    logits = Phi @ theta
    lse = logsumexp(logits)
    p = np.exp(logits - lse)
    g = lse - theta @ target
    mean = p @ Phi
    grad = mean - target
    centered = Phi - mean
    H = (centered * p[:, None]).T @ centered
    return g, grad, H, p, lse


def solve_maxent(
    S,
    D,
    c: MomentConstraints,
    tol=1e-8,
    max_iter=100,
    check=True,
    C_cond=1e6,
    init=(0.0, 0.0),
) -> MaxEntSolution:
    """Minimise the dual by safeguarded Newton with backtracking.

    Falls back to a gradient step when the Hessian condition number exceeds
    1e8.  Raises DegenerateFeatures when `check` is set and the feature
    matrix fails its audit, and InfeasibleConstraints when the moments are
    outside the candidates' convex hull (detected up front from the moment
    ranges, or after non-convergence by a linear-programming check).
    """
    S = np.asarray(S, dtype=float)
    D = np.asarray(D, dtype=float)
    if check:
        report = check_nondegeneracy(S, D, C_cond)
        if not report.ok:
            raise DegenerateFeatures(f"feature matrix {report.status} (rank {report.rank}, kappa {report.kappa:.3g})")
    for lo, hi, v, name in ((S.min(), S.max(), c.c_S, "c_S"), (D.min(), D.max(), c.c_D, "c_D")):
        if v < lo - FEASIBILITY_SLACK or v > hi + FEASIBILITY_SLACK:
            raise InfeasibleConstraints(f"{name}={v:.6g} outside candidate range [{lo:.6g}, {hi:.6g}]")

    Phi = np.column_stack([S, -D])
    target = np.array([c.c_S, -c.c_D])
    theta = np.array(init, dtype=float)
    g, grad, H, p, lse = _dual_parts(theta, Phi, target)
    it = 0
    converged = bool(np.max(np.abs(grad)) <= tol)
    while not converged and it < max_iter:
        it += 1
        step = None
        try:
            if np.linalg.cond(H) <= HESSIAN_COND_MAX:
                step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)) or grad @ step >= 0:
            step = -grad
        slope = grad @ step
        s = 1.0
        while True:
            cand = theta + s * step
            g_new, grad_new, H_new, p_new, lse_new = _dual_parts(cand, Phi, target)
            if g_new <= g + 1e-4 * s * slope or s < 1e-12:
                break
            # near the optimum the dual decrease drops below rounding; a full
            # step that halves the residual is accepted instead
            if s == 1.0 and np.max(np.abs(grad_new)) <= 0.5 * np.max(np.abs(grad)):
                break
            s *= 0.5
        if s < 1e-12 and g_new > g:
            break
        theta, g, grad, H, p, lse = cand, g_new, grad_new, H_new, p_new, lse_new
        converged = bool(np.max(np.abs(grad)) <= tol)

    if not converged and not is_feasible(S, D, c, slack=0.0):
        raise InfeasibleConstraints(f"moments {c} not attainable by any distribution over the candidates")
    beta, tau = float(theta[0]), float(theta[1])
    alpha = float(-lse)
    if tau < 0:
        warnings.warn(f"negative geometric weight tau={tau:.4g}", NegativeTauWarning, stacklevel=2)
    return MaxEntSolution(alpha, beta, tau, p, converged, it, (float(grad[0]), float(-grad[1])))


def canonical_score(alpha, beta, tau, S_hat, D):
    """alpha + beta*S_hat - tau*D (broadcasts)."""
    return alpha + beta * np.asarray(S_hat, dtype=float) - tau * np.asarray(D, dtype=float)


def check_nondegeneracy_batch(S, D, C_cond=1e6):
    """Vectorised audit over rows of (C, K) feature arrays; returns (ok, rank, kappa)."""
    F = np.stack([np.ones_like(S), S, D], axis=1)
    sv = np.linalg.svd(F, compute_uv=False)
    kept = sv > RANK_RTOL * sv[:, :1]
    rank = kept.sum(axis=1)
    smallest = np.where(kept, sv, np.inf).min(axis=1)
    kappa = sv[:, 0] / smallest
    return (rank == 3) & (kappa <= C_cond), rank, kappa


def solve_maxent_batch(S, D, c_S, c_D, tol=1e-8, max_iter=100):
    """Independent dual solves for each row of (C, K) arrays.

    Same safeguarded Newton iteration as `solve_maxent`, vectorised over
    contexts.  Returns (beta, tau, log_partition, converged).  Rows whose
    moments fall outside the candidates' ranges are skipped up front; rows
    that do not converge are reported rather than raised.
    """
    S = np.asarray(S, dtype=float)
    D = np.asarray(D, dtype=float)
    C = len(S)
    target = np.column_stack([np.broadcast_to(c_S, C), -np.broadcast_to(np.asarray(c_D, dtype=float), C)])
    theta = np.zeros((C, 2))

    def parts(th, rows):
        Sr, Dr = S[rows], D[rows]
        logits = th[:, :1] * Sr - th[:, 1:] * Dr
        lmax = logits.max(1, keepdims=True)
        e = np.exp(logits - lmax)
        Z = e.sum(1)
        lse = lmax[:, 0] + np.log(Z)
        p = e / Z[:, None]
        mS, mD = (p * Sr).sum(1), -(p * Dr).sum(1)
        grad = np.column_stack([mS, mD]) - target[rows]
        g = lse - (th * target[rows]).sum(1)
        cS, cD = Sr - mS[:, None], -Dr - mD[:, None]
        pcS = p * cS
        H = np.column_stack([(pcS * cS).sum(1), (pcS * cD).sum(1), (p * cD * cD).sum(1)])
        return g, grad, H, lse

    in_range = (
        (target[:, 0] >= S.min(1) - FEASIBILITY_SLACK)
        & (target[:, 0] <= S.max(1) + FEASIBILITY_SLACK)
        & (-target[:, 1] >= D.min(1) - FEASIBILITY_SLACK)
        & (-target[:, 1] <= D.max(1) + FEASIBILITY_SLACK)
    )
    done = np.zeros(C, dtype=bool)
    lse_all = np.zeros(C)
    rows = np.flatnonzero(in_range)
    g, grad, H, lse = parts(theta[rows], rows)
    lse_all[rows] = lse
    for _ in range(max_iter + 1):
        conv = np.max(np.abs(grad), axis=1) <= tol
        done[rows[conv]] = True
        keep = ~conv
        if _ == max_iter or not keep.any():
            break
        rows, g, grad, H = rows[keep], g[keep], grad[keep], H[keep]
        a, b, c = H[:, 0], H[:, 1], H[:, 2]
        det = a * c - b * b
        tr = a + c
        disc = np.sqrt(np.maximum(tr * tr / 4 - det, 0.0))
        lmax, lmin = tr / 2 + disc, tr / 2 - disc
        use_newton = (lmin > 0) & (lmax <= HESSIAN_COND_MAX * lmin)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = -np.column_stack([c * grad[:, 0] - b * grad[:, 1], a * grad[:, 1] - b * grad[:, 0]]) / det[:, None]
            step = np.where(use_newton[:, None], newton, -grad)
            slope = (grad * step).sum(1)
        bad = ~np.isfinite(slope) | (slope >= 0)
        step[bad] = -grad[bad]
        slope[bad] = -(grad[bad] ** 2).sum(1)
        th0 = theta[rows]
        s = np.ones(len(rows))
        pending = np.ones(len(rows), dtype=bool)
        for _bt in range(60):
            idx = np.flatnonzero(pending)
            cand = th0[idx] + s[idx, None] * step[idx]
            g_c, grad_c = parts(cand, rows[idx])[:2]
            ok = g_c <= g[idx] + 1e-4 * s[idx] * slope[idx]
            if _bt == 0:
                ok |= np.max(np.abs(grad_c), axis=1) <= 0.5 * np.max(np.abs(grad[idx]), axis=1)
            theta[rows[idx[ok]]] = cand[ok]
            pending[idx[ok]] = False
            if not pending.any():
                break
            s[pending] *= 0.5
        moved = ~pending
        rows = rows[moved]
        if not len(rows):
            break
        g, grad, H, lse = parts(theta[rows], rows)
        lse_all[rows] = lse
    return theta[:, 0], theta[:, 1], lse_all, done
