"""Complementary log-log link, Poisson-thinning simulation with bin
coarsening, the sampled-negative likelihood and its gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr

from .errors import DomainError

F_MAX = 20.0
LINKS = ("cloglog", "logistic", "probit")


def clamp_scores(f):
    return np.clip(np.asarray(f, dtype=float), -F_MAX, F_MAX)


def _check_delta(delta):
    delta = np.asarray(delta, dtype=float)
    if np.any(~(delta > 0)) or np.any(~np.isfinite(delta)):
        raise DomainError("bin widths must be positive and finite")
    return delta


def cloglog_prob(f, delta):
    """P(at least one event in a bin of width delta) = 1 - exp(-delta * e^f)."""
    delta = _check_delta(delta)
    return -np.expm1(-delta * np.exp(np.asarray(f, dtype=float)))


def cloglog_inverse(p, delta):
    """Score f with cloglog_prob(f, delta) = p."""
    p = np.asarray(p, dtype=float)
    delta = _check_delta(delta)
    if np.any(~((p > 0) & (p < 1))):
        raise DomainError("probability must lie strictly inside (0, 1)")
    return np.log(-np.log1p(-p)) - np.log(delta)


def survival(f, delta):
    return np.exp(-np.asarray(delta, dtype=float) * np.exp(np.asarray(f, dtype=float)))


def link_survival(link, f, delta):
    """Probability of no event in a bin of width delta under the given link (width enters as log offset)."""
    z = np.asarray(f, dtype=float) + np.log(delta)
    if link == "cloglog":
        return np.exp(-np.exp(z))
    if link == "logistic":
        return expit(-z)
    if link == "probit":
        return np.exp(log_ndtr(-z))
    raise DomainError(f"unknown link {link!r}")


def verify_partition_invariance(f, delta, k_parts, seed=None, link="cloglog", parts=None) -> float:
    """|S(delta) - prod_j S(delta_j)| for a random split of delta into k_parts positive widths."""
    if k_parts < 1:
        raise DomainError("k_parts must be >= 1")
    if parts is None:
        if k_parts == 1:
            parts = np.array([float(delta)])
        else:
            rng = np.random.default_rng(seed)
            parts = rng.dirichlet(np.ones(k_parts)) * delta
    parts = np.asarray(parts, dtype=float)
    if link == "cloglog":
        whole = survival(f, delta)
        split = np.exp(np.sum(-parts * np.exp(f)))
    else:
        whole = link_survival(link, f, delta)
        split = np.prod(link_survival(link, f, parts))
    return float(abs(whole - split))


def simulate_bin_events(f_schedule, widths, seed=None, rate_bound=None):
    """Bin indicators Y_u ~ Bernoulli(1 - exp(-delta_u e^{f_u})) from a thinned Poisson process.

    A homogeneous process of rate `rate_bound` (default: max intensity) is
    drawn on each bin and each point is kept with probability e^{f_u}/rate.
    `f_schedule` may carry a leading batch axis; the last axis indexes bins.
    """
    f = np.asarray(f_schedule, dtype=float)
    widths = _check_delta(widths)
    if f.shape[-1] != widths.shape[-1]:
        raise DomainError("score schedule and bin widths differ in length")
    rng = np.random.default_rng(seed)
    lam = np.exp(f)
    Lam = float(lam.max()) if rate_bound is None else float(rate_bound)
    if Lam <= 0:
        return np.zeros(f.shape, dtype=bool)
    if np.any(lam > Lam * (1 + 1e-12)):
        raise DomainError("rate_bound below the maximal intensity")
    n_proposed = rng.poisson(Lam * np.broadcast_to(widths, f.shape))
    kept = rng.binomial(n_proposed, np.minimum(lam / Lam, 1.0))
    return kept > 0


def merge_bins(Y, group):
    """OR-merge consecutive groups of `group` bins along the last axis."""
    Y = np.asarray(Y, dtype=bool)
    if Y.shape[-1] % group:
        raise DomainError("number of bins not divisible by group size")
    return Y.reshape(*Y.shape[:-1], Y.shape[-1] // group, group).any(axis=-1)


@dataclass
class NegativeSampler:
    """Uniform proposal over the tails that are not positives of a context."""

    n_entities: int
    k_neg: int = 16

    def support(self, positives) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_entities), np.asarray(positives, dtype=np.int64))

    def prob(self, positives) -> float:
        m = self.n_entities - len(np.unique(positives))
        if m <= 0:
            raise DomainError("no tails left to sample negatives from")
        return 1.0 / m

    def draw(self, positives, rng, n=None):
        """Return (tails, q) for n draws (default k_neg) with replacement."""
        pool = self.support(positives)
        if len(pool) == 0:
            raise DomainError("no tails left to sample negatives from")
        n = self.k_neg if n is None else n
        tails = rng.choice(pool, size=n, replace=True)
        return tails, np.full(n, 1.0 / len(pool))


def _neg_log_cloglog(x):
    """-log(1 - exp(-x)) for x > 0, stable at both ends."""
    return -np.log(-np.expm1(-x))


def nll(pos_scores, pos_widths, neg_scores=(), neg_widths=(), neg_q=(), k_neg=1) -> float:
    """Sampled-negative likelihood: positives contribute -log p, negatives
    their importance-weighted intensity mass delta*e^f/(k_neg*q)."""
    pos_scores, pos_widths, neg_scores, neg_widths, neg_q = _prep(pos_scores, pos_widths, neg_scores, neg_widths, neg_q)
    pos = _neg_log_cloglog(pos_widths * np.exp(pos_scores)).sum()
    neg = (neg_widths * np.exp(neg_scores) / (k_neg * neg_q)).sum()
    return float(pos + neg)


def nll_gradient(pos_scores, pos_widths, neg_scores=(), neg_widths=(), neg_q=(), k_neg=1):
    """Derivatives of `nll` with respect to each positive and each negative score.

    Scores outside [-F_MAX, F_MAX] get zero gradient (the clamp is flat there).
    """
    raw_pos = np.asarray(pos_scores, dtype=float)
    raw_neg = np.asarray(neg_scores, dtype=float)
    pos_scores, pos_widths, neg_scores, neg_widths, neg_q = _prep(pos_scores, pos_widths, neg_scores, neg_widths, neg_q)
    x = pos_widths * np.exp(pos_scores)
    with np.errstate(over="ignore"):
        g_pos = -x / np.expm1(x)
    g_neg = neg_widths * np.exp(neg_scores) / (k_neg * neg_q)
    g_pos = np.where(np.abs(raw_pos) > F_MAX, 0.0, g_pos)
    g_neg = np.where(np.abs(raw_neg) > F_MAX, 0.0, g_neg)
    return g_pos, g_neg


def _prep(pos_scores, pos_widths, neg_scores, neg_widths, neg_q):
    pos_scores = clamp_scores(pos_scores)
    neg_scores = clamp_scores(neg_scores)
    pos_widths = np.broadcast_to(np.asarray(pos_widths, dtype=float), pos_scores.shape)
    neg_widths = np.broadcast_to(np.asarray(neg_widths, dtype=float), neg_scores.shape)
    neg_q = np.broadcast_to(np.asarray(neg_q, dtype=float), neg_scores.shape)
    if pos_widths.size:
        _check_delta(pos_widths)
    if neg_widths.size:
        _check_delta(neg_widths)
    if neg_q.size and np.any(~(neg_q > 0)):
        raise DomainError("sampled negative with zero proposal probability")
    return pos_scores, pos_widths, neg_scores, neg_widths, neg_q


def exhaustive_nll(pos_scores, pos_widths, all_neg_scores, all_neg_widths) -> float:
    """Likelihood with the negative mass summed over every non-positive tail."""
    pos = _neg_log_cloglog(np.asarray(pos_widths) * np.exp(clamp_scores(pos_scores))).sum()
    neg = (np.asarray(all_neg_widths) * np.exp(clamp_scores(all_neg_scores))).sum()
    return float(pos + neg)
