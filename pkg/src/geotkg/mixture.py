"""Composite energy over metric components, distortion energies against graph
distances, and temperature-controlled softmax mixture weights."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DomainError
from .geometry import distance
from .graphstore import TemporalKG, distance_matrix, pair_distribution

DISTORTION_SAMPLES = 1024


def composite_energy(weights, sq_dists):
    """sum_m w_m * d_m^2; the metric axis is the last one of `sq_dists`."""
    w = np.asarray(weights, dtype=float)
    d2 = np.asarray(sq_dists, dtype=float)
    if w.ndim != 1 or d2.shape[-1] != len(w):
        raise DomainError("weights and squared distances disagree on the number of metrics")
    return d2 @ w


def softmax_weights(energies, lam):
    """Weights proportional to exp(-E/lam), computed with max subtraction."""
    if not lam > 0:
        raise DomainError("temperature must be positive")
    return softmax(-np.asarray(energies, dtype=float) / lam, axis=-1)


def log_sum_exp_energy(energies, lam):
    """Soft minimum -lam * log(mean_m exp(-E_m/lam)).

    Lies in [min E, min E + lam*log M], equals E for a single component, is
    strictly increasing in every E_m and non-decreasing in lam.
    """
    if not lam > 0:
        raise DomainError("temperature must be positive")
    E = np.asarray(energies, dtype=float)
    M = E.shape[-1]
    return -lam * (logsumexp(-E / lam, axis=-1) - np.log(M))


def temperature(t, T, lambda0=1.0, lambda_min=1e-3):
    """Linear annealing lambda0*(1 - t/T), floored at lambda_min."""
    if not 0 <= t < T:
        raise DomainError(f"epoch {t} outside [0, {T})")
    return max(lambda0 * (1.0 - t / T), lambda_min)


def graph_distances_for_pairs(kg: TemporalKG, u, heads, tails) -> np.ndarray:
    """Hop counts with unreachable pairs mapped to n - 1."""
    G = distance_matrix(kg, u)[heads, tails]
    return np.where(np.isfinite(G), G, kg.n_entities - 1)


def distortion_energy(kg: TemporalKG, r, u, embeddings, transports, tags, n_samples=None, seed=0):
    """Per metric, E_{(h,t)~pi_r(u)}[(d_m(phi(x_h), x_t) - d_graph(h,t))^2].

    `embeddings[m]` is an (n, dim) array for metric m and `transports[m]`
    the relation's transport there.  The expectation is exact unless
    `n_samples` is given, in which case pairs are drawn from pi_r(u).
    """
    dist = pair_distribution(kg, r, u)
    pairs = np.array(list(dist.keys()), dtype=np.int64)
    probs = np.fromiter(dist.values(), dtype=float)
    if n_samples is not None:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(pairs), size=n_samples, p=probs)
        pairs = pairs[idx]
        probs = np.full(n_samples, 1.0 / n_samples)
    h, t = pairs[:, 0], pairs[:, 1]
    g = graph_distances_for_pairs(kg, u, h, t)
    out = np.empty(len(tags))
    for m, tag in enumerate(tags):
        X = embeddings[m]
        d = distance(tag, transports[m](X[h]), X[t])
        out[m] = probs @ (d - g) ** 2
    return out
