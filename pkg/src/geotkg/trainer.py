"""Decoupled training loop.

Each outer iteration (1) holds the mixture weights fixed, (2) refreshes the
score coefficients from per-context maximum-entropy solves, (3) takes
projected gradient steps on the embeddings, (4) recomputes distortion
energies and (5) moves the weights toward softmax(-E/lambda).

The tracked objective is

    J(w, Theta) = NLL + l_gate*gate + l_rad*rad + l_corr*corr
                  + sum_r [ <w_r, E_r> + lambda * KL(w_r || uniform) ].

For fixed Theta the bracket is minimised exactly by w_r = softmax(-E_r/lambda),
where it equals the soft minimum -lambda*log(mean_m exp(-E_rm/lambda)).
Every phase only accepts moves that do not increase J (unless the safeguard
is disabled), and J can only drop when lambda is annealed, so the recorded
sequence is non-increasing.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from .config import DomainBounds, FeatureConfig, TrainConfig
from .errors import DomainError, EmptySupport, IrreparableDegeneracy, TrainingAborted
from .geometry import (
    EUCLIDEAN,
    HYPERBOLIC,
    SPHERICAL,
    ManifoldKind,
    Transport,
    distance,
    distance_grad,
    project,
    random_isometry,
    sample_points,
    sq_distance_grad,
)
from .graphstore import TemporalKG, candidate_set, feature_matrix, pair_distribution
from .maxent import check_nondegeneracy_batch, repair_degeneracy, solve_maxent_batch
from .mixture import graph_distances_for_pairs, log_sum_exp_energy, softmax_weights, temperature
from .temporal import NegativeSampler, nll, nll_gradient

log = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-6
DAMPING = tuple(0.5**k for k in range(11)) + (0.0,)
MONOTONE_TOL = 1e-6
PER_METRIC_COLUMNS = ("boundary",)
STAT_COLUMNS = ("n_solved", "n_infeasible", "n_repaired", "n_irreparable", "n_negative_tau")


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """Embeddings, transports, score coefficients and mixture logits.

    `X[m]` has shape (B, n, k_m): B = 1 for time-static embeddings, otherwise
    one copy per training bin listed in `bins`.  `alpha` maps (relation, bin)
    to the bin offset; unseen bins fall back to the relation mean.
    """

    tags: tuple
    X: list
    transports: list  # transports[r][m]
    beta: np.ndarray
    tau: np.ndarray
    alpha: dict
    logits: np.ndarray
    bins: tuple = (0,)

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    @property
    def n_entities(self) -> int:
        return self.X[0].shape[1]

    @property
    def n_relations(self) -> int:
        return len(self.transports)

    def bin_index(self, u) -> int:
        if len(self.bins) == 1:
            return 0
        pos = int(np.searchsorted(self.bins, u, side="right")) - 1
        return min(max(pos, 0), len(self.bins) - 1)

    def emb_at(self, m, u=None) -> np.ndarray:
        """Embedding table of metric m at bin u (latest copy when u is None)."""
        b = len(self.bins) - 1 if u is None else self.bin_index(u)
        return self.X[m][b]

    def alpha_at(self, r, u) -> float:
        if (r, u) in self.alpha:
            return self.alpha[(r, u)]
        vals = [a for (rr, _), a in self.alpha.items() if rr == r]
        return float(np.mean(vals)) if vals else 0.0

    def copy(self) -> "ModelParams":
        return replace(
            self,
            X=[x.copy() for x in self.X],
            transports=[list(row) for row in self.transports],
            beta=self.beta.copy(),
            tau=self.tau.copy(),
            alpha=dict(self.alpha),
            logits=self.logits.copy(),
        )

    def set_weights(self, w):
        self.logits = np.log(np.maximum(np.asarray(w, dtype=float), 1e-300))


def init_params(kg: TemporalKG, cfg: TrainConfig, bounds: DomainBounds, bins=(0,)) -> ModelParams:
    rng = np.random.default_rng([cfg.seed, 1])
    n, R = kg.n_entities, kg.n_relations
    X, transports = [], [[None] * len(cfg.metrics) for _ in range(R)]
    B = len(bins) if cfg.per_bin else 1
    for m, (tag, dim) in enumerate(zip(cfg.metrics, cfg.dims)):
        kind = ManifoldKind(tag, dim)
        if tag == SPHERICAL:
            base = sample_points(tag, n, dim, rng)
        else:
            bound = bounds.R_E if tag == EUCLIDEAN else bounds.R_H
            base = sample_points(EUCLIDEAN, n, dim, rng, radius=cfg.init_scale * bound)
        X.append(np.repeat(base[None], B, axis=0))
        for r in range(R):
            seed = [cfg.seed, 2, r, m]
            t = random_isometry(kind, seed=seed, bounds=bounds, scale=cfg.transport_scale)
            if not cfg.learn_translations and tag != SPHERICAL:
                t = Transport(kind, t.rotation)
            transports[r][m] = t
    M = len(cfg.metrics)
    return ModelParams(
        tags=tuple(cfg.metrics),
        X=X,
        transports=transports,
        beta=np.zeros(R),
        tau=np.zeros(R),
        alpha={},
        logits=np.zeros((R, M)),
        bins=tuple(bins) if cfg.per_bin else (bins[-1] if len(bins) else 0,),
    )


# ---------------------------------------------------------------------------
# training data


@dataclass
class TrainingData:
    """Flattened contexts, positives, fixed negatives, candidates and distortion pairs."""

    n_entities: int
    n_relations: int
    # contexts (h, r, u) with at least one positive
    ch: np.ndarray
    cr: np.ndarray
    cu: np.ndarray
    cwidth: np.ndarray
    cru: np.ndarray  # index into ru_keys
    ru_keys: list
    # positives
    pc: np.ndarray
    pt: np.ndarray
    pS: np.ndarray
    # sampled negatives
    nc: np.ndarray
    nt: np.ndarray
    nS: np.ndarray
    nq: np.ndarray
    k_neg: int
    # candidates for the MaxEnt solves
    cand: np.ndarray
    candS: np.ndarray
    # distortion pairs per relation at the last training bin: (h, t, prob, graph distance)
    dist_pairs: list
    last_bin: int
    bins: tuple

    @property
    def n_contexts(self) -> int:
        return len(self.ch)

    @classmethod
    def empty(cls, kg):
        z = np.zeros(0, dtype=np.int64)
        f = np.zeros(0)
        return cls(kg.n_entities, kg.n_relations, z, z, z, f, z, [], z, z, f, z, z, f, f, 1, z.reshape(0, 0), f.reshape(0, 0), [None] * kg.n_relations, 0, (0,))


def prepare_data(kg: TemporalKG, cfg: TrainConfig, feat_cfg: FeatureConfig | None = None) -> TrainingData:
    feat_cfg = feat_cfg or FeatureConfig()
    if len(kg) == 0:
        return TrainingData.empty(kg)
    n = kg.n_entities
    q = kg.quadruples
    keys = np.unique(q[:, [0, 1, 3]], axis=0)  # (h, r, u)
    order = np.lexsort((keys[:, 0], keys[:, 1], keys[:, 2]))
    keys = keys[order]
    ch, cr, cu = keys[:, 0], keys[:, 1], keys[:, 2]
    ru_keys = sorted({(int(r), int(u)) for r, u in zip(cr, cu)}, key=lambda x: (x[1], x[0]))
    ru_index = {k: i for i, k in enumerate(ru_keys)}
    cru = np.array([ru_index[(int(r), int(u))] for r, u in zip(cr, cu)], dtype=np.int64)
    cwidth = np.array([kg.width(u) for u in cu])

    K = n if cfg.n_candidates is None else cfg.n_candidates
    sampler = NegativeSampler(n, cfg.k_neg)
    rng = np.random.default_rng([cfg.seed, 3])
    pc, pt, pS, nc, nt, nS, nq, cand, candS = [], [], [], [], [], [], [], [], []
    for c, (h, r, u) in enumerate(keys):
        S = feature_matrix(kg, u, feat_cfg)[h]
        pos = kg.positives(h, r, u)
        pc.append(np.full(len(pos), c))
        pt.append(pos)
        pS.append(S[pos])
        tails, qs = sampler.draw(pos, rng)
        nc.append(np.full(len(tails), c))
        nt.append(tails)
        nS.append(S[tails])
        nq.append(qs)
        cs = candidate_set(kg, h, r, u, K, seed=cfg.seed)
        cand.append(cs)
        candS.append(S[cs])

    bins = tuple(int(u) for u in kg.widths)
    last = bins[-1]
    dist_pairs = []
    for r in range(kg.n_relations):
        try:
            dist = pair_distribution(kg, r, last)
        except EmptySupport:
            dist_pairs.append(None)
            continue
        pairs = np.array(list(dist.keys()), dtype=np.int64)
        probs = np.fromiter(dist.values(), dtype=float)
        g = graph_distances_for_pairs(kg, last, pairs[:, 0], pairs[:, 1])
        dist_pairs.append((pairs[:, 0], pairs[:, 1], probs, g))

    cat = lambda xs, dt=None: np.concatenate(xs).astype(dt) if dt else np.concatenate(xs)  # noqa: E731
    return TrainingData(
        n,
        kg.n_relations,
        ch,
        cr,
        cu,
        cwidth,
        cru,
        ru_keys,
        cat(pc, np.int64),
        cat(pt, np.int64),
        cat(pS, float),
        cat(nc, np.int64),
        cat(nt, np.int64),
        cat(nS, float),
        cat(nq, float),
        cfg.k_neg,
        np.vstack(cand),
        np.vstack(candS),
        dist_pairs,
        last,
        bins,
    )


# ---------------------------------------------------------------------------
# distances and their backward pass


def _bin_rows(params: ModelParams, u_arr):
    if len(params.bins) == 1:
        return np.zeros(len(u_arr), dtype=np.int64)
    pos = np.searchsorted(params.bins, u_arr, side="right") - 1
    return np.clip(pos, 0, len(params.bins) - 1)


class PairBatch:
    """Squared (or plain) distances of transported heads to tails for a set of triples."""

    def __init__(self, params: ModelParams, h, r, t, u, squared=True):
        self.params, self.h, self.r, self.t = params, h, r, t
        self.b = _bin_rows(params, u)
        self.squared = squared
        self.groups = [(rr, np.flatnonzero(r == rr)) for rr in np.unique(r)]
        M = len(params.tags)
        self.val = np.zeros((len(h), M))
        self.Y = []
        for m, tag in enumerate(params.tags):
            Xh = params.X[m][self.b, h]
            Xt = params.X[m][self.b, t]
            Y = np.empty_like(Xh)
            for rr, idx in self.groups:
                Y[idx] = params.transports[rr][m](Xh[idx])
            d = distance(tag, Y, Xt)
            self.val[:, m] = d**2 if squared else d
            self.Y.append(Y)

    def backward(self, G, gX, gT=None):
        """Accumulate dJ/dX given G = dJ/d(values), shape (P, M)."""
        p = self.params
        for m, tag in enumerate(p.tags):
            g = G[:, m]
            if not np.any(g):
                continue
            Xh = p.X[m][self.b, self.h]
            Xt = p.X[m][self.b, self.t]
            Y = self.Y[m]
            Z = np.empty_like(Xt)
            for rr, idx in self.groups:
                Z[idx] = p.transports[rr][m].inverse()(Xt[idx])
            if self.squared:
                g_t = sq_distance_grad(tag, Xt, Y)
                g_h = sq_distance_grad(tag, Xh, Z)
            else:
                g_t = distance_grad(tag, Xt, Y)[1]
                g_h = distance_grad(tag, Xh, Z)[1]
            np.add.at(gX[m], (self.b, self.t), g[:, None] * g_t)
            np.add.at(gX[m], (self.b, self.h), g[:, None] * g_h)
            if gT is not None and tag != SPHERICAL:
                g_y = sq_distance_grad(tag, Y, Xt) if self.squared else distance_grad(tag, Y, Xt)[1]
                g_y = g[:, None] * g_y
                for rr, idx in self.groups:
                    tr = p.transports[rr][m]
                    v = g_y[idx] @ tr.rotation  # R^T applied row-wise
                    k = v.shape[-1]
                    if tag == EUCLIDEAN:
                        gT[rr, m, :k] += v.sum(0)
                    else:
                        gT[rr, m, :k] += _mobius_vjp_a(tr.translation, Xh[idx], v).sum(0)


def _mobius_vjp_a(a, x, v):
    """Rows of J_a(a (+) x)^T v for fixed a and batches of x, v."""
    ax = x @ a
    a2 = a @ a
    x2 = np.einsum("ij,ij->i", x, x)
    c = 1.0 + 2.0 * ax + x2
    den = 1.0 + 2.0 * ax + a2 * x2
    num = c[:, None] * a + (1.0 - a2) * x
    xv = np.einsum("ij,ij->i", x, v)
    av = v @ a
    dnum_T_v = c[:, None] * v + 2.0 * x * av[:, None] - 2.0 * a * xv[:, None]
    dden = 2.0 * x + 2.0 * x2[:, None] * a
    nv = np.einsum("ij,ij->i", num, v)
    return dnum_T_v / den[:, None] - dden * (nv / den**2)[:, None]


# ---------------------------------------------------------------------------
# objective


def regularizers(params: ModelParams, data: TrainingData, cfg: TrainConfig, pos_D=None):
    """(gate, rad, corr) penalty values."""
    w = params.weights
    gate = float(np.sqrt(w**2 + cfg.eps_gate).sum())
    rad = 0.0
    for m, tag in enumerate(params.tags):
        sq = np.einsum("...i,...i->...", params.X[m], params.X[m])
        rad += float((1.0 / (1.0 - sq)).sum() if tag == HYPERBOLIC else sq.sum())
    if pos_D is None and len(data.pc):
        pr = data.cr[data.pc]
        batch = PairBatch(params, data.ch[data.pc], pr, data.pt, data.cu[data.pc])
        pos_D = (batch.val * w[pr]).sum(1)
    corr = sum(_corr(data.pS[idx], pos_D[idx])[0] for idx in _relation_groups(data)) if len(data.pc) else 0.0
    return gate, rad, float(corr)


def _relation_groups(data):
    pr = data.cr[data.pc]
    return [np.flatnonzero(pr == r) for r in range(data.n_relations) if np.any(pr == r)]


def _corr(S, D):
    """Pearson correlation and its gradient with respect to D (zeros when undefined)."""
    N = len(S)
    if N < 2:
        return 0.0, np.zeros(N)
    s, d = S - S.mean(), D - D.mean()
    ss, dd = math.sqrt(s @ s), math.sqrt(d @ d)
    if ss <= 1e-12 * max(1.0, abs(S).max()) or dd <= 1e-12 * max(1.0, abs(D).max()):
        return 0.0, np.zeros(N)
    rho = (s @ d) / (ss * dd)
    grad = s / (ss * dd) - rho * d / dd**2
    return float(rho), grad


def _kl_uniform(w):
    M = w.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(w > 0, w * np.log(M * w), 0.0)
    return t.sum(-1)


@dataclass
class Objective:
    J: float
    nll: float
    gate: float
    rad: float
    corr: float
    distortion: float  # sum_r <w_r, E_r> + lambda*KL(w_r || U)
    softmin: float  # sum_r soft minimum of E_r (the bracket's minimum over w)
    E: np.ndarray
    gX: list | None = None
    gT: np.ndarray | None = None


def objective(params: ModelParams, data: TrainingData, cfg: TrainConfig, lam: float, grad=False, grad_translations=False) -> Objective:
    M, R = len(params.tags), data.n_relations
    w = params.weights
    gX = [np.zeros_like(x) for x in params.X] if grad else None
    gT = np.zeros((R, M, max(x.shape[-1] for x in params.X))) if grad and grad_translations else None

    # likelihood
    norm = 1.0 / max(data.n_contexts, 1) if cfg.normalize_nll else 1.0
    L = 0.0
    pos_D = np.zeros(0)
    if data.n_contexts:
        alpha = np.array([params.alpha.get(k, 0.0) for k in data.ru_keys])
        pr, nr = data.cr[data.pc], data.cr[data.nc]
        pb = PairBatch(params, data.ch[data.pc], pr, data.pt, data.cu[data.pc])
        nb = PairBatch(params, data.ch[data.nc], nr, data.nt, data.cu[data.nc])
        pos_D = (pb.val * w[pr]).sum(1)
        neg_D = (nb.val * w[nr]).sum(1)
        f_pos = alpha[data.cru[data.pc]] + params.beta[pr] * data.pS - params.tau[pr] * pos_D
        f_neg = alpha[data.cru[data.nc]] + params.beta[nr] * data.nS - params.tau[nr] * neg_D
        args = (f_pos, data.cwidth[data.pc], f_neg, data.cwidth[data.nc], data.nq, data.k_neg)
        L = norm * nll(*args)
        if grad:
            g_pos, g_neg = nll_gradient(*args)
            dD_pos = -norm * g_pos * params.tau[pr]
            dD_neg = -norm * g_neg * params.tau[nr]
    gate, rad, _ = regularizers(params, data, cfg, pos_D=pos_D)
    corr = 0.0
    if data.n_contexts:
        for idx in _relation_groups(data):
            rho, g_rho = _corr(data.pS[idx], pos_D[idx])
            corr += rho
            if grad:
                dD_pos[idx] += cfg.lambda_corr * g_rho
    if grad and data.n_contexts:
        pb.backward(dD_pos[:, None] * w[pr], gX, gT)
        nb.backward(dD_neg[:, None] * w[nr], gX, gT)

    # distortion
    E = np.full((R, M), np.nan)
    dist_term = soft = 0.0
    for r, entry in enumerate(data.dist_pairs):
        if entry is None:
            continue
        h, t, p, g = entry
        u = np.full(len(h), data.last_bin)
        batch = PairBatch(params, h, np.full(len(h), r), t, u, squared=False)
        resid = batch.val - g[:, None]
        E[r] = p @ resid**2
        dist_term += float(w[r] @ E[r] + lam * _kl_uniform(w[r]))
        soft += float(log_sum_exp_energy(E[r], lam))
        if grad:
            batch.backward(2.0 * (p[:, None] * resid) * w[r], gX, gT)

    if grad:
        for m, tag in enumerate(params.tags):
            x = params.X[m]
            if tag == EUCLIDEAN:
                gX[m] += cfg.lambda_rad * 2.0 * x
            elif tag == HYPERBOLIC:
                sq = np.einsum("...i,...i->...", x, x)[..., None]
                gX[m] += cfg.lambda_rad * 2.0 * x / (1.0 - sq) ** 2
    J = L + cfg.lambda_gate * gate + cfg.lambda_rad * rad + cfg.lambda_corr * corr + dist_term
    return Objective(float(J), float(L), gate, rad, float(corr), dist_term, soft, E, gX, gT)


def surrogate_J(params, data, cfg, lam) -> float:
    return objective(params, data, cfg, lam).J


# ---------------------------------------------------------------------------
# phases


def _retract(params: ModelParams, bounds: DomainBounds):
    for m, tag in enumerate(params.tags):
        params.X[m] = project(tag, params.X[m], bounds)[0]


def _apply_step(params, obj, lr, bounds, cfg):
    new = params.copy()
    for m, tag in enumerate(new.tags):
        g = obj.gX[m]
        if tag == HYPERBOLIC:
            # Riemannian gradient of the Poincare metric
            sq = np.einsum("...i,...i->...", new.X[m], new.X[m])[..., None]
            g = g * ((1.0 - sq) ** 2 / 4.0)
        new.X[m] = new.X[m] - lr * g
    _retract(new, bounds)
    if obj.gT is not None:
        for r in range(new.n_relations):
            for m, tag in enumerate(new.tags):
                if tag == SPHERICAL:
                    continue
                tr = new.transports[r][m]
                k = len(tr.translation)
                v = tr.translation - lr * obj.gT[r, m, :k]
                radius = bounds.R_H * (1 - 1e-7) if tag == HYPERBOLIC else min(bounds.R_E, bounds.B_phi - 1.0)
                nv = np.linalg.norm(v)
                if nv > radius:
                    v = v * (radius / nv)
                new.transports[r][m] = Transport(tr.kind, tr.rotation, v)
    return new


def embedding_step(params: ModelParams, data: TrainingData, cfg: TrainConfig, lam: float, lr: float, bounds: DomainBounds, current=None):
    """One projected gradient step on the embeddings (and translations if learned).

    With the safeguard on the step is halved until J does not increase (up to
    30 times; otherwise the parameters are kept).  Returns (params, objective, lr_used).
    """
    obj = current or objective(params, data, cfg, lam, grad=True, grad_translations=cfg.learn_translations)
    if obj.gX is None:
        obj = objective(params, data, cfg, lam, grad=True, grad_translations=cfg.learn_translations)
    for g in obj.gX:
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite embedding gradient (J={obj.J})")
    if lr == 0:
        return params, obj, 0.0
    step = lr
    for _ in range(31 if cfg.safeguard else 1):
        new = _apply_step(params, obj, step, bounds, cfg)
        new_obj = objective(new, data, cfg, lam)
        if not cfg.safeguard or new_obj.J <= obj.J:
            return new, new_obj, step
        step *= 0.5
    return params, obj, 0.0


@dataclass
class CoefficientStats:
    n_solved: int = 0
    n_infeasible: int = 0
    n_repaired: int = 0
    n_irreparable: int = 0
    n_negative_tau: int = 0


def maxent_coefficients(params: ModelParams, data: TrainingData, cfg: TrainConfig):
    """Per-context dual solves; returns (alpha, beta, tau, stats).

    beta_r and tau_r average the per-context solutions of relation r; alpha
    for (r, u) averages the log-normalisers of that bin's contexts under the
    averaged (beta_r, tau_r).
    """
    stats = CoefficientStats()
    C = data.n_contexts
    w = params.weights
    K = data.cand.shape[1]
    hh = np.repeat(data.ch, K)
    rr = np.repeat(data.cr, K)
    uu = np.repeat(data.cu, K)
    cb = PairBatch(params, hh, rr, data.cand.ravel(), uu)
    Dc = (cb.val * w[rr]).sum(1).reshape(C, K)
    S = data.candS.copy()

    pr = data.cr[data.pc]
    pb = PairBatch(params, data.ch[data.pc], pr, data.pt, data.cu[data.pc])
    pos_D = (pb.val * w[pr]).sum(1)
    pos_ru = data.cru[data.pc]
    nru = len(data.ru_keys)
    cnt = np.bincount(pos_ru, minlength=nru)
    c_D = np.bincount(pos_ru, pos_D, minlength=nru) / cnt
    c_S = np.bincount(pos_ru, data.pS, minlength=nru) / cnt

    ok, _, _ = check_nondegeneracy_batch(S, Dc, cfg.c_cond)
    usable = ok.copy()
    for c in np.flatnonzero(~ok):
        h, r, u = int(data.ch[c]), int(data.cr[c]), int(data.cu[c])

        def feature_fn(tails, c=c, h=h, r=r, u=u):
            raise DomainError("candidate expansion is unavailable for fixed candidate sets")

        try:
            S_c, D_c, _, _ = repair_degeneracy(S[c], Dc[c], data.cand[c], data.n_entities, feature_fn, cfg.c_cond, k_min=min(cfg.k_min, K), seed=[cfg.seed, c])
            S[c], Dc[c] = S_c, D_c
            usable[c] = True
            stats.n_repaired += 1
        except (IrreparableDegeneracy, DomainError):
            stats.n_irreparable += 1

    beta_c = np.full(C, np.nan)
    tau_c = np.full(C, np.nan)
    idx = np.flatnonzero(usable)
    if len(idx):
        b, t, _, conv = solve_maxent_batch(S[idx], Dc[idx], c_S[data.cru[idx]], c_D[data.cru[idx]], cfg.maxent_tol, cfg.maxent_max_iter)
        beta_c[idx[conv]] = b[conv]
        tau_c[idx[conv]] = t[conv]
        stats.n_solved = int(conv.sum())
        stats.n_infeasible = int((~conv).sum())

    beta, tau = params.beta.copy(), params.tau.copy()
    for r in range(data.n_relations):
        sel = (data.cr == r) & np.isfinite(beta_c)
        if sel.any():
            beta[r] = beta_c[sel].mean()
            tau[r] = tau_c[sel].mean()
    stats.n_negative_tau = int((tau < 0).sum())
    logits = beta[data.cr][:, None] * data.candS - tau[data.cr][:, None] * Dc
    lmax = logits.max(1)
    logZ = lmax + np.log(np.exp(logits - lmax[:, None]).sum(1))
    a = np.bincount(data.cru, -logZ, minlength=nru) / np.bincount(data.cru, minlength=nru)
    alpha = {k: float(a[i]) for i, k in enumerate(data.ru_keys)}
    return alpha, beta, tau, stats


def _blend_coeffs(params, old, new, s):
    p = params.copy()
    (a0, b0, t0), (a1, b1, t1) = old, new
    p.alpha = {k: (1 - s) * a0.get(k, 0.0) + s * a1[k] for k in a1}
    p.beta = (1 - s) * b0 + s * b1
    p.tau = (1 - s) * t0 + s * t1
    return p


def _damped(candidate_fn, params, current, safeguard, evaluate):
    """First s in 1, 1/2, ..., 2^-10 whose candidate does not increase J; s = 0 keeps `params`."""
    for s in DAMPING if safeguard else (1.0,):
        if s == 0.0:
            return params, current, 0.0
        cand = candidate_fn(s)
        obj = evaluate(cand)
        if not safeguard or obj.J <= current.J:
            return cand, obj, s
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# trace


@dataclass
class TrainTrace:
    """Append-only record, one row per outer iteration."""

    tags: tuple
    n_relations: int
    rows: list = field(default_factory=list)
    converged: bool = False
    stopped_at_max_epochs: bool = False

    def append(self, row: dict):
        self.rows.append(dict(row))

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def flat_rows(self):
        out = []
        for row in self.rows:
            flat = {}
            for k, v in row.items():
                if isinstance(v, np.ndarray):
                    if v.ndim == 2:
                        for r in range(v.shape[0]):
                            for m in range(v.shape[1]):
                                flat[f"{k}_r{r}_{self.tags[m]}"] = v[r, m]
                    else:
                        labels = self.tags if k in PER_METRIC_COLUMNS else range(len(v))
                        for label, x in zip(labels, v):
                            flat[f"{k}_{label}"] = x
                else:
                    flat[k] = v
            out.append(flat)
        return out

    def to_json(self, path):
        def enc(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, np.generic):
                return v.item()
            return v

        data = dict(tags=list(self.tags), n_relations=self.n_relations, converged=self.converged, stopped_at_max_epochs=self.stopped_at_max_epochs)
        data["rows"] = [{k: enc(v) for k, v in row.items()} for row in self.rows]
        with open(path, "w") as fh:
            json.dump(data, fh)

    @classmethod
    def from_json(cls, path) -> "TrainTrace":
        with open(path) as fh:
            data = json.load(fh)
        rows = [{k: np.array(v, dtype=float) if isinstance(v, list) else v for k, v in row.items()} for row in data["rows"]]
        return cls(tuple(data["tags"]), data["n_relations"], rows, data["converged"], data["stopped_at_max_epochs"])

    def to_csv(self, path):
        rows = self.flat_rows()
        if not rows:
            open(path, "w").close()
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})


def _boundary_hits(params: ModelParams, bounds: DomainBounds):
    hits = np.zeros(len(params.tags))
    for m, tag in enumerate(params.tags):
        if tag == SPHERICAL:
            continue
        radius = bounds.R_E if tag == EUCLIDEAN else bounds.R_H
        norms = np.linalg.norm(params.X[m], axis=-1)
        hits[m] = np.sum(norms >= radius - BOUNDARY_TOL)
    return hits


# ---------------------------------------------------------------------------
# main loop


def train(kg: TemporalKG, cfg: TrainConfig, bounds: DomainBounds | None = None, feat_cfg: FeatureConfig | None = None, data: TrainingData | None = None, params: ModelParams | None = None):
    """Run the outer loop; returns (params, trace)."""
    bounds = bounds or DomainBounds()
    if len(kg) == 0:
        raise EmptySupport("cannot train on an empty graph")
    data = data or prepare_data(kg, cfg, feat_cfg)
    params = params or init_params(kg, cfg, bounds, bins=data.bins)
    _retract(params, bounds)
    trace = TrainTrace(tuple(cfg.metrics), kg.n_relations)
    lam = temperature(0, cfg.epochs, cfg.lambda0, cfg.lambda_min)
    cur = objective(params, data, cfg, lam)
    J_prev = cur.J
    best, J_best = params.copy(), cur.J
    trace.append(_row(-1, lam, cur, params, bounds, extra=dict(dw=0.0, dw_proposed=0.0, lr=0.0, s_coef=0.0, s_w=0.0, violation=False, **dict.fromkeys(STAT_COLUMNS, 0))))
    for k in range(cfg.epochs):
        lam = temperature(k, cfg.epochs, cfg.lambda0, cfg.lambda_min)
        cur = objective(params, data, cfg, lam)

        # step 2: refresh score coefficients
        alpha, beta, tau, stats = maxent_coefficients(params, data, cfg)
        old = (params.alpha, params.beta, params.tau)
        ev = lambda p: objective(p, data, cfg, lam)  # noqa: E731
        params, cur, s_coef = _damped(lambda s: _blend_coeffs(params, old, (alpha, beta, tau), s), params, cur, cfg.safeguard, ev)

        # step 3: embeddings
        lr_used = 0.0
        for _ in range(cfg.inner_steps):
            params, cur, lr_used = embedding_step(params, data, cfg, lam, cfg.lr, bounds)

        # steps 4-5: energies and weights
        w_old = params.weights
        E = cur.E
        w_target = w_old.copy()
        has = np.all(np.isfinite(E), axis=1)
        w_target[has] = softmax_weights(E[has], lam)

        def blend(s, base=params):
            p = base.copy()
            p.set_weights((1 - s) * w_old + s * w_target)
            return p

        params, cur, s_w = _damped(blend, params, cur, cfg.safeguard, ev)
        dw = float(np.linalg.norm(params.weights - w_old))
        dw_prop = float(np.linalg.norm(w_target - w_old))
        violation = cur.J > J_prev + MONOTONE_TOL
        if violation:
            log.warning("surrogate increased at iteration %d: %.6g -> %.6g", k, J_prev, cur.J)
        extra = dict(dw=dw, dw_proposed=dw_prop, lr=lr_used, s_coef=s_coef, s_w=s_w, violation=bool(violation))
        extra.update({k: getattr(stats, k) for k in STAT_COLUMNS})
        trace.append(_row(k, lam, cur, params, bounds, extra))
        J_prev = cur.J
        if cur.J <= J_best:
            best, J_best = params.copy(), cur.J
        if dw_prop < cfg.tol:
            trace.converged = True
            break
    else:
        trace.stopped_at_max_epochs = True
        return best, trace
    return params, trace


def _row(k, lam, obj: Objective, params, bounds, extra):
    row = dict(
        iteration=k,
        lam=lam,
        J=obj.J,
        nll=obj.nll,
        gate=obj.gate,
        rad=obj.rad,
        corr=obj.corr,
        distortion=obj.distortion,
        softmin=obj.softmin,
        E=obj.E.copy(),
        w=params.weights.copy(),
        beta=params.beta.copy(),
        tau=params.tau.copy(),
        boundary=_boundary_hits(params, bounds),
    )
    row.update(extra)
    return row


# ---------------------------------------------------------------------------
# scoring


def composite_distances(params: ModelParams, h, r, tails, u=None) -> np.ndarray:
    """Composite energy D(h, r, t) for every tail in `tails`."""
    tails = np.asarray(tails, dtype=np.int64)
    w = params.weights[r]
    D = np.zeros(len(tails))
    for m, tag in enumerate(params.tags):
        X = params.emb_at(m, u)
        y = params.transports[r][m](X[h][None])
        D += w[m] * distance(tag, y, X[tails]) ** 2
    return D


def scores(params: ModelParams, h, r, u, tails, S_hat) -> np.ndarray:
    D = composite_distances(params, h, r, tails, u)
    return params.alpha_at(r, u) + params.beta[r] * np.asarray(S_hat, dtype=float) - params.tau[r] * D


def score_rank(params: ModelParams, h, r, u, candidates, S_hat):
    """Candidates sorted by score (descending), ties broken by entity index; returns (tails, scores)."""
    candidates = np.asarray(candidates, dtype=np.int64)
    f = scores(params, h, r, u, candidates, S_hat)
    order = np.lexsort((candidates, -f))
    return candidates[order], f[order]
