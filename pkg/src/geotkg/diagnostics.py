"""Bound constants, sample-size and covering calculators, dependence
estimation, training monitors and the tree-distortion benchmark."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .config import DomainBounds
from .errors import DomainError
from .geometry import HYPERBOLIC, distance, sq_distance_grad
from .trainer import TrainTrace

LIPSCHITZ_SAMPLES = 100_000
MIN_SERIES = 64
LONG_MEMORY_MIN_BLOCK = 8  # short-memory variance ratios have plateaued by here


# ---------------------------------------------------------------------------
# Lipschitz constants and bound calculators


@dataclass
class BoundConstants:
    L_euclidean: float
    L_hyperbolic: float
    L_spherical: float
    L_d: float
    L_feature: float
    C: float
    B: float
    tau_max: float = 0.0
    beta_max: float = 0.0
    F_min: float = float("nan")
    F_max: float = float("nan")
    delta_min: float = float("nan")
    delta_max: float = float("nan")
    L_loss: float = float("nan")
    N: int = 0
    N_eff: float = float("nan")
    m_block: int = 0
    g_gap: int = 0
    hyperbolic_samples: int = 0

    def to_dict(self):
        return asdict(self)


def _hyperbolic_grad_norm(x, y):
    return np.linalg.norm(sq_distance_grad(HYPERBOLIC, x, y), axis=-1)


def _ball_points(rng, n, dim, radius, on_boundary):
    v = rng.standard_normal((n, dim))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    r = np.full((n, 1), radius) if on_boundary else radius * rng.random((n, 1)) ** (1.0 / dim)
    return v * r


def empirical_hyperbolic_lipschitz(R_H, n_samples=LIPSCHITZ_SAMPLES, dim=2, seed=0):
    """Max of |grad_x d_H(x, y)^2| over sampled pairs in the R_H ball, then polished locally.

    Half the pairs are uniform in the ball and half lie on its boundary
    sphere; the best pair seeds a bounded local maximisation in polar form.
    """
    if not 0 < R_H < 1:
        raise DomainError("R_H must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    half = n_samples // 2
    x = np.concatenate([_ball_points(rng, half, dim, R_H, False), _ball_points(rng, n_samples - half, dim, R_H, True)])
    y = np.concatenate([_ball_points(rng, half, dim, R_H, False), _ball_points(rng, n_samples - half, dim, R_H, True)])
    with np.errstate(invalid="ignore"):
        norms = _hyperbolic_grad_norm(x, y)
    best = int(np.nanargmax(norms))
    sampled = float(norms[best])

    # the pair spans a plane, so polish in polar coordinates of that plane
    def to_xy(p):
        r1, r2, th = p
        return np.array([r1, 0.0]), np.array([r2 * math.cos(th), r2 * math.sin(th)])

    rx, ry = np.linalg.norm(x[best]), np.linalg.norm(y[best])
    cos = float(x[best] @ y[best] / max(rx * ry, 1e-300))
    start = np.array([rx, ry, math.acos(min(max(cos, -1.0), 1.0))])

    def neg(p):
        a, b = to_xy(p)
        return -float(_hyperbolic_grad_norm(a, b))

    res = minimize(neg, start, method="L-BFGS-B", bounds=[(0.0, R_H), (0.0, R_H), (0.0, math.pi)])
    return max(sampled, -float(res.fun)), sampled


def lipschitz_constants(bounds: DomainBounds, params=None, L_feature=1.0, n_samples=LIPSCHITZ_SAMPLES, seed=0) -> BoundConstants:
    """Distance Lipschitz constants, the score constant C and the range constant B.

    tau_max and beta_max come from `params` when given (absolute values),
    otherwise they are left at zero and C reduces to zero.
    """
    L_E = 4.0 * bounds.R_E
    margin = math.sqrt(bounds.delta_S * (2.0 - bounds.delta_S))
    L_S = 2.0 * math.pi / margin
    L_H, _ = empirical_hyperbolic_lipschitz(bounds.R_H, n_samples=n_samples, seed=seed)
    L_d = max(L_E, L_H, L_S)
    tau_max = float(np.max(np.abs(params.tau))) if params is not None and len(params.tau) else 0.0
    beta_max = float(np.max(np.abs(params.beta))) if params is not None and len(params.beta) else 0.0
    B = 2.0 * max(bounds.R_E, bounds.R_H / (1.0 - bounds.R_H), math.pi / margin)
    return BoundConstants(
        L_euclidean=L_E,
        L_hyperbolic=L_H,
        L_spherical=L_S,
        L_d=L_d,
        L_feature=float(L_feature),
        C=tau_max * L_d + beta_max * float(L_feature),
        B=B,
        tau_max=tau_max,
        beta_max=beta_max,
        hyperbolic_samples=int(n_samples),
    )


def _icbrt(N: int) -> int:
    m = int(round(N ** (1.0 / 3.0)))
    while m**3 > N:
        m -= 1
    while (m + 1) ** 3 <= N:
        m += 1
    return m


def effective_sample_size(N: int):
    """Blocking sizes and effective sample count: returns (m, g, N_eff, lower_bound).

    m = g = floor(N^(1/3)) and N_eff = N / (2(m + g)), which guarantees
    N_eff >= N^(2/3)/4 = lower_bound.
    """
    if int(N) != N or N < 8:
        raise DomainError("effective sample size needs an integer N >= 8")
    N = int(N)
    m = g = _icbrt(N)
    return m, g, N / (2.0 * (m + g)), N ** (2.0 / 3.0) / 4.0


def loss_lipschitz(delta_min, delta_max, F_min, F_max) -> float:
    """Lipschitz constant of the cloglog loss over the score and width ranges."""
    if not (0 < delta_min <= delta_max):
        raise DomainError("need 0 < delta_min <= delta_max")
    if F_min > F_max:
        raise DomainError("need F_min <= F_max")
    tail = -math.expm1(-delta_min * math.exp(F_min))
    return delta_max * math.exp(F_max) * max(1.0, 1.0 / tail)


def generalization_bound(constants: BoundConstants, delta: float, empirical_risk: float = 0.0) -> float:
    """empirical_risk + L_loss*C*B/sqrt(N_eff) + sqrt(log(2/delta)/(2*N_eff))."""
    if not 0 < delta < 1:
        raise DomainError("confidence delta must lie in (0, 1)")
    n = constants.N_eff
    if not n > 0:
        raise DomainError("N_eff must be positive")
    return empirical_risk + constants.L_loss * constants.C * constants.B / math.sqrt(n) + math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def _ceil(x) -> int:
    # a quotient that is an integer up to rounding (6/0.3 = 20.000000000000004) keeps that integer
    return math.ceil(x * (1.0 - 1e-12))


def covering_bound(A, B, T, S_max, D_max_sq, eps) -> float:
    """log of the product of the three eps/3-grid sizes for (alpha, beta, tau).

    A grid over an empty range has one point, so each factor is at least 1.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    for name, v in (("A", A), ("B", B), ("T", T), ("S_max", S_max), ("D_max_sq", D_max_sq)):
        if v < 0:
            raise DomainError(f"{name} must be non-negative")
    step = eps / 3.0
    sizes = (_ceil(2.0 * A / step), _ceil(2.0 * B * S_max / step), _ceil(T * D_max_sq / step))
    return float(sum(math.log(max(1, s)) for s in sizes))


# ---------------------------------------------------------------------------
# dependence estimation


@dataclass
class MixingEstimate:
    """Block-bootstrap dependence profile; an estimate, not a certificate."""

    degenerate: bool
    summable: bool | None
    exponent: float
    model: str
    block_sizes: list
    variance_ratios: list
    variance_slope: float
    lags: list
    acf: list
    significant_lags: int
    n: int
    n_boot: int

    def to_dict(self):
        return asdict(self)


def _acf(x, max_lag):
    x = x - x.mean()
    n = len(x)
    f = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(f * np.conj(f))[: max_lag + 1]
    return ac / ac[0]


def block_bootstrap_variance_ratio(x, b, n_boot, rng):
    """n * Var*(bootstrap mean) / Var(x) under the moving-block bootstrap with block size b."""
    n = len(x)
    k = n // b
    csum = np.concatenate([[0.0], np.cumsum(x)])
    block_means = (csum[b:] - csum[:-b]) / b
    starts = rng.integers(0, len(block_means), size=(n_boot, k))
    boot = block_means[starts].mean(axis=1)
    return k * b * boot.var(ddof=1) / x.var()


def mixing_estimate(series, block_sizes=None, n_boot=200, seed=0, max_lag=None, z=4.0, slope_tol=0.2) -> MixingEstimate:
    """Estimate dependence decay and decide whether sum_k beta(k)^(1/3) is finite.

    Variance ratios of the block-bootstrapped mean grow like b^(1-p) when
    correlations decay like k^(-p) with p < 1, so a clearly positive log-log
    slope over the larger blocks (short-memory ratios have levelled off
    there) means long memory with p = 1 - slope.  Otherwise the sample
    autocorrelations above the white-noise band z/sqrt(n) are fitted by a
    power law and by an exponential; the better fit decides the exponent
    (exponential decay counts as p = inf).  Verdict: summable iff p > 3.
    """
    x = np.asarray(series, dtype=float)
    n = len(x)
    if x.ndim != 1 or n < MIN_SERIES:
        raise DomainError(f"mixing estimation needs a 1-d series of length >= {MIN_SERIES}")
    if block_sizes is None:
        block_sizes = [2**j for j in range(int(math.log2(n // 16)) + 1)]
    block_sizes = [int(b) for b in block_sizes if 1 <= b <= n // 4]
    max_lag = max_lag or min(n // 4, 200)
    if not np.all(np.isfinite(x)) or x.var() <= 1e-14 * max(1.0, float(np.mean(x**2))):
        return MixingEstimate(True, None, float("nan"), "degenerate", block_sizes, [], float("nan"), [], [], 0, n, n_boot)
    rng = np.random.default_rng(seed)
    vr = np.array([block_bootstrap_variance_ratio(x, b, n_boot, rng) for b in block_sizes])
    large = np.array(block_sizes) >= LONG_MEMORY_MIN_BLOCK
    if large.sum() < 2:
        large[:] = True
    lb = np.log(np.array(block_sizes, dtype=float)[large])
    slope = float(np.polyfit(lb, np.log(np.maximum(vr[large], 1e-300)), 1)[0]) if len(lb) >= 2 else 0.0
    rho = _acf(x, max_lag)
    band = z / math.sqrt(n)
    lags = np.arange(1, max_lag + 1)
    sig = np.abs(rho[1:]) > band
    n_sig = int(np.argmin(sig)) if not sig.all() else len(sig)
    if slope > slope_tol:
        exponent, model = 1.0 - slope, "power (variance ratio)"
    elif n_sig < 3:
        exponent, model = math.inf, "white"
    else:
        k = lags[:n_sig]
        y = np.log(np.abs(rho[1 : n_sig + 1]))
        cp, rp = np.polyfit(np.log(k), y, 1, full=True)[:2]
        ce, re = np.polyfit(k, y, 1, full=True)[:2]
        rp = float(rp[0]) if len(rp) else 0.0
        re = float(re[0]) if len(re) else 0.0
        if re <= rp:
            exponent, model = math.inf, "exponential"
        else:
            exponent, model = float(-cp[0]), "power (autocorrelation)"
    return MixingEstimate(
        degenerate=False,
        summable=bool(exponent > 3.0),
        exponent=exponent,
        model=model,
        block_sizes=block_sizes,
        variance_ratios=vr.tolist(),
        variance_slope=slope,
        lags=lags.tolist(),
        acf=rho[1:].tolist(),
        significant_lags=n_sig,
        n=n,
        n_boot=int(n_boot),
    )


def fractional_gaussian_noise(n, hurst, seed=None):
    """Exact fractional Gaussian noise via circulant embedding (Davies-Harte)."""
    if not 0 < hurst < 1:
        raise DomainError("Hurst exponent must lie in (0, 1)")
    k = np.arange(n + 1, dtype=float)
    gamma = 0.5 * (np.abs(k + 1) ** (2 * hurst) - 2 * k ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst))
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    eig = np.fft.fft(row).real
    if np.any(eig < -1e-10):
        raise DomainError("circulant embedding is not non-negative definite")
    eig = np.maximum(eig, 0.0)
    m = len(row)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    out = np.fft.fft(np.sqrt(eig / m) * w)
    return out.real[:n]


# ---------------------------------------------------------------------------
# training monitors


@dataclass
class MonitorThresholds:
    eps_w: float = 0.2
    grace: int = 5
    energy_run: int = 3
    energy_rtol: float = 1e-3
    norm_run: int = 5


@dataclass
class InstabilityFlags:
    weight_oscillation: bool = False
    energy_growth: bool = False
    norm_explosion: bool = False
    rank_deficiency: bool = False
    evidence: dict = field(default_factory=dict)

    @property
    def any(self) -> bool:
        return self.weight_oscillation or self.energy_growth or self.norm_explosion or self.rank_deficiency

    def to_dict(self):
        return asdict(self)


def _longest_run(mask):
    best = run = 0
    for v in mask:
        run = run + 1 if v else 0
        best = max(best, run)
    return best


def monitor(trace: TrainTrace, thresholds: MonitorThresholds | None = None) -> InstabilityFlags:
    """Scan a training trace for the four instability patterns.

    Rows with a negative iteration index (the initial state) are skipped.
    Energy growth counts an increase only above E*(1 + energy_rtol).
    """
    th = thresholds or MonitorThresholds()
    rows = [row for row in trace.rows if row["iteration"] >= 0]
    if not rows:
        raise DomainError("cannot monitor an empty trace")
    flags = InstabilityFlags()

    late = [(row["iteration"], row["dw"]) for row in rows if row["iteration"] >= th.grace]
    bad = [(k, dw) for k, dw in late if dw > th.eps_w]
    if bad:
        flags.weight_oscillation = True
        flags.evidence["weight_oscillation"] = {"iterations": [k for k, _ in bad], "dw": [dw for _, dw in bad], "eps_w": th.eps_w}

    E = np.array([np.asarray(row["E"], dtype=float) for row in rows])
    if len(E) > th.energy_run:
        with np.errstate(invalid="ignore"):
            up = E[1:] > E[:-1] * (1.0 + th.energy_rtol)
        worst = {}
        for idx in np.ndindex(*E.shape[1:]):
            run = _longest_run(up[(slice(None),) + idx])
            if run > th.energy_run:
                worst[f"r{idx[0]}_{trace.tags[idx[1]]}"] = run
        if worst:
            flags.energy_growth = True
            flags.evidence["energy_growth"] = {"longest_runs": worst, "run_limit": th.energy_run}

    hits = np.array([np.sum(row["boundary"]) for row in rows])
    run = _longest_run(hits > 0)
    if run >= th.norm_run:
        flags.norm_explosion = True
        flags.evidence["norm_explosion"] = {"longest_run": run, "max_points_at_bound": float(hits.max())}

    irreparable = [(row["iteration"], row.get("n_irreparable", 0)) for row in rows if row.get("n_irreparable", 0) > 0]
    if irreparable:
        flags.rank_deficiency = True
        flags.evidence["rank_deficiency"] = {"iterations": [k for k, _ in irreparable], "contexts": [c for _, c in irreparable]}
    return flags


# ---------------------------------------------------------------------------
# tree benchmark


def binary_tree(depth: int):
    """Complete binary tree with 2**depth leaves; returns (parent array, hop-distance matrix)."""
    if depth < 1:
        raise DomainError("depth must be >= 1")
    n = 2 ** (depth + 1) - 1
    parent = np.array([-1] + [(i - 1) // 2 for i in range(1, n)])
    rows, cols = np.arange(1, n), parent[1:]
    adj = csr_matrix((np.ones(2 * (n - 1)), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))), shape=(n, n))
    return parent, shortest_path(adj, unweighted=True, directed=False)


def _mobius_to_origin(z, c):
    return (z - c) / (1 - np.conj(c) * z)


def _mobius_from_origin(w, c):
    return (w + c) / (1 + np.conj(c) * w)


def sarkar_embedding(parent, edge_length):
    """Poincare-disk coordinates: each node's neighbours spread evenly around it at hyperbolic distance `edge_length`."""
    n = len(parent)
    children = [[] for _ in range(n)]
    for i in range(1, n):
        children[parent[i]].append(i)
    rho = math.tanh(edge_length / 2.0)
    z = np.zeros(n, dtype=complex)
    for v in range(n):
        kids = children[v]
        if not kids:
            continue
        if v == 0:
            start, slots = 0.0, len(kids)
            angles = start + 2 * np.pi * np.arange(slots) / slots
        else:
            slots = len(kids) + 1
            start = np.angle(_mobius_to_origin(z[parent[v]], z[v]))
            angles = start + 2 * np.pi * np.arange(1, slots) / slots
        z[kids] = _mobius_from_origin(rho * np.exp(1j * angles), z[v])
    return np.stack([z.real, z.imag], axis=1)


def distortion(embedded, target):
    """(worst-case, average) multiplicative distortion over distinct pairs."""
    iu = np.triu_indices(len(target), k=1)
    ratio = embedded[iu] / target[iu]
    worst = float(ratio.max() / ratio.min())
    return worst, float(np.mean(ratio) / ratio.min())


def _pairwise(tag, X):
    return distance(tag, X[:, None, :], X[None, :, :])


def _classical_mds(D, dim):
    n = len(D)
    J = np.eye(n) - 1.0 / n
    Bm = -0.5 * J @ (D**2) @ J
    vals, vecs = np.linalg.eigh(Bm)
    order = np.argsort(vals)[::-1][:dim]
    return vecs[:, order] * np.sqrt(np.maximum(vals[order], 0.0))


def euclidean_stress_embedding(D, dim=2, seed=0, max_iter=5000):
    """Minimise sum_{i<j} (|x_i - x_j| - D_ij)^2 / D_ij^2 with L-BFGS from a classical-MDS start."""
    n = len(D)
    rng = np.random.default_rng(seed)
    X0 = _classical_mds(D, dim) + 1e-6 * rng.standard_normal((n, dim))
    iu = np.triu_indices(n, k=1)
    W = np.zeros_like(D)
    W[iu] = 1.0 / D[iu] ** 2

    def fg(flat):
        X = flat.reshape(n, dim)
        diff = X[:, None, :] - X[None, :, :]
        dist = np.sqrt(np.sum(diff**2, axis=-1))
        res = np.where(W > 0, dist - D, 0.0)
        f = float(np.sum(W * res**2))
        with np.errstate(invalid="ignore", divide="ignore"):
            coef = np.where(dist > 0, 2.0 * W * res / dist, 0.0)
        coef = coef + coef.T
        g = np.sum(coef[:, :, None] * diff, axis=1)
        return f, g.ravel()

    res = minimize(fg, X0.ravel(), jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "gtol": 1e-12, "ftol": 1e-15})
    return res.x.reshape(n, dim)


@dataclass
class TreeBenchRow:
    depth: int
    geometry: str
    dim: int
    n_nodes: int
    worst: float
    average: float


def tree_distortion_bench(depths, dim=2, seed=0, edge_length=None):
    """Hyperbolic (constructive) versus Euclidean (stress-minimised) distortion of complete binary trees.

    The default edge length keeps the deepest node at hyperbolic radius
    about 24 from the origin, where the Poincare coordinates still resolve.
    """
    if dim != 2:
        raise DomainError("the constructive hyperbolic embedding is two-dimensional")
    rows = []
    for k in np.atleast_1d(depths):
        k = int(k)
        if k < 1:
            raise DomainError("depth must be >= 1")
        parent, D = binary_tree(k)
        ell = edge_length if edge_length is not None else min(6.0, 24.0 / k)
        Xh = sarkar_embedding(parent, ell)
        w_h, a_h = distortion(_pairwise(HYPERBOLIC, Xh), D)
        Xe = euclidean_stress_embedding(D, dim=dim, seed=seed)
        w_e, a_e = distortion(_pairwise("euclidean", Xe), D)
        rows.append(TreeBenchRow(k, HYPERBOLIC, dim, len(D), w_h, a_h))
        rows.append(TreeBenchRow(k, "euclidean", dim, len(D), w_e, a_e))
    return rows


def write_bench_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(asdict(rows[0]).keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(row).items()})


# ---------------------------------------------------------------------------
# report


@dataclass
class DiagnosticsReport:
    distortion_energies: list
    weights: list
    constants: dict
    bound: float
    flags: dict
    mixing: dict | None
    nondegeneracy: dict
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serialisable: {type(obj)}")
