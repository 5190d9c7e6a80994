import numpy as np
import pytest

ACCEPTANCE = {}


def record(number, title, ok, detail, elapsed):
    ACCEPTANCE[number] = (title, bool(ok), detail, elapsed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail, elapsed = ACCEPTANCE[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{number:2d}] {status} {title} ({elapsed:.1f} s): {detail}")


def central_difference(fn, x, h=1e-6):
    """Gradient of scalar fn at x (any shape) by central differences."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_kg():
    from geotkg.graphstore import TemporalKG

    q = [[0, 0, 1, 0], [1, 0, 2, 0], [2, 1, 0, 1], [0, 1, 2, 1], [1, 0, 0, 2], [2, 0, 1, 2], [1, 1, 2, 2]]
    return TemporalKG(3, 2, q, {0: 1.0, 1: 0.5, 2: 2.0})


def randomize_params(params, data, seed, learn_translations=False):
    """Random admissible parameters with non-trivial score coefficients and weights."""
    from geotkg.geometry import EUCLIDEAN, SPHERICAL, ManifoldKind, Transport, random_isometry, sample_points

    rng = np.random.default_rng(seed)
    p = params.copy()
    for m, tag in enumerate(p.tags):
        B, n, k = p.X[m].shape
        dim = k - 1 if tag == SPHERICAL else k
        radius = 1.5 if tag == EUCLIDEAN else 0.7
        p.X[m] = sample_points(tag, B * n, dim, rng, radius=radius).reshape(B, n, k)
        for r in range(p.n_relations):
            kind = ManifoldKind(tag, dim)
            t = random_isometry(kind, seed=int(rng.integers(1 << 30)), scale=0.3)
            if tag != SPHERICAL and not learn_translations:
                t = Transport(kind, t.rotation)
            p.transports[r][m] = t
    R = p.n_relations
    p.beta = rng.uniform(-1, 1, R)
    p.tau = rng.uniform(0.2, 1.5, R)
    p.alpha = {k: float(rng.uniform(-2, 0)) for k in data.ru_keys}
    p.logits = rng.normal(0, 1, p.logits.shape)
    return p


def random_tangent(params, rng):
    """Random direction in the product of tangent spaces at the embeddings."""
    from geotkg.geometry import SPHERICAL

    out = []
    for m, tag in enumerate(params.tags):
        v = rng.standard_normal(params.X[m].shape)
        if tag == SPHERICAL:
            x = params.X[m]
            v -= np.sum(v * x, axis=-1, keepdims=True) * x
        out.append(v)
    return out


def shifted(params, direction, h):
    p = params.copy()
    p.X = [x + h * v for x, v in zip(params.X, direction)]
    return p
