import math
import warnings

import numpy as np
import pytest

from conftest import random_tangent, randomize_params, shifted, tiny_kg
from geotkg.config import DomainBounds, FeatureConfig, TrainConfig
from geotkg.errors import EmptySupport
from geotkg.geometry import HYPERBOLIC, SPHERICAL, ManifoldKind, Point, Transport, conjugate, random_isometry
from geotkg.graphstore import TemporalKG
from geotkg.maxent import NegativeTauWarning
from geotkg.synthetic import PlantedConfig, generate_planted
from geotkg.trainer import (
    STAT_COLUMNS,
    TrainTrace,
    composite_distances,
    embedding_step,
    init_params,
    maxent_coefficients,
    objective,
    prepare_data,
    regularizers,
    score_rank,
    scores,
    train,
)

BOUNDS = DomainBounds()


def _setup(cfg=None, kg=None):
    kg = kg or tiny_kg()
    cfg = cfg or TrainConfig(k_neg=4)
    data = prepare_data(kg, cfg)
    params = init_params(kg, cfg, BOUNDS, bins=data.bins)
    return kg, cfg, data, params


def _directional_errors(cfg, data, params, n_dirs, seed, lam=0.4, h=1e-6):
    rng = np.random.default_rng(seed)
    obj = objective(params, data, cfg, lam, grad=True)
    errs = []
    for _ in range(n_dirs):
        v = random_tangent(params, rng)
        analytic = sum(float(np.sum(g * d)) for g, d in zip(obj.gX, v))
        fd = (objective(shifted(params, v, h), data, cfg, lam).J - objective(shifted(params, v, -h), data, cfg, lam).J) / (2 * h)
        errs.append(abs(fd - analytic) / max(abs(analytic), 1e-8))
    return errs


def test_end_to_end_gradient():
    _, cfg, data, params = _setup()
    errs = []
    for seed in range(10):
        errs += _directional_errors(cfg, data, randomize_params(params, data, seed), 5, seed)
    assert max(errs) <= 1e-4


def test_end_to_end_gradient_per_bin():
    cfg = TrainConfig(k_neg=4, per_bin=True, dims=(2, 3, 2))
    _, cfg, data, params = _setup(cfg)
    assert params.X[0].shape[0] == len(data.bins)
    errs = []
    for seed in range(5):
        errs += _directional_errors(cfg, data, randomize_params(params, data, seed), 5, seed)
    assert max(errs) <= 1e-4


def test_translation_gradient():
    cfg = TrainConfig(k_neg=4, learn_translations=True, dims=(3, 2, 2))
    _, cfg, data, params = _setup(cfg)
    params = randomize_params(params, data, 3, learn_translations=True)
    lam, h = 0.4, 1e-6
    obj = objective(params, data, cfg, lam, grad=True, grad_translations=True)
    for r in range(params.n_relations):
        for m, tag in enumerate(params.tags):
            if tag == SPHERICAL:
                continue
            t = params.transports[r][m]
            fd = []
            for e in np.eye(len(t.translation)):
                vals = []
                for sign in (1, -1):
                    p = params.copy()
                    p.transports[r][m] = Transport(t.kind, t.rotation, t.translation + sign * h * e)
                    vals.append(objective(p, data, cfg, lam).J)
                fd.append((vals[0] - vals[1]) / (2 * h))
            an = obj.gT[r, m, : len(t.translation)]
            assert np.linalg.norm(an - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def _gauge(params, seed):
    """Conjugate every relation transport by a per-metric random isometry and move embeddings along."""
    g = params.copy()
    for m, tag in enumerate(params.tags):
        dim = params.X[m].shape[-1] - (1 if tag == SPHERICAL else 0)
        U = random_isometry(ManifoldKind(tag, dim), seed=[seed, m], scale=None if tag != HYPERBOLIC else 0.5)
        g.X[m] = U(params.X[m])
        for r in range(params.n_relations):
            g.transports[r][m] = conjugate(U, params.transports[r][m])
    return g


@pytest.mark.parametrize("seed", range(3))
def test_gauge_invariance(seed):
    cfg = TrainConfig(k_neg=4, lambda_rad=0.0)
    kg, cfg, data, params = _setup(cfg)
    params = randomize_params(params, data, seed, learn_translations=True)
    moved = _gauge(params, seed)
    a, b = objective(params, data, cfg, 0.3), objective(moved, data, cfg, 0.3)
    assert abs(a.J - b.J) <= 1e-9
    np.testing.assert_allclose(a.E, b.E, atol=1e-9)
    S = np.random.default_rng(seed).uniform(0, 2, kg.n_entities)
    for h in range(kg.n_entities):
        for r in range(kg.n_relations):
            t0, f0 = score_rank(params, h, r, 1, np.arange(kg.n_entities), S)
            t1, f1 = score_rank(moved, h, r, 1, np.arange(kg.n_entities), S)
            np.testing.assert_array_equal(t0, t1)
            np.testing.assert_allclose(f0, f1, atol=1e-9)
            shifted_alpha = moved.copy()
            shifted_alpha.alpha = {k: v + 3.7 for k, v in moved.alpha.items()}
            t2, _ = score_rank(shifted_alpha, h, r, 1, np.arange(kg.n_entities), S)
            np.testing.assert_array_equal(t0, t2)


def test_scores_match_canonical_form():
    kg, cfg, data, params = _setup()
    params = randomize_params(params, data, 1)
    S = np.linspace(0, 1, kg.n_entities)
    D = composite_distances(params, 0, 1, np.arange(3), None)
    expected = params.alpha_at(1, 1) + params.beta[1] * S - params.tau[1] * D
    np.testing.assert_allclose(scores(params, 0, 1, 1, np.arange(3), S), expected)
    tails, f = score_rank(params, 0, 1, 1, np.arange(3), S)
    assert np.all(np.diff(f) <= 0)


def test_regularizers_values():
    kg, cfg, data, params = _setup()
    params = randomize_params(params, data, 2)
    gate, rad, corr = regularizers(params, data, cfg)
    w = params.weights
    assert gate == pytest.approx(np.sqrt(w**2 + cfg.eps_gate).sum())
    X = params.X
    expected_rad = (X[0] ** 2).sum() + (1 / (1 - (X[1] ** 2).sum(-1))).sum() + (X[2] ** 2).sum()
    assert rad == pytest.approx(expected_rad)
    assert -2 <= corr <= 2


def test_embedding_step_decreases_and_preserves_domain():
    kg, cfg, data, params = _setup()
    params = randomize_params(params, data, 4)
    J0 = objective(params, data, cfg, 0.5).J
    new, obj, lr = embedding_step(params, data, cfg, 0.5, 1.0, BOUNDS)
    assert obj.J <= J0 + 1e-12
    assert lr > 0
    for m, tag in enumerate(new.tags):
        dim = new.X[m].shape[-1] - (tag == SPHERICAL)
        for x in new.X[m].reshape(-1, new.X[m].shape[-1]):
            Point(ManifoldKind(tag, dim), x).validate(BOUNDS)


def test_maxent_coefficients_match_moments():
    kg, cfg, data, params = _setup(TrainConfig(k_neg=4))
    params = randomize_params(params, data, 5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NegativeTauWarning)
        alpha, beta, tau, stats = maxent_coefficients(params, data, cfg)
    assert beta.shape == tau.shape == (kg.n_relations,)
    assert set(alpha) <= set(data.ru_keys)
    assert stats.n_solved + stats.n_infeasible + stats.n_irreparable <= data.n_contexts + stats.n_repaired


@pytest.fixture(scope="module")
def short_run():
    kg = generate_planted(PlantedConfig(n_entities=20, n_bins=8, seed=1))[0]
    cfg = TrainConfig(epochs=6, lr=1.0, seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        params, trace = train(kg, cfg)
    return kg, cfg, params, trace


def test_train_monotone_and_valid(short_run):
    kg, cfg, params, trace = short_run
    J = trace.column("J")
    assert len(J) == cfg.epochs + 1
    assert np.all(np.diff(J) <= 1e-6)
    np.testing.assert_allclose(params.weights.sum(1), 1.0)
    for m, tag in enumerate(params.tags):
        dim = params.X[m].shape[-1] - (tag == SPHERICAL)
        for x in params.X[m][0]:
            Point(ManifoldKind(tag, dim), x).validate(BOUNDS)


def test_trace_serialization(short_run, tmp_path):
    _, cfg, _, trace = short_run
    trace.to_csv(tmp_path / "trace.csv")
    header = (tmp_path / "trace.csv").read_text().splitlines()[0].split(",")
    assert {"iteration", "J", "lam", *STAT_COLUMNS} <= set(header)
    assert {"w_r0_euclidean", "boundary_hyperbolic", "tau_1"} <= set(header)
    trace.to_json(tmp_path / "trace.json")
    back = TrainTrace.from_json(tmp_path / "trace.json")
    np.testing.assert_allclose(back.column("J"), trace.column("J"))
    assert len(back) == len(trace)


def test_train_deterministic(short_run):
    kg, cfg, params, trace = short_run
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        params2, trace2 = train(kg, cfg)
    np.testing.assert_array_equal(trace.column("J"), trace2.column("J"))
    for a, b in zip(params.X, params2.X):
        np.testing.assert_array_equal(a, b)


def test_train_empty_graph():
    with pytest.raises(EmptySupport):
        train(TemporalKG(3, 1, np.zeros((0, 4))), TrainConfig(epochs=1))


def test_temperature_annealed_in_trace(short_run):
    _, cfg, _, trace = short_run
    lam = trace.column("lam")[1:]
    assert np.all(np.diff(lam) <= 0) and lam[0] == cfg.lambda0
