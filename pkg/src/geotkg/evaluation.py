"""Temporal split and filtered ranking metrics."""

from __future__ import annotations

import numpy as np

from .config import FeatureConfig
from .errors import DomainError
from .graphstore import TemporalKG, feature_matrix
from .trainer import ModelParams, scores

HITS_AT = (1, 3, 10)


def temporal_split(kg: TemporalKG, holdout=0.2):
    """Train on the earliest bins, hold out the final `holdout` fraction of bins."""
    bins = sorted(kg.widths)
    if len(bins) < 2:
        raise DomainError("need at least two bins for a temporal split")
    n_test = max(1, int(round(holdout * len(bins))))
    cut = bins[-n_test - 1]
    return kg.restrict(max_bin=cut), kg.restrict(min_bin=cut + 1)


def random_mrr(n_candidates: int) -> float:
    """Expected reciprocal rank of a uniformly random ranking of n candidates."""
    return float(np.sum(1.0 / np.arange(1, n_candidates + 1)) / n_candidates)


def filtered_rank(f, target, exclude) -> int:
    """1-based rank of `target` among tails not in `exclude`; ties go to the lower index."""
    keep = np.ones(len(f), dtype=bool)
    keep[np.asarray(exclude, dtype=np.int64)] = False
    keep[target] = True
    ft = f[target]
    idx = np.arange(len(f))
    better = keep & ((f > ft) | ((f == ft) & (idx < target)))
    return int(better.sum()) + 1


def evaluate(params: ModelParams, kg_train: TemporalKG, kg_test: TemporalKG, feat_cfg: FeatureConfig | None = None, hits_at=HITS_AT):
    """Filtered MRR and Hits@k over every held-out event.

    Structural features come from the training graph at its last bin, so no
    held-out event informs its own score.
    """
    feat_cfg = feat_cfg or FeatureConfig()
    last = max(kg_train.widths) if kg_train.widths else 0
    S = feature_matrix(kg_train, last, feat_cfg)
    n = kg_train.n_entities
    tails = np.arange(n)
    ranks = []
    cache = {}
    for h, r, t, u in kg_test.quadruples:
        key = (int(h), int(r))
        if key not in cache:
            cache[key] = scores(params, h, r, None, tails, S[h])
        f = cache[key]
        ranks.append(filtered_rank(f, int(t), kg_test.positives(h, r, u)))
    ranks = np.array(ranks, dtype=float)
    out = {"n_queries": int(len(ranks)), "n_entities": int(n), "mrr_random": random_mrr(n)}
    if len(ranks) == 0:
        out.update({"mrr": float("nan"), **{f"hits@{k}": float("nan") for k in hits_at}})
        return out
    out["mrr"] = float(np.mean(1.0 / ranks))
    for k in hits_at:
        out[f"hits@{k}"] = float(np.mean(ranks <= k))
    return out
