"""Temporal knowledge-graph storage, the graph-distance oracle, path-count
features and candidate-set construction."""

from __future__ import annotations

import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .config import FeatureConfig
from .errors import DataFormatError, DomainError, EmptySupport

UNREACHABLE = None


@dataclass(frozen=True, eq=False)
class TemporalKG:
    """Immutable event store.

    `quadruples` is an (N, 4) int array of (head, relation, tail, bin), sorted
    and duplicate-free; `widths` maps bin index to its width.
    """

    n_entities: int
    n_relations: int
    quadruples: np.ndarray
    widths: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        q = np.asarray(self.quadruples, dtype=np.int64).reshape(-1, 4)
        if len(q):
            if q.min() < 0:
                raise DomainError("negative index in quadruples")
            if q[:, [0, 2]].max() >= self.n_entities:
                raise DomainError("entity index out of range")
            if q[:, 1].max() >= self.n_relations:
                raise DomainError("relation index out of range")
        q = np.unique(q, axis=0)
        q = q[np.lexsort((q[:, 2], q[:, 0], q[:, 1], q[:, 3]))]
        q.setflags(write=False)
        object.__setattr__(self, "quadruples", q)
        widths = {int(u): float(d) for u, d in self.widths.items()}
        for u in np.unique(q[:, 3]) if len(q) else ():
            widths.setdefault(int(u), 1.0)
        for u, d in widths.items():
            if not (d > 0 and math.isfinite(d)):
                raise DomainError(f"bin {u} has non-positive width {d}")
        object.__setattr__(self, "widths", dict(sorted(widths.items())))

    def __len__(self):
        return len(self.quadruples)

    def __eq__(self, other):
        if not isinstance(other, TemporalKG):
            return NotImplemented
        return (
            self.n_entities == other.n_entities
            and self.n_relations == other.n_relations
            and self.widths == other.widths
            and np.array_equal(self.quadruples, other.quadruples)
        )

    @property
    def bins(self) -> list[tuple[int, float]]:
        return list(self.widths.items())

    def width(self, u: int) -> float:
        return self.widths.get(int(u), 1.0)

    def events(self, r=None, u=None, upto=None, lo=None) -> np.ndarray:
        q = self.quadruples
        mask = np.ones(len(q), dtype=bool)
        if r is not None:
            mask &= q[:, 1] == r
        if u is not None:
            mask &= q[:, 3] == u
        if upto is not None:
            mask &= q[:, 3] <= upto
        if lo is not None:
            mask &= q[:, 3] >= lo
        return q[mask]

    def positives(self, h, r, u) -> np.ndarray:
        key = ("pos", int(u))
        if key not in self._cache:
            index = {}
            for hh, rr, tt, _ in self.events(u=u):
                index.setdefault((int(hh), int(rr)), []).append(int(tt))
            self._cache[key] = {k: np.array(sorted(v)) for k, v in index.items()}
        return self._cache[key].get((int(h), int(r)), np.zeros(0, dtype=np.int64))

    def restrict(self, max_bin=None, min_bin=None) -> "TemporalKG":
        q = self.events(upto=max_bin, lo=min_bin)
        widths = {u: d for u, d in self.widths.items() if (max_bin is None or u <= max_bin) and (min_bin is None or u >= min_bin)}
        return TemporalKG(self.n_entities, self.n_relations, q, widths)

    def _check_entity(self, *idx):
        for i in idx:
            if not 0 <= int(i) < self.n_entities:
                raise DomainError(f"entity index {i} out of range")

    def _check_relation(self, r):
        if not 0 <= int(r) < self.n_relations:
            raise DomainError(f"relation index {r} out of range")


# ---------------------------------------------------------------------------
# TSV io


def sidecar_path(path) -> Path:
    return Path(str(path) + ".bins.json")


def load_tsv(path, n_entities=None, n_relations=None) -> TemporalKG:
    """Read `head<TAB>relation<TAB>tail<TAB>bin` lines plus the optional bin-width sidecar."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
    q = np.array(rows, dtype=np.int64).reshape(-1, 4)
    if len(q) and q.min() < 0:
        bad = int(np.argmax((q < 0).any(axis=1)))
        raise DataFormatError(f"{path}: negative index in record {bad + 1}")
    widths = {}
    side = sidecar_path(path)
    if side.exists():
        for item in json.loads(side.read_text()):
            widths[int(item["u"])] = float(item["delta"])
    if n_entities is None:
        n_entities = int(q[:, [0, 2]].max()) + 1 if len(q) else 0
    if n_relations is None:
        n_relations = int(q[:, 1].max()) + 1 if len(q) else 0
    try:
        return TemporalKG(n_entities, n_relations, q, widths)
    except DomainError as e:
        raise DataFormatError(f"{path}: {e}") from None


def save_tsv(kg: TemporalKG, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for h, r, t, u in kg.quadruples:
            fh.write(f"{h}\t{r}\t{t}\t{u}\n")
    side = sidecar_path(path)
    items = [{"u": u, "delta": d} for u, d in kg.widths.items()]
    side.write_text(json.dumps(items))


# ---------------------------------------------------------------------------
# graph distance oracle


def _adjacency(kg: TemporalKG, lo, hi):
    q = kg.events(upto=hi, lo=lo)
    n = kg.n_entities
    if len(q) == 0:
        return csr_matrix((n, n))
    rows = np.concatenate([q[:, 0], q[:, 2]])
    cols = np.concatenate([q[:, 2], q[:, 0]])
    A = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    A.data[:] = 1.0
    return A


def distance_matrix(kg: TemporalKG, u) -> np.ndarray:
    """All-pairs hop counts on the undirected, relation-agnostic graph of bins <= u (inf when unreachable)."""
    key = ("dist", int(u))
    if key not in kg._cache:
        A = _adjacency(kg, None, u)
        D = shortest_path(A, method="D", directed=False, unweighted=True)
        D.setflags(write=False)
        kg._cache[key] = D
    return kg._cache[key]


def graph_distance(kg: TemporalKG, h, t, u):
    """Shortest-path hop count between h and t using events with bin <= u, or None if unreachable."""
    kg._check_entity(h, t)
    if h == t:
        return 0
    A = _adjacency(kg, None, u).tolil().rows
    seen = {int(h): 0}
    queue = deque([int(h)])
    while queue:
        v = queue.popleft()
        for w in A[v]:
            if w not in seen:
                seen[w] = seen[v] + 1
                if w == t:
                    return seen[w]
                queue.append(w)
    return UNREACHABLE


def pair_distribution(kg: TemporalKG, r, u) -> dict:
    """Empirical distribution of (head, tail) pairs of relation r over bins <= u."""
    kg._check_relation(r)
    q = kg.events(r=r, upto=u)
    if len(q) == 0:
        raise EmptySupport(f"relation {r} has no events up to bin {u}")
    counts = Counter(zip(q[:, 0].tolist(), q[:, 2].tolist()))
    total = sum(counts.values())
    return {pair: c / total for pair, c in sorted(counts.items())}


# ---------------------------------------------------------------------------
# structural features


def _count_simple_paths(adj, source, max_len, n):
    counts = np.zeros(n)
    path = [source]
    on_path = {source}

    def walk(v, depth):
        for w in adj[v]:
            if w in on_path:
                continue
            counts[w] += 1
            if depth + 1 < max_len:
                on_path.add(w)
                path.append(w)
                walk(w, depth + 1)
                path.pop()
                on_path.discard(w)

    walk(source, 0)
    return counts


def _short_simple_paths(A, max_len):
    """Simple-path counts of length <= max_len <= 3 from powers of the 0/1 adjacency.

    Off the diagonal, length-2 walks are simple; a length-3 walk i-a-b-j
    repeats a vertex only as i-j-b-j or i-a-i-j, which number
    A_ij (deg_i + deg_j - 1) after removing the doubly counted i-j-i-j.
    """
    A = np.array(A, dtype=float)
    np.fill_diagonal(A, 0.0)
    C = A.copy()
    if max_len >= 2:
        A2 = A @ A
        C += A2
    if max_len >= 3:
        deg = A.sum(1)
        C += A2 @ A - A * (deg[:, None] + deg[None, :] - 1.0)
    np.fill_diagonal(C, 0.0)
    return C


def path_count_matrix(kg: TemporalKG, u, cfg: FeatureConfig) -> np.ndarray:
    """Number of simple paths of length <= L between every ordered entity pair, using bins in [u - w, u]."""
    key = ("paths", int(u), cfg.window, cfg.max_path_len)
    if key not in kg._cache:
        A = _adjacency(kg, u - cfg.window, u)
        n = kg.n_entities
        if cfg.max_path_len <= 3:
            C = _short_simple_paths(A.toarray(), cfg.max_path_len)
        else:
            adj = [sorted(set(row) - {h}) for h, row in enumerate(A.tolil().rows)]
            C = np.zeros((n, n))
            for h in range(n):
                if adj[h]:
                    C[h] = _count_simple_paths(adj, h, cfg.max_path_len, n)
        C.setflags(write=False)
        kg._cache[key] = C
    return kg._cache[key]


def feature_matrix(kg: TemporalKG, u, cfg: FeatureConfig) -> np.ndarray:
    """S_hat for every (head, tail) at bin u: clipped log(1 + path count)."""
    key = ("feat", int(u), cfg.window, cfg.max_path_len, cfg.S_max)
    if key not in kg._cache:
        S = np.minimum(np.log1p(path_count_matrix(kg, u, cfg)), cfg.S_max)
        S.setflags(write=False)
        kg._cache[key] = S
    return kg._cache[key]


def structural_feature(kg: TemporalKG, h, r, t, u, cfg: FeatureConfig) -> float:
    kg._check_entity(h, t)
    kg._check_relation(r)
    return float(feature_matrix(kg, u, cfg)[h, t])


# ---------------------------------------------------------------------------
# candidates


def candidate_set(kg: TemporalKG, h, r, u, K, seed=0) -> np.ndarray:
    """Observed tails of (h, r, u) padded with uniformly drawn distinct negatives; sorted."""
    if K > kg.n_entities:
        raise DomainError(f"K={K} exceeds the number of entities {kg.n_entities}")
    if K < 2:
        raise DomainError("K must be >= 2")
    pos = kg.positives(h, r, u)[:K]
    if K == kg.n_entities:
        return np.arange(K)
    rng = np.random.default_rng([int(seed), int(h), int(r), int(u)])
    pool = np.setdiff1d(np.arange(kg.n_entities), pos)
    extra = rng.choice(pool, size=K - len(pos), replace=False)
    return np.sort(np.concatenate([pos, extra]).astype(np.int64))
