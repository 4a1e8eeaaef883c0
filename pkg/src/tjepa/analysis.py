"""Representation diagnostics: KL divergence, distances, uniformity,
embedding variance, feature rankings and Kendall's tau."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .data import TabularDataset, encode_split
from .model import ModelState, represent
from .numeric import DimensionError

EXACT_PAIR_LIMIT = 2000


class AnalysisError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    values: np.ndarray  # (n, d*h), REG stripped
    checkpoint: str = ""
    epoch: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DimensionError(f"embedding matrix must be 2-d, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise AnalysisError("embedding matrix has non-finite entries")

    @classmethod
    def from_representations(cls, H: np.ndarray, **kw) -> "EmbeddingMatrix":
        H = np.asarray(H)
        return cls(H.reshape(H.shape[0], -1), **kw)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class FeatureRanking:
    order: np.ndarray  # feature indices, most salient first
    scores: np.ndarray
    method: str = "embedding_variance"
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=int)
        if sorted(self.order.tolist()) != list(range(len(self.order))):
            raise AnalysisError("ranking is not a permutation of feature indices")

    def rank_of(self, feature: int) -> int:
        """0-based position of ``feature`` (0 = most salient)."""
        return int(np.flatnonzero(self.order == feature)[0])

    def positions(self) -> np.ndarray:
        pos = np.empty(len(self.order), dtype=int)
        pos[self.order] = np.arange(len(self.order))
        return pos


# -- distributions and pairwise metrics ---------------------------------------------------------


def to_distribution(v) -> np.ndarray:
    """Softmax over the entries of a flattened embedding (64-bit)."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    z = np.exp(v - v.max())
    return z / z.sum()


def kl_divergence(P, Q, floor: float = 1e-12) -> float:
    """sum P log(P / Q) in nats with 0 log 0 = 0.

    Q is floored before the log, at ``min(floor, P)`` per entry, so that
    KL(P, P) stays exactly 0 even for entries below the floor.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise DimensionError(f"distributions differ in length: {P.shape} vs {Q.shape}")
    nz = P > 0
    p = P[nz]
    return float(np.sum(p * (np.log(p) - np.log(np.maximum(Q[nz], np.minimum(floor, p))))))


def _pairs(n: int, sample_cap: int, rng) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise AnalysisError(f"pairwise metrics need at least 2 samples, got {n}")
    if n <= sample_cap:
        return np.triu_indices(n, k=1)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n_pairs = sample_cap * (sample_cap - 1) // 2
    i = rng.integers(0, n, size=n_pairs)
    j = rng.integers(0, n - 1, size=n_pairs)
    j = np.where(j >= i, j + 1, j)  # uniform over ordered pairs with i != j
    return i, j


def _pairwise_sq_dist(X: np.ndarray, i: np.ndarray, j: np.ndarray, chunk: int = 200_000) -> np.ndarray:
    out = np.empty(len(i), dtype=np.float64)
    for s in range(0, len(i), chunk):
        diff = X[i[s : s + chunk]] - X[j[s : s + chunk]]
        out[s : s + chunk] = np.einsum("ij,ij->i", diff, diff)
    return out


def mean_pairwise(metric: str, E, sample_cap: int = EXACT_PAIR_LIMIT, rng=0) -> float:
    """Mean over unordered pairs of ``kl`` or ``euclidean``.

    Exact for n <= sample_cap; above that, as many uniformly drawn pairs as
    the exact computation on ``sample_cap`` rows would use.  KL is taken
    from row i's softmax distribution to row j's.
    """
    X = E.values if isinstance(E, EmbeddingMatrix) else np.asarray(E)
    X = X.astype(np.float64).reshape(len(X), -1)
    i, j = _pairs(len(X), sample_cap, rng)
    if metric == "euclidean":
        return float(np.mean(np.sqrt(_pairwise_sq_dist(X, i, j))))
    if metric == "kl":
        z = X - X.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        P = np.exp(logp)
        total = 0.0
        for s in range(0, len(i), 50_000):
            a, b = i[s : s + 50_000], j[s : s + 50_000]
            floor = np.minimum(1e-12, P[a])
            logq = np.where(P[b] >= floor, logp[b], np.log(floor))
            total += float(np.sum(np.where(P[a] > 0, P[a] * (logp[a] - logq), 0.0)))
        return total / len(i)
    raise AnalysisError(f"unknown pairwise metric {metric!r}")


def uniformity(E, t: float = 2.0, sample_cap: int = EXACT_PAIR_LIMIT, rng=0) -> float:
    """-log mean_{pairs} exp(-t ||u - v||^2) on raw flattened embeddings.

    Evaluated with log-sum-exp so that widely spread embeddings do not
    underflow to log(0).
    """
    if t <= 0:
        raise AnalysisError("uniformity temperature t must be > 0")
    X = E.values if isinstance(E, EmbeddingMatrix) else np.asarray(E)
    X = X.astype(np.float64).reshape(len(X), -1)
    i, j = _pairs(len(X), sample_cap, rng)
    a = -t * _pairwise_sq_dist(X, i, j)
    top = a.max()
    return float(-(top + math.log(np.mean(np.exp(a - top)))))


# -- embedding variance / rankings --------------------------------------------------------------


def embedding_variance(H) -> np.ndarray:
    """Per-feature population variance over hidden dims of ``H[i] - mu``,
    where ``mu`` is the per-hidden-dimension mean over features."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise DimensionError(f"expected a (d, h) matrix, got {H.shape}")
    centered = H - H.mean(axis=0, keepdims=True)
    return centered.var(axis=1)


def ranking_from_scores(scores, method: str = "embedding_variance", names=None) -> FeatureRanking:
    """Descending score order; ties go to the lower feature index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return FeatureRanking(order, scores, method, list(names or []))


def mean_embedding_variance(H: np.ndarray) -> np.ndarray:
    """Average of per-sample scores over a stack of (n, d, h) representations."""
    H = np.asarray(H, dtype=np.float64)
    centered = H - H.mean(axis=1, keepdims=True)
    return centered.var(axis=2).mean(axis=0)


def rank_by_variance(state: ModelState, ds: TabularDataset, split: str = "train") -> FeatureRanking:
    H = represent(encode_split(ds, split).astype(state.params["embedding.index"].dtype), state)
    return ranking_from_scores(
        mean_embedding_variance(H), names=[f.name for f in ds.schema.features]
    )


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def kendall_tau(rank_a, rank_b) -> tuple[float, float]:
    """Kendall's tau-a between two rankings plus a two-sided p-value.

    Inputs are permutations (orders or position vectors); tau is computed on
    the position each item takes in both.  The p-value uses the normal
    approximation, var = 2(2n + 5) / (9 n (n - 1)).
    """
    a = np.asarray(getattr(rank_a, "order", rank_a))
    b = np.asarray(getattr(rank_b, "order", rank_b))
    n = len(a)
    if len(b) != n:
        raise AnalysisError("rankings differ in length")
    if n < 2:
        raise AnalysisError("kendall_tau needs at least 2 items")
    for r in (a, b):
        if sorted(r.tolist()) != sorted(a.tolist()) or len(set(r.tolist())) != n:
            raise AnalysisError("rankings must be permutations of the same items")
    # position of each item in each ranking
    items = sorted(a.tolist())
    pos_a = np.array([a.tolist().index(x) for x in items])
    pos_b = np.array([b.tolist().index(x) for x in items])
    da = np.sign(pos_a[:, None] - pos_a[None, :])
    db = np.sign(pos_b[:, None] - pos_b[None, :])
    s = int(np.triu(da * db, k=1).sum())
    tau = s / (n * (n - 1) / 2)
    var = 2.0 * (2 * n + 5) / (9.0 * n * (n - 1))
    p = min(1.0, 2.0 * _normal_sf(abs(tau) / math.sqrt(var)))
    return float(tau), float(p)


# -- export ---------------------------------------------------------------------------------------------


def export_embeddings(state: ModelState, ds: TabularDataset, path, split: str = "test", meta=None) -> np.ndarray:
    X = encode_split(ds, split).astype(state.params["embedding.index"].dtype)
    if len(X) == 0:
        raise AnalysisError(f"split {split!r} has no rows to export")
    H = represent(X, state)
    flat = H.reshape(len(H), -1)
    info = {"split": split, "d": state.dims.d, "hidden": state.dims.hidden, "kind": "embeddings"}
    info.update(meta or {})
    container.save(path, {"embeddings": flat}, info)
    return flat


def load_embeddings(path) -> EmbeddingMatrix:
    tensors, meta = container.load(path)
    return EmbeddingMatrix(tensors["embeddings"], checkpoint=str(meta.get("checkpoint", "")), epoch=meta.get("epoch"))


def metric_report(H: np.ndarray, metrics, t: float = 2.0, sample_cap: int = EXACT_PAIR_LIMIT, seed: int = 0) -> dict:
    """Table-style row of the requested metrics for (n, d, h) representations."""
    report: dict = {}
    E = EmbeddingMatrix.from_representations(H)
    for name in metrics:
        if name == "kl":
            report["kl"] = mean_pairwise("kl", E, sample_cap, seed)
        elif name == "dist":
            report["dist"] = mean_pairwise("euclidean", E, sample_cap, seed)
        elif name == "uniformity":
            report["uniformity"] = uniformity(E, t, sample_cap, seed)
        elif name == "variance":
            report["variance"] = mean_embedding_variance(H).tolist()
        else:
            raise AnalysisError(f"unknown metric {name!r}")
    return report
