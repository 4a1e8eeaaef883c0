"""Context/target mask sampling.

Masks are length-``d`` bit vectors with 1 = dropped.  Target masks are drawn
first; the union of their visible features forms a pool that context masks
never see, so a context never contains a feature it is asked to predict.
REG tokens live outside the mask domain and are never masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import EncodedSample
from .numeric import ConfigurationError, DimensionError, Tensor


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray  # 1 = masked/dropped

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=np.uint8))

    @classmethod
    def from_visible(cls, d: int, visible) -> "Mask":
        bits = np.ones(d, dtype=np.uint8)
        bits[np.asarray(list(visible), dtype=int)] = 0
        return cls(bits)

    @classmethod
    def null(cls, d: int) -> "Mask":
        return cls(np.zeros(d, dtype=np.uint8))

    @property
    def d(self) -> int:
        return int(self.bits.size)

    @property
    def visible_count(self) -> int:
        return int(self.d - self.bits.sum())

    @property
    def visible(self) -> np.ndarray:
        return np.flatnonzero(self.bits == 0)

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash(self.bits.tobytes())


@dataclass
class MaskSet:
    context_masks: list[Mask]
    target_masks: list[Mask]
    rng_state: dict = field(default_factory=dict, repr=False)

    def key(self) -> tuple:
        return (
            tuple(m.bits.tobytes() for m in self.context_masks),
            tuple(m.bits.tobytes() for m in self.target_masks),
        )


def share_to_count(share: float, d: int, upper: int) -> int:
    """``clamp(round(share * d), 1, upper)`` with round-half-up."""
    return int(min(max(math.floor(share * d + 0.5), 1), upper))


def check_feasible(d: int, ctx_share, tgt_share) -> None:
    if d < 2:
        raise ConfigurationError(f"masking needs d >= 2, got d={d}")
    for label, (lo, hi) in (("context", ctx_share), ("target", tgt_share)):
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigurationError(
                f"{label} share bounds must satisfy 0 < min <= max < 1, got [{lo}, {hi}]"
            )
    max_target = share_to_count(tgt_share[1], d, d - 1)
    min_context = share_to_count(ctx_share[0], d, d - 1)
    if max_target + min_context > d:
        raise ConfigurationError(
            "infeasible masks: max target visible count + min context visible count <= d "
            f"violated ({max_target} + {min_context} > {d})"
        )


def _k_smallest(keys: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Indicator of the ``k[b]`` smallest entries of each row of ``keys``."""
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    return ranks < k[:, None]


def _counts(rng, share, d: int, upper) -> np.ndarray:
    s = rng.uniform(share[0], share[1], size=np.shape(upper))
    return np.clip(np.floor(s * d + 0.5), 1, upper).astype(int)


def sample_visible(
    batch: int,
    d: int,
    n_context: int,
    n_target: int,
    ctx_share,
    tgt_share,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Visible-feature indicators for ``batch`` independent mask sets.

    Returns ``(ctx, tgt)`` of shapes (batch, n_context, d) and
    (batch, n_target, d).  Each target keeps
    ``clamp(round(s * d), 1, d - 1)`` features with ``s ~ U(tgt_share)``.
    Targets are drawn one after another; a new target may bring in fresh
    features only while the union of target features (the pool) stays at
    most ``d - min_context``, so at least the minimum context count is
    always left over.  Contexts then draw
    ``clamp(round(s * d), 1, |free|)`` features from outside the pool.
    """
    check_feasible(d, ctx_share, tgt_share)
    if n_context < 1 or n_target < 1:
        raise ConfigurationError("need at least one context and one target mask")
    min_context = share_to_count(ctx_share[0], d, d - 1)
    pool_cap = d - min_context

    pool = np.zeros((batch, d), dtype=bool)
    tgt = np.zeros((batch, n_target, d), dtype=bool)
    for i in range(n_target):
        k = _counts(rng, tgt_share, d, np.full(batch, d - 1))
        budget = pool_cap - pool.sum(axis=1)
        # uniformly chosen `budget` fresh features join the candidates
        fresh_keys = np.where(pool, np.inf, rng.random((batch, d)))
        candidates = pool | _k_smallest(fresh_keys, budget)
        pick_keys = np.where(candidates, rng.random((batch, d)), np.inf)
        chosen = _k_smallest(pick_keys, k)
        tgt[:, i] = chosen
        pool |= chosen

    free = ~pool
    ctx = np.zeros((batch, n_context, d), dtype=bool)
    for i in range(n_context):
        k = _counts(rng, ctx_share, d, free.sum(axis=1))
        keys = np.where(free, rng.random((batch, d)), np.inf)
        ctx[:, i] = _k_smallest(keys, k)
    return ctx, tgt


def sample_mask_set(
    d: int,
    n_context: int,
    n_target: int,
    ctx_share,
    tgt_share,
    rng: np.random.Generator,
) -> MaskSet:
    state = rng.bit_generator.state
    ctx, tgt = sample_visible(1, d, n_context, n_target, ctx_share, tgt_share, rng)
    contexts = [Mask((~row).astype(np.uint8)) for row in ctx[0]]
    targets = [Mask((~row).astype(np.uint8)) for row in tgt[0]]
    return MaskSet(contexts, targets, state)


class MaskSampler:
    """Owns its generator; not meant to be shared between threads."""

    def __init__(self, d: int, n_context: int, n_target: int, ctx_share, tgt_share, seed=None):
        check_feasible(d, ctx_share, tgt_share)
        self.d = d
        self.n_context = n_context
        self.n_target = n_target
        self.ctx_share = tuple(ctx_share)
        self.tgt_share = tuple(tgt_share)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def sample(self) -> MaskSet:
        return sample_mask_set(
            self.d, self.n_context, self.n_target, self.ctx_share, self.tgt_share, self.rng
        )

    def sample_batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Visible-feature indicators, shapes (B, n_context, d) and (B, n_target, d)."""
        return sample_visible(
            batch_size, self.d, self.n_context, self.n_target, self.ctx_share, self.tgt_share, self.rng
        )


def apply_context_mask(encoded: EncodedSample, m: Mask) -> list[tuple[int, np.ndarray]]:
    """Keep unmasked features, each tagged with its original index."""
    if len(encoded) != m.d:
        raise DimensionError(f"sample has {len(encoded)} features but mask has length {m.d}")
    return [(int(j), encoded.values[j]) for j in m.visible]


def apply_target_mask(h_target: Tensor, m: Mask) -> Tensor:
    """Rows of ``h_target`` (d x h, REG already removed) where the mask is 0."""
    if h_target.ndim != 2 or h_target.shape[0] != m.d:
        raise DimensionError(f"target representation {h_target.shape} does not match mask length {m.d}")
    return h_target[m.visible]
