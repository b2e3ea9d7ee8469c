"""Score smoothing: divergence-weighted k-NN blending of pooled distributions.

For every masked patch the query's own distribution s is blended with its
k nearest pool entries:

    s_hat = (1 - alpha) * s + alpha * sum_i w_i * u_i

where the u_i are the k pool entries closest to s (JS or KL divergence for
score keys, l2 for feature/patch keys) and w is a temperature softmax over
negated distances. alpha = 0 disables smoothing; tau -> inf approaches a
plain average. The same algebra applies to unconstrained feature vectors
(pixel-space model adaptation) and to output grids from multiple
autoregressive sequences.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .divergence import CodebookDistribution, pairwise_divergence
from .errors import ConfigError, DimensionError, ValidationError
from .pool import PoolEntry, PromptPool, ScoreGrid, merge_all_patches


class DivergenceKind(enum.Enum):
    JS = "js"
    KL = "kl"


class NeighborKey(enum.Enum):
    SCORE = "score"      # distributions compared by divergence
    FEATURE = "feature"  # intermediate features compared by l2
    PATCH = "patch"      # decoded patch values compared by l2


class Aggregation(enum.Enum):
    WEIGHTED = "weighted"
    AVERAGE = "average"
    NEAREST = "nearest"


class PoolScope(enum.Enum):
    PER_PATCH = "patch"
    ALL_PATCH = "all"


@dataclass(frozen=True)
class SmoothingConfig:
    """Hyperparameters of one smoothing run.

    ``k`` defaults to min(5, m). ``alpha`` weighs the pooled signal
    (1.0 suits segmentation/colorization style tasks, 0.7 detection);
    ``tau`` is the softmax temperature (1.0 default).
    """

    m: int
    k: int | None = None
    alpha: float = 1.0
    tau: float = 1.0
    divergence: DivergenceKind = DivergenceKind.JS
    key: NeighborKey = NeighborKey.SCORE
    aggregation: Aggregation = Aggregation.WEIGHTED
    scope: PoolScope = PoolScope.PER_PATCH

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.k is None:
            object.__setattr__(self, "k", min(5, self.m))
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")

    @classmethod
    def feature_defaults(cls, m: int = 2, **overrides) -> "SmoothingConfig":
        """Defaults for smoothing intermediate features of pixel-space models."""
        params = dict(m=m, tau=25.0, alpha=0.5, key=NeighborKey.FEATURE)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def sequence_defaults(cls, n_sequences: int = 2, **overrides) -> "SmoothingConfig":
        """Defaults for aggregating output grids of multiple prompt sequences."""
        params = dict(m=n_sequences, tau=1.0, alpha=0.8)
        params.update(overrides)
        return cls(**params)

    def echo(self) -> dict:
        return {
            "m": self.m,
            "k": self.k,
            "alpha": self.alpha,
            "tau": self.tau,
            "divergence": self.divergence.value,
            "key": self.key.value,
            "aggregation": self.aggregation.value,
            "scope": self.scope.value,
        }


@dataclass(frozen=True)
class Neighbor:
    """A selected pool entry with its distance to the query key."""

    pair_index: int
    patch_index: int
    distance: float
    distribution: CodebookDistribution | None = None


@dataclass(frozen=True)
class NeighborSet:
    """Selected neighbors in ascending-distance order."""

    entries: tuple[Neighbor, ...]

    def __post_init__(self):
        d = [n.distance for n in self.entries]
        if any(d[i] > d[i + 1] for i in range(len(d) - 1)):
            raise ValidationError("neighbor distances must be nondecreasing")

    def __len__(self) -> int:
        return len(self.entries)

    def distances(self) -> np.ndarray:
        return np.array([n.distance for n in self.entries], dtype=np.float64)


@dataclass(frozen=True)
class SmoothedGrid:
    """Smoothed per-patch distributions plus selection diagnostics.

    ``diagnostics[l]`` lists (pair index, patch index, distance, weight)
    for every neighbor that contributed at patch l.
    """

    distributions: tuple[CodebookDistribution, ...]
    diagnostics: tuple[tuple[tuple[int, int, float, float], ...], ...] = ()

    def __len__(self) -> int:
        return len(self.distributions)

    def as_array(self) -> np.ndarray:
        return np.stack([d.probs for d in self.distributions])


def _ordered_indices(distances: np.ndarray, pair_idx, patch_idx) -> np.ndarray:
    # distance, then pair index, then patch index; infinities sort last
    return np.lexsort((np.asarray(patch_idx), np.asarray(pair_idx), distances))


def _entry_distances(query_key, entries: Sequence[PoolEntry], config: SmoothingConfig) -> np.ndarray:
    if config.key is NeighborKey.SCORE:
        return pairwise_divergence(
            query_key, [e.distribution for e in entries], kind=config.divergence.value
        )
    attr = "feature_key" if config.key is NeighborKey.FEATURE else "patch_key"
    query = np.asarray(query_key, dtype=np.float64)
    out = np.empty(len(entries), dtype=np.float64)
    for j, e in enumerate(entries):
        vec = getattr(e, attr)
        if vec is None:
            raise ConfigError(f"pool entries carry no {attr} but config selects by it")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != query.shape:
            raise DimensionError(f"{attr} shape {vec.shape} != query key shape {query.shape}")
        out[j] = np.linalg.norm(vec - query)
    return out


def knn_select(query_key, entries: Sequence[PoolEntry], k: int, config: SmoothingConfig) -> NeighborSet:
    """The k pool entries nearest the query key, ascending distance.

    Ties break by pair index then patch index; k larger than the pool
    clamps silently to the pool size.
    """
    if not entries:
        raise ValidationError("cannot select neighbors from an empty pool")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    distances = _entry_distances(query_key, entries, config)
    order = _ordered_indices(
        distances,
        [e.pair_index for e in entries],
        [e.patch_index for e in entries],
    )[: min(k, len(entries))]
    return NeighborSet(
        entries=tuple(
            Neighbor(
                pair_index=entries[j].pair_index,
                patch_index=entries[j].patch_index,
                distance=float(distances[j]),
                distribution=entries[j].distribution,
            )
            for j in order
        )
    )


def softmax_weights(distances, tau: float) -> np.ndarray:
    """Temperature softmax over negated distances, shifted for stability.

    Infinite distances receive weight 0; normalization runs over the
    finite ones only.
    """
    if tau <= 0.0:
        raise ConfigError(f"tau must be positive, got {tau}")
    d = np.asarray(distances, dtype=np.float64)
    finite = np.isfinite(d)
    if d.size == 0 or not finite.any():
        raise ValidationError("softmax weights need at least one finite distance")
    w = np.zeros_like(d)
    w[finite] = np.exp(-(d[finite] - d[finite].min()) / tau)
    return w / w.sum()


def _aggregation_weights(neighbors: NeighborSet, config: SmoothingConfig) -> np.ndarray:
    if config.aggregation is Aggregation.WEIGHTED:
        return softmax_weights(neighbors.distances(), config.tau)
    if config.aggregation is Aggregation.AVERAGE:
        return np.full(len(neighbors), 1.0 / len(neighbors))
    weights = np.zeros(len(neighbors))
    weights[0] = 1.0
    return weights


def _blend(s: np.ndarray, neighbors: NeighborSet, config: SmoothingConfig) -> tuple[np.ndarray, np.ndarray]:
    weights = _aggregation_weights(neighbors, config)
    if config.aggregation is Aggregation.NEAREST:
        pooled = neighbors.entries[0].distribution.probs * weights[0]
    else:
        pooled = np.zeros_like(s)
        for w, neighbor in zip(weights, neighbors.entries):
            pooled += w * neighbor.distribution.probs
    return (1.0 - config.alpha) * s + config.alpha * pooled, weights


def smooth_patch(
    s: CodebookDistribution, neighbors: NeighborSet, config: SmoothingConfig
) -> CodebookDistribution:
    """Blend one patch distribution with its selected neighbors.

    An empty neighbor set returns s unchanged. The convex combination
    already lies on the simplex; renormalization fires only if float
    drift exceeds 1e-9.
    """
    if len(neighbors) == 0:
        return s
    for n in neighbors.entries:
        if n.distribution is None or len(n.distribution) != len(s):
            raise DimensionError("neighbor distributions must match the query length")
    vec, _ = _blend(s.probs, neighbors, config)
    total = float(vec.sum())
    if abs(total - 1.0) > 1e-9:
        vec = vec / total
    return CodebookDistribution(vec)


def _query_key(grid: ScoreGrid, l: int, config: SmoothingConfig):
    if config.key is NeighborKey.SCORE:
        return grid.distributions[l]
    keys = grid.feature_keys if config.key is NeighborKey.FEATURE else grid.patch_keys
    if keys is None:
        raise ConfigError(f"query grid carries no {config.key.value} keys")
    return keys[l]


def smooth_grid(query_grid: ScoreGrid, pool: PromptPool, config: SmoothingConfig) -> SmoothedGrid:
    """Apply neighbor selection and blending independently at every patch."""
    if len(query_grid) != pool.patch_count:
        raise DimensionError(
            f"query grid has {len(query_grid)} patches, pool has {pool.patch_count}"
        )
    if query_grid.codebook_size != pool.codebook_size:
        raise DimensionError(
            f"codebook size mismatch: grid {query_grid.codebook_size}, pool {pool.codebook_size}"
        )
    flat = merge_all_patches(pool) if config.scope is PoolScope.ALL_PATCH else None

    smoothed: list[CodebookDistribution] = []
    diagnostics: list[tuple[tuple[int, int, float, float], ...]] = []
    for l in range(pool.patch_count):
        candidates = flat if flat is not None else pool.per_patch[l]
        neighbors = knn_select(_query_key(query_grid, l, config), candidates, config.k, config)
        vec, weights = _blend(query_grid.distributions[l].probs, neighbors, config)
        total = float(vec.sum())
        if abs(total - 1.0) > 1e-9:
            vec = vec / total
        smoothed.append(CodebookDistribution(vec))
        diagnostics.append(
            tuple(
                (n.pair_index, n.patch_index, n.distance, float(w))
                for n, w in zip(neighbors.entries, weights)
            )
        )
    return SmoothedGrid(distributions=tuple(smoothed), diagnostics=tuple(diagnostics))


def smooth_features(query_features, pools, config: SmoothingConfig) -> np.ndarray:
    """The same blending over unconstrained vectors with l2 distances.

    ``query_features`` is (L, dim); ``pools[l]`` the candidate vectors for
    patch l. No simplex postcondition applies.
    """
    query = np.asarray(query_features, dtype=np.float64)
    if query.ndim != 2:
        raise DimensionError(f"query features must be (L, dim), got shape {query.shape}")
    if len(pools) != query.shape[0]:
        raise DimensionError(f"{len(pools)} pools for {query.shape[0]} patches")

    out = np.empty_like(query)
    for l in range(query.shape[0]):
        candidates = np.asarray(pools[l], dtype=np.float64)
        if candidates.ndim != 2 or candidates.shape[1] != query.shape[1]:
            raise DimensionError(
                f"pool at patch {l} has shape {candidates.shape}, expected (*, {query.shape[1]})"
            )
        if candidates.shape[0] == 0:
            out[l] = query[l]
            continue
        distances = np.linalg.norm(candidates - query[l], axis=1)
        order = _ordered_indices(distances, np.arange(len(distances)), np.zeros(len(distances)))
        chosen = order[: min(config.k, len(distances))]
        if config.aggregation is Aggregation.WEIGHTED:
            weights = softmax_weights(distances[chosen], config.tau)
        elif config.aggregation is Aggregation.AVERAGE:
            weights = np.full(len(chosen), 1.0 / len(chosen))
        else:
            weights = np.zeros(len(chosen))
            weights[0] = 1.0
        if config.aggregation is Aggregation.NEAREST:
            pooled = candidates[chosen[0]] * weights[0]
        else:
            pooled = np.zeros(query.shape[1])
            for w, j in zip(weights, chosen):
                pooled += w * candidates[j]
        out[l] = (1.0 - config.alpha) * query[l] + config.alpha * pooled
    return out


def aggregate_sequences(grids: Sequence[ScoreGrid], config: SmoothingConfig) -> SmoothedGrid:
    """Fuse output grids from several prompt sequences into one.

    Grid 0 plays the query role; grids 1..n form a per-patch pool of
    width n. With exactly two grids this reduces to a single weighted
    sum controlled by alpha.
    """
    if not grids:
        raise ValidationError("need at least one grid to aggregate")
    first = grids[0]
    for g in grids[1:]:
        if len(g) != len(first) or g.codebook_size != first.codebook_size:
            raise DimensionError("sequence grids disagree in patch count or codebook size")
    if len(grids) == 1:
        return SmoothedGrid(distributions=first.distributions, diagnostics=())

    per_patch = tuple(
        tuple(
            PoolEntry(pair_index=i, patch_index=l, distribution=grids[i].distributions[l])
            for i in range(1, len(grids))
        )
        for l in range(len(first))
    )
    pool = PromptPool(per_patch=per_patch, prompts=(), mode=None, m=len(grids) - 1)
    return smooth_grid(first, pool, config)
