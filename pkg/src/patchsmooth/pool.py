"""Prompt canvases, the scorer interface, and prompt-pool construction.

A prompt is the symbolic four-cell canvas [in-context input, in-context
output, anchor, blank region]; scoring it yields one probability
distribution per masked patch. A pool collects, for every patch slot,
the distributions obtained from several prompts built around different
in-context pairs. Backends must be deterministic: scoring the same
prompt twice yields bitwise-identical grids, which makes pools cacheable.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .divergence import CodebookDistribution, CodebookSpec
from .errors import ConfigError, DimensionError, MissingItemError, ValidationError
from .retrieval import RetrievedSet
from .tensorfile import read_tensor, write_tensor


@dataclass(frozen=True)
class PromptSpec:
    """Symbolic four-cell canvas; ids are resolved by the active backend."""

    in_context_input: str
    in_context_output: str
    anchor: str
    masked_region: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.masked_region
        if rows < 1 or cols < 1:
            raise ValidationError(f"masked region must be at least 1x1, got {self.masked_region}")

    @property
    def patch_count(self) -> int:
        return self.masked_region[0] * self.masked_region[1]


@dataclass(frozen=True)
class ScoreGrid:
    """Per-patch assignment-score distributions from one prompt.

    ``feature_keys`` / ``patch_keys`` are optional (L, dim) arrays used when
    neighbor selection keys off intermediate features or decoded patches
    instead of the scores themselves.
    """

    distributions: tuple[CodebookDistribution, ...]
    prompt: PromptSpec | None = None
    feature_keys: np.ndarray | None = field(default=None, repr=False)
    patch_keys: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.distributions:
            raise ValidationError("score grid has no patches")
        sizes = {len(d) for d in self.distributions}
        if len(sizes) != 1:
            raise DimensionError(f"inconsistent codebook sizes in grid: {sorted(sizes)}")
        if self.prompt is not None and len(self.distributions) != self.prompt.patch_count:
            raise DimensionError(
                f"grid has {len(self.distributions)} patches, prompt masks {self.prompt.patch_count}"
            )
        for name in ("feature_keys", "patch_keys"):
            keys = getattr(self, name)
            if keys is None:
                continue
            keys = np.asarray(keys, dtype=np.float64)
            if keys.ndim != 2 or keys.shape[0] != len(self.distributions):
                raise DimensionError(f"{name} must be (L, dim), got {keys.shape}")
            keys.flags.writeable = False
            object.__setattr__(self, name, keys)

    def __len__(self) -> int:
        return len(self.distributions)

    @property
    def codebook_size(self) -> int:
        return len(self.distributions[0])

    def as_array(self) -> np.ndarray:
        return np.stack([d.probs for d in self.distributions])


class ScorerBackend(Protocol):
    """Deterministic mapping from prompts to score grids."""

    @property
    def codebook(self) -> CodebookSpec: ...

    @property
    def grid_shape(self) -> tuple[int, int]: ...

    def pair_for(self, item_id: str) -> tuple[str, str]:
        """Resolve an item id to its (input id, output id) in-context pair."""
        ...

    def score(self, prompt: PromptSpec) -> ScoreGrid: ...


class PoolMode(enum.Enum):
    """Anchor/pair configurations for pool construction."""

    Q = "q"        # each retrieved pair, query as anchor (default)
    RAND = "rand"  # best pair fixed, random retrieved inputs as anchors
    SEQ = "seq"    # best pair fixed, remaining inputs as anchors in order
    SELF = "self"  # each retrieved pair, its own input as anchor


@dataclass(frozen=True)
class PoolEntry:
    """One pooled distribution with its (pair index, patch index) provenance."""

    pair_index: int
    patch_index: int
    distribution: CodebookDistribution
    feature_key: np.ndarray | None = field(default=None, repr=False)
    patch_key: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class PromptPool:
    """Per-patch candidate distributions plus construction provenance."""

    per_patch: tuple[tuple[PoolEntry, ...], ...]
    prompts: tuple[PromptSpec, ...]
    mode: PoolMode | None
    m: int

    def __post_init__(self):
        if not self.per_patch:
            raise ValidationError("pool has no patch slots")
        widths = {len(slot) for slot in self.per_patch}
        if len(widths) != 1:
            raise ValidationError(f"patch slots disagree in width: {sorted(widths)}")
        for l, slot in enumerate(self.per_patch):
            indices = [e.pair_index for e in slot]
            if len(set(indices)) != len(indices):
                raise ValidationError(f"duplicate provenance indices at patch {l}")
            for e in slot:
                if e.patch_index != l:
                    raise ValidationError(
                        f"entry with patch index {e.patch_index} stored in slot {l}"
                    )

    @property
    def patch_count(self) -> int:
        return len(self.per_patch)

    @property
    def width(self) -> int:
        return len(self.per_patch[0])

    @property
    def codebook_size(self) -> int:
        return len(self.per_patch[0][0].distribution)


def score_prompt(backend: ScorerBackend, prompt: PromptSpec) -> ScoreGrid:
    """Score one prompt and check the backend honored the grid contract."""
    grid = backend.score(prompt)
    if len(grid) != prompt.patch_count:
        raise DimensionError(
            f"backend produced {len(grid)} patches for a {prompt.patch_count}-patch prompt"
        )
    return grid


def build_pool(
    backend: ScorerBackend,
    retrieved: RetrievedSet,
    query: str,
    mode: PoolMode = PoolMode.Q,
    seed: int | None = None,
) -> PromptPool:
    """Construct the per-patch prompt pool for one query.

    Mode Q scores [x_i, y_i, query] for every retrieved pair i; SELF uses
    x_i itself as anchor. SEQ and RAND hold the best pair (x_1, y_1) fixed
    and vary only the anchor: SEQ walks x_2..x_m in order, RAND draws m-1
    anchors uniformly without replacement from all retrieved inputs (the
    best input itself included), so both produce pools of width m-1.
    """
    item_ids = list(retrieved.ids)
    m = len(item_ids)
    if m < 1:
        raise ValidationError("retrieved set is empty")
    if mode in (PoolMode.SEQ, PoolMode.RAND) and m < 2:
        raise ConfigError(f"mode {mode.value} needs m >= 2, got {m}")
    if mode is PoolMode.RAND and seed is None:
        raise ConfigError("mode rand requires a seed")

    region = backend.grid_shape
    prompts: list[PromptSpec] = []
    indices: list[int] = []

    if mode in (PoolMode.Q, PoolMode.SELF):
        for i, item in enumerate(item_ids, start=1):
            pair_in, pair_out = backend.pair_for(item)
            anchor = query if mode is PoolMode.Q else pair_in
            prompts.append(PromptSpec(pair_in, pair_out, anchor, region))
            indices.append(i)
    else:
        best_in, best_out = backend.pair_for(item_ids[0])
        if mode is PoolMode.SEQ:
            anchor_positions = range(1, m)
        else:
            rng = np.random.default_rng(seed)
            anchor_positions = [int(p) for p in rng.choice(m, size=m - 1, replace=False)]
        for pos in anchor_positions:
            anchor_in, _ = backend.pair_for(item_ids[pos])
            prompts.append(PromptSpec(best_in, best_out, anchor_in, region))
            indices.append(pos + 1)

    grids = [score_prompt(backend, p) for p in prompts]
    patch_count = region[0] * region[1]
    per_patch = tuple(
        tuple(
            PoolEntry(
                pair_index=indices[j],
                patch_index=l,
                distribution=grids[j].distributions[l],
                feature_key=None if grids[j].feature_keys is None else grids[j].feature_keys[l],
                patch_key=None if grids[j].patch_keys is None else grids[j].patch_keys[l],
            )
            for j in range(len(prompts))
        )
        for l in range(patch_count)
    )
    return PromptPool(per_patch=per_patch, prompts=tuple(prompts), mode=mode, m=m)


def merge_all_patches(pool: PromptPool) -> tuple[PoolEntry, ...]:
    """Flatten the pool into one list over all patches, provenance intact."""
    return tuple(entry for slot in pool.per_patch for entry in slot)


class FileScorerBackend:
    """Scorer fed by exported score tensors.

    The directory holds a ``manifest.json`` naming the grid geometry,
    codebook size, patch ordering used by the exporter, the input->output
    pair mapping, and one (L, |V|) f32 tensor file per prompt keyed by
    ``input__output__anchor``. Rows are renormalized on import.
    """

    def __init__(self, scores_dir: str | Path):
        self._dir = Path(scores_dir)
        manifest_path = self._dir / "manifest.json"
        if not manifest_path.exists():
            raise MissingItemError(f"no manifest.json in {self._dir}")
        manifest = json.loads(manifest_path.read_text())
        self._grid = (int(manifest["grid"][0]), int(manifest["grid"][1]))
        self._codebook = CodebookSpec(size=int(manifest["codebook_size"]))
        self._pairs = dict(manifest["pairs"])
        self._prompt_files = dict(manifest["prompts"])
        self.patch_order = manifest.get("patch_order", "row-major")

    @property
    def codebook(self) -> CodebookSpec:
        return self._codebook

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self._grid

    def pair_for(self, item_id: str) -> tuple[str, str]:
        if item_id not in self._pairs:
            raise MissingItemError(f"no in-context pair registered for {item_id!r}")
        return item_id, self._pairs[item_id]

    def score(self, prompt: PromptSpec) -> ScoreGrid:
        key = f"{prompt.in_context_input}__{prompt.in_context_output}__{prompt.anchor}"
        if key not in self._prompt_files:
            raise MissingItemError(f"no exported scores for prompt {key!r}")
        array, _ = read_tensor(self._dir / self._prompt_files[key])
        if array.ndim != 2 or array.shape != (prompt.patch_count, self._codebook.size):
            raise DimensionError(
                f"exported tensor {key!r} has shape {array.shape}, "
                f"expected {(prompt.patch_count, self._codebook.size)}"
            )
        rows = np.asarray(array, dtype=np.float64)
        return ScoreGrid(
            distributions=tuple(CodebookDistribution.from_scores(row) for row in rows),
            prompt=prompt,
        )


def save_pool(pool: PromptPool, path: str | Path) -> None:
    """Serialize to a (width, L, |V|) f32 tensor with a provenance sidecar."""
    array = np.stack(
        [
            np.stack([pool.per_patch[l][j].distribution.probs for l in range(pool.patch_count)])
            for j in range(pool.width)
        ]
    ).astype(np.float32)
    meta = {
        "schema_version": 1,
        "kind": "prompt-pool",
        "mode": pool.mode.value if pool.mode is not None else None,
        "m": pool.m,
        "patch_count": pool.patch_count,
        "codebook_size": pool.codebook_size,
        "pair_indices": [pool.per_patch[0][j].pair_index for j in range(pool.width)],
        "prompts": [
            {
                "in_context_input": p.in_context_input,
                "in_context_output": p.in_context_output,
                "anchor": p.anchor,
                "masked_region": list(p.masked_region),
            }
            for p in pool.prompts
        ],
    }
    write_tensor(array, path, meta=meta)


def load_pool(path: str | Path) -> PromptPool:
    array, meta = read_tensor(path)
    if meta.get("kind") != "prompt-pool":
        raise ValidationError(f"{path} is not a pool file")
    if array.ndim != 3:
        raise DimensionError(f"pool tensor must be rank 3, got shape {array.shape}")
    width, patch_count, _ = array.shape
    prompts = tuple(
        PromptSpec(
            p["in_context_input"],
            p["in_context_output"],
            p["anchor"],
            (int(p["masked_region"][0]), int(p["masked_region"][1])),
        )
        for p in meta["prompts"]
    )
    pair_indices = [int(i) for i in meta["pair_indices"]]
    rows = np.asarray(array, dtype=np.float64)
    per_patch = tuple(
        tuple(
            PoolEntry(
                pair_index=pair_indices[j],
                patch_index=l,
                distribution=CodebookDistribution.from_scores(rows[j, l]),
            )
            for j in range(width)
        )
        for l in range(patch_count)
    )
    return PromptPool(
        per_patch=per_patch,
        prompts=prompts,
        mode=PoolMode(meta["mode"]) if meta.get("mode") else None,
        m=int(meta["m"]),
    )


def save_grid(grid: ScoreGrid, path: str | Path, extra_meta: dict | None = None) -> None:
    """Serialize a score grid to an (L, |V|) f32 tensor."""
    meta = {"schema_version": 1, "kind": "score-grid"}
    if grid.prompt is not None:
        meta["prompt"] = {
            "in_context_input": grid.prompt.in_context_input,
            "in_context_output": grid.prompt.in_context_output,
            "anchor": grid.prompt.anchor,
            "masked_region": list(grid.prompt.masked_region),
        }
    if extra_meta:
        meta.update(extra_meta)
    write_tensor(grid.as_array().astype(np.float32), path, meta=meta)


def load_grid(path: str | Path) -> ScoreGrid:
    array, meta = read_tensor(path)
    if array.ndim != 2:
        raise DimensionError(f"score grid tensor must be rank 2, got shape {array.shape}")
    prompt = None
    if "prompt" in meta:
        p = meta["prompt"]
        prompt = PromptSpec(
            p["in_context_input"],
            p["in_context_output"],
            p["anchor"],
            (int(p["masked_region"][0]), int(p["masked_region"][1])),
        )
    rows = np.asarray(array, dtype=np.float64)
    return ScoreGrid(
        distributions=tuple(CodebookDistribution.from_scores(row) for row in rows),
        prompt=prompt,
    )
