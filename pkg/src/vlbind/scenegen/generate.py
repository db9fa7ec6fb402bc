"""Dataset generation: conjunction sets and the K x N x N trial protocol."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigError, InvariantError
from .palette import COLOR_NAMES, SHAPES
from .types import Dataset, GeneratorConfig, ObjectSpec, SceneSpec

PCA_CONJUNCTIONS: tuple[tuple[str, str], ...] = (
    ("red", "circle"),
    ("green", "triangle"),
    ("blue", "square"),
    ("purple", "star"),
    ("yellow", "heart"),
    ("orange", "cross"),
)


@dataclass(frozen=True)
class GridPreset:
    grid: tuple[int, int]
    image_patches: tuple[int, int]
    low: tuple[int, int]  # (n colors, n shapes), full product
    high: tuple[int, int]  # candidate pool for max-min selection
    cells: Optional[tuple[tuple[int, int], ...]] = None
    fixed: Optional[tuple[tuple[str, str], ...]] = None


PRESETS: dict[str, GridPreset] = {
    "2x2": GridPreset((2, 2), (10, 10), low=(2, 2), high=(4, 4)),
    "3x3": GridPreset((3, 3), (14, 14), low=(3, 3), high=(9, 9)),
    "4x4": GridPreset((4, 4), (18, 18), low=(4, 4), high=(9, 9)),
    "3x2-pca": GridPreset(
        (3, 3),
        (14, 14),
        low=(6, 6),
        high=(6, 6),
        cells=tuple((r, c) for r in range(3) for c in (0, 2)),
        fixed=PCA_CONJUNCTIONS,
    ),
}


def most_distinct_conjunctions(n_colors: int, n_shapes: int, count: int) -> list[tuple[str, str]]:
    """Greedy max-min selection of ``count`` conjunctions.

    Distinctness between two conjunctions is the number of attributes
    (color, shape) on which they differ. Each step adds the candidate with
    the largest minimum distinctness to the chosen set, breaking ties by the
    largest total distinctness and then by palette order.
    """
    if n_colors > len(COLOR_NAMES) or n_shapes > len(SHAPES):
        raise ConfigError("candidate pool exceeds the palette")
    pool = [(c, s) for c in range(n_colors) for s in range(n_shapes)]
    if count > len(pool):
        raise ConfigError(f"cannot pick {count} conjunctions from {len(pool)}")
    chosen = [pool[0]]
    rest = pool[1:]
    while len(chosen) < count:
        best, best_key = None, None
        for cand in rest:
            d = [(cand[0] != c) + (cand[1] != s) for c, s in chosen]
            key = (min(d), sum(d))
            if best_key is None or key > best_key:
                best, best_key = cand, key
        chosen.append(best)
        rest.remove(best)
    return [(COLOR_NAMES[c], SHAPES[s]) for c, s in chosen]


def conjunction_set(config: GeneratorConfig) -> tuple[tuple[str, str], ...]:
    if config.conjunctions is not None:
        return tuple(tuple(c) for c in config.conjunctions)
    preset = PRESETS.get(config.grid)
    if preset is None:
        raise ConfigError(f"grid {config.grid!r} has no preset; pass explicit conjunctions")
    if preset.fixed is not None:
        return preset.fixed
    n = len(_cells(config))
    if config.entropy == "low":
        nc, ns = preset.low
        full = [(COLOR_NAMES[c], SHAPES[s]) for c in range(nc) for s in range(ns)]
        return tuple(full[:n]) if n < len(full) else tuple(full)
    return tuple(most_distinct_conjunctions(*preset.high, count=n))


def _grid_geometry(config: GeneratorConfig) -> tuple[tuple[int, int], tuple[int, int]]:
    preset = PRESETS.get(config.grid)
    if preset is not None:
        return preset.grid, config.image_patches or preset.image_patches
    try:
        rows, cols = (int(x) for x in config.grid.lower().split("x"))
    except ValueError:
        raise ConfigError(f"unparseable grid {config.grid!r}") from None
    if config.image_patches is None:
        raise ConfigError(f"custom grid {config.grid!r} needs image_patches")
    return (rows, cols), tuple(config.image_patches)


def _cells(config: GeneratorConfig) -> tuple[tuple[int, int], ...]:
    if config.cells is not None:
        return tuple(tuple(c) for c in config.cells)
    preset = PRESETS.get(config.grid)
    if preset is not None and preset.cells is not None:
        return preset.cells
    (rows, cols), _ = _grid_geometry(config)
    return tuple((r, c) for r in range(rows) for c in range(cols))


def generate_dataset(config: GeneratorConfig) -> Dataset:
    """Build K trials for every (object identity, grid position) pair.

    Each trial places the identity at the position as the target and
    permutes the other N-1 identities across the remaining positions.
    """
    if config.k < 1:
        raise ConfigError("k must be >= 1")
    grid, image_patches = _grid_geometry(config)
    cells = tuple(sorted(_cells(config)))
    conj = conjunction_set(config)
    n = len(cells)
    if len(conj) < n:
        raise ConfigError(f"conjunction set has {len(conj)} entries for {n} grid positions")
    conj = conj[:n]
    rng = np.random.default_rng(config.seed)
    scenes = []
    tid = 0
    for ident in range(n):
        others = [i for i in range(n) if i != ident]
        for pos in range(n):
            free = [p for p in range(n) if p != pos]
            for _ in range(config.k):
                perm = rng.permutation(len(others))
                placement = {pos: ident}
                for p, j in zip(free, perm):
                    placement[p] = others[j]
                objects = tuple(
                    ObjectSpec(conj[placement[p]][0], conj[placement[p]][1], cells[p]) for p in range(n)
                )
                scenes.append(
                    SceneSpec(
                        grid=grid,
                        image_patches=image_patches,
                        objects=objects,
                        target_index=pos,
                        entropy=config.entropy,
                        trial_id=tid,
                    )
                )
                tid += 1
    ds = Dataset(scenes=tuple(scenes), config=config, conjunction_set=conj, cells=cells)
    check_dataset(ds)
    return ds


def check_dataset(ds: Dataset) -> None:
    """Raise :class:`InvariantError` unless the trial protocol holds."""
    n, k = len(ds.cells), ds.config.k
    if len(ds.scenes) != k * n * n:
        raise InvariantError("scenegen", f"{len(ds.scenes)} trials, expected {k}*{n}*{n}")
    counts: dict[tuple, int] = {}
    for s in ds.scenes:
        t = s.target
        key = (t.conjunction, t.cell)
        counts[key] = counts.get(key, 0) + 1
        h, w = s.image_size
        if h % s.patch_px or w % s.patch_px:
            raise InvariantError("scenegen", f"image {h}x{w} not patch aligned")
    if len(counts) != n * n or set(counts.values()) != {k}:
        raise InvariantError("scenegen", "(identity, position) combinations are not balanced")


def permute_objects(scene: SceneSpec) -> list[SceneSpec]:
    """Every assignment of the scene's objects to its occupied cells.

    The identity permutation comes first. The target (if any) follows its
    object, not its cell.
    """
    m = len(scene.objects)
    if m > 6:
        raise ConfigError(f"{m} objects: {m}! permutations exceeds the guard (6)")
    cells = [o.cell for o in scene.objects]
    out = []
    for perm in itertools.permutations(range(m)):
        objects = tuple(
            ObjectSpec(o.color, o.shape, cells[perm[i]]) for i, o in enumerate(scene.objects)
        )
        out.append(scene.with_objects(objects, target_index=scene.target_index))
    return out


def two_object_scene(
    base: SceneSpec, described: int, target: int
) -> SceneSpec:
    """Reduce ``base`` to two objects: ``described`` (object A) and ``target`` (B)."""
    objs = (base.objects[described], base.objects[target])
    return base.with_objects(objs, target_index=1)
