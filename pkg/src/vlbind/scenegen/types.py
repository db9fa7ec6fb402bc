"""Scene, dataset and task records.

All records are frozen dataclasses; a :class:`Dataset` is immutable once
built.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Optional

from ..errors import ConfigError, InvariantError

Entropy = Literal["high", "low"]
TaskKind = Literal["scene_description", "color_retrieval", "open_listing"]

PATCH_PX = 28
OBJECT_PATCHES = 2


@dataclass(frozen=True)
class ObjectSpec:
    color: str
    shape: str
    cell: tuple[int, int]

    @property
    def conjunction(self) -> tuple[str, str]:
        return (self.color, self.shape)

    @property
    def description(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class SceneSpec:
    """One synthetic image.

    ``grid`` is the cell layout (rows, cols); ``image_patches`` is the image
    size in patches (rows, cols). Objects are 2x2-patch squares centered in
    their cell and snapped down to the patch lattice.
    """

    grid: tuple[int, int]
    image_patches: tuple[int, int]
    objects: tuple[ObjectSpec, ...]
    target_index: Optional[int] = None
    entropy: Entropy = "high"
    trial_id: int = 0
    patch_px: int = PATCH_PX
    object_patches: int = OBJECT_PATCHES

    def __post_init__(self):
        rows, cols = self.grid
        cells = [o.cell for o in self.objects]
        for r, c in cells:
            if not (0 <= r < rows and 0 <= c < cols):
                raise InvariantError("scenegen", f"cell {(r, c)} outside grid {self.grid}")
        if len(set(cells)) != len(cells):
            raise InvariantError("scenegen", f"objects share a cell: {cells}")
        if self.target_index is not None and not (0 <= self.target_index < len(self.objects)):
            raise InvariantError("scenegen", f"target_index {self.target_index} out of range")
        if self.entropy not in ("high", "low"):
            raise ConfigError(f"unknown entropy {self.entropy!r}")

    @property
    def image_size(self) -> tuple[int, int]:
        """(height, width) in pixels."""
        return (self.image_patches[0] * self.patch_px, self.image_patches[1] * self.patch_px)

    @property
    def target(self) -> Optional[ObjectSpec]:
        return None if self.target_index is None else self.objects[self.target_index]

    def cell_patch_origin(self, cell: tuple[int, int]) -> tuple[int, int]:
        """Top-left patch (row, col) of the object box placed in ``cell``."""
        (r, c), (rows, cols) = cell, self.grid
        n_r, n_c = self.image_patches
        op = self.object_patches
        # floor(center - op/2) in exact integer arithmetic
        pr = ((2 * r + 1) * n_r - rows * op) // (2 * rows)
        pc = ((2 * c + 1) * n_c - cols * op) // (2 * cols)
        return pr, pc

    def object_bbox(self, index: int) -> tuple[int, int, int, int]:
        """Pixel box (x0, y0, x1, y1), half-open, of object ``index``."""
        pr, pc = self.cell_patch_origin(self.objects[index].cell)
        side = self.object_patches * self.patch_px
        x0, y0 = pc * self.patch_px, pr * self.patch_px
        return (x0, y0, x0 + side, y0 + side)

    def object_patches_of(self, index: int) -> list[tuple[int, int]]:
        """Patch coordinates (row, col) covered by object ``index``, raster order."""
        pr, pc = self.cell_patch_origin(self.objects[index].cell)
        op = self.object_patches
        return [(pr + i, pc + j) for i in range(op) for j in range(op)]

    def raster_order(self) -> list[int]:
        """Object indices sorted top-to-bottom, left-to-right."""
        return sorted(range(len(self.objects)), key=lambda i: self.objects[i].cell)

    def index_at(self, cell: tuple[int, int]) -> int:
        for i, o in enumerate(self.objects):
            if o.cell == tuple(cell):
                return i
        raise KeyError(f"no object at cell {cell}")

    def with_objects(self, objects, target_index=None, **kw) -> "SceneSpec":
        return replace(self, objects=tuple(objects), target_index=target_index, **kw)


@dataclass(frozen=True)
class GeneratorConfig:
    """Declarative dataset configuration.

    ``grid`` is a preset name (``"2x2"``, ``"3x3"``, ``"4x4"``, ``"3x2-pca"``)
    or ``"RxC"`` together with explicit ``image_patches``. ``cells`` restricts
    the occupied positions (random configurations); ``conjunctions``
    overrides the preset color-shape set.
    """

    grid: str = "2x2"
    entropy: Entropy = "high"
    k: int = 1
    seed: int = 0
    cells: Optional[tuple[tuple[int, int], ...]] = None
    conjunctions: Optional[tuple[tuple[str, str], ...]] = None
    image_patches: Optional[tuple[int, int]] = None

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for key in ("cells", "conjunctions"):
            if d.get(key) is not None:
                d[key] = tuple(tuple(x) for x in d[key])
        if d.get("image_patches") is not None:
            d["image_patches"] = tuple(d["image_patches"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "entropy": self.entropy,
            "k": self.k,
            "seed": self.seed,
            "cells": None if self.cells is None else [list(c) for c in self.cells],
            "conjunctions": None if self.conjunctions is None else [list(c) for c in self.conjunctions],
            "image_patches": None if self.image_patches is None else list(self.image_patches),
        }


@dataclass(frozen=True)
class Dataset:
    scenes: tuple[SceneSpec, ...]
    config: GeneratorConfig
    conjunction_set: tuple[tuple[str, str], ...]
    cells: tuple[tuple[int, int], ...] = field(default=())

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    @property
    def n_positions(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class TaskInstance:
    """A scene paired with a prompt.

    ``object_order`` lists scene object indices in description order: the
    objects named in the caption first, then the rest in raster order. Token
    groups ``pos_n``/``C_n``/``S_n`` follow this numbering.
    """

    scene: SceneSpec
    prompt_text: str
    answer: str
    task_kind: TaskKind
    object_order: tuple[int, ...] = ()
    n_described: int = 0

    @property
    def trial_id(self) -> int:
        return self.scene.trial_id
