"""End-to-end studies: accuracy tables, entropy RSA comparison, intrinsic ordering."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .intervene import MeanBank, PositionDelta, make_swap_plan, object_means, repair_edits
from .io import write_csv
from .rsa import AlignmentCurve, as_instances, rsa_curves
from .scenegen.generate import permute_objects
from .scenegen.prompts import build_prompt, extend_listing
from .scenegen.types import Dataset, SceneSpec, TaskInstance

_STRIP = re.compile(r"[^\w\s]")


def normalize(text: str) -> str:
    """Lower-case, drop punctuation, collapse whitespace."""
    return " ".join(_STRIP.sub(" ", text.lower()).split())


def score_completion(generated: str, answer: str, strict: bool = True) -> bool:
    """Exact ``color shape`` match; with ``strict=False`` the color alone counts."""
    got, want = normalize(generated).split(), normalize(answer).split()
    if not got or not want:
        return False
    if strict:
        return got[: len(want)] == want
    return got[0] == want[0]


# --------------------------------------------------------------- accuracy


@dataclass(frozen=True)
class AccuracyCell:
    mean: float
    sem: float
    n: int

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[bool]) -> "AccuracyCell":
        x = np.asarray(outcomes, dtype=float)
        if x.size == 0:
            raise ConfigError("no trials to score")
        sem = float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
        return cls(float(x.mean()), sem, int(x.size))

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.sem:.2f}"


@dataclass
class AccuracyReport:
    """Accuracy per ``(grid, entropy, intervention)`` key."""

    cells: dict = field(default_factory=dict)

    def merge(self, other: "AccuracyReport") -> "AccuracyReport":
        return AccuracyReport({**self.cells, **other.cells})

    def to_csv(self, path):
        rows = (
            (g, e, iv, c.mean, c.sem, c.n) for (g, e, iv), c in sorted(self.cells.items())
        )
        return write_csv(path, ("grid", "entropy", "intervention", "accuracy", "sem", "n"), rows)

    def to_json(self) -> str:
        return json.dumps(
            [
                {"grid": g, "entropy": e, "intervention": iv, "accuracy": c.mean, "sem": c.sem, "n": c.n}
                for (g, e, iv), c in sorted(self.cells.items())
            ],
            indent=1,
        )

    def table(self) -> str:
        """Grids as rows; high, low and low-with-intervention as columns."""
        grids = sorted({g for g, _, _ in self.cells})
        cols = [("high", "none", "High entropy"), ("low", "none", "Low entropy"), ("low", "repair", "Low + repair")]
        lines = ["| Grid | " + " | ".join(c[2] for c in cols) + " |", "|---" * (len(cols) + 1) + "|"]
        for g in grids:
            cells = [str(self.cells.get((g, e, iv), "n/a")) for e, iv, _ in cols]
            lines.append(f"| {g} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def scene_description_accuracy(
    backend,
    dataset,
    intervention: Optional[Callable[[TaskInstance], list]] = None,
    strict: bool = True,
    grid: Optional[str] = None,
    label: str = "repair",
    max_new_tokens: int = 2,
) -> AccuracyReport:
    """Greedy completion accuracy on scene-description prompts.

    ``intervention`` maps an instance to the edits applied during decoding
    (see :func:`repair_intervention`).
    """
    instances = as_instances(dataset, "scene_description")
    if not instances:
        raise ConfigError("empty dataset")
    outcomes = []
    for inst in instances:
        edits = intervention(inst) if intervention is not None else ()
        gen = backend.generate(inst, max_new_tokens=max_new_tokens, edits=edits).generated or ""
        outcomes.append(score_completion(gen, inst.answer, strict))
    if grid is None:
        grid = dataset.config.grid if isinstance(dataset, Dataset) else "x".join(map(str, instances[0].scene.grid))
    entropies = {i.scene.entropy for i in instances}
    entropy = entropies.pop() if len(entropies) == 1 else "mixed"
    key = (grid, entropy, "none" if intervention is None else label)
    return AccuracyReport({key: AccuracyCell.from_outcomes(outcomes)})


def repair_intervention(bank: MeanBank, layer: int) -> Callable[[TaskInstance], list]:
    return lambda inst: repair_edits(bank, inst, layer)


# --------------------------------------------------------------- entropy RSA


@dataclass
class EntropyComparison:
    """``curves[token_source] = (high, low)`` position-alignment curves."""

    curves: dict
    target_kind: str = "position"

    def to_dict(self) -> dict:
        return {
            "target_kind": self.target_kind,
            "curves": {src: {"high": h.to_dict(), "low": l.to_dict()} for src, (h, l) in self.curves.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EntropyComparison":
        curves = {
            src: (AlignmentCurve.from_dict(v["high"]), AlignmentCurve.from_dict(v["low"]))
            for src, v in d["curves"].items()
        }
        return cls(curves, d["target_kind"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "EntropyComparison":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        return isinstance(other, EntropyComparison) and self.to_dict() == other.to_dict() or (
            isinstance(other, EntropyComparison)
            and self.target_kind == other.target_kind
            and self.curves.keys() == other.curves.keys()
            and all(self.curves[k] == other.curves[k] for k in self.curves)
        )


def entropy_rsa_comparison(
    backend,
    dataset_high,
    dataset_low,
    token_sources: Sequence[str] = ("comma_tokens", "last_token"),
    kind: str = "position",
    layers: Optional[Sequence[int]] = None,
) -> EntropyComparison:
    """Position-alignment curves for matched high/low entropy datasets."""
    hi, lo = as_instances(dataset_high), as_instances(dataset_low)
    g_hi = {i.scene.grid for i in hi}
    g_lo = {i.scene.grid for i in lo}
    if g_hi != g_lo or len(g_hi) != 1:
        raise ConfigError(f"grids differ: high {sorted(g_hi)} vs low {sorted(g_lo)}")
    curves = {}
    for src in token_sources:
        h = rsa_curves(backend, hi, (kind,), src, layers=layers)[kind]
        l = rsa_curves(backend, lo, (kind,), src, layers=layers)[kind]
        curves[src] = (h, l)
    return EntropyComparison(curves, kind)


# --------------------------------------------------------------- ordering


@dataclass
class OrderReport:
    """``proportions[p, r]``: share of parsed trials describing position ``p`` at rank ``r``.

    Positions are the occupied cells in raster order.
    """

    proportions: np.ndarray
    cells: tuple[tuple[int, int], ...]
    n_trials: int
    n_excluded: int
    intervention_efficacy: Optional[float] = None
    n_interventions: int = 0

    def to_csv(self, path):
        m = len(self.cells)
        rows = ((f"{self.cells[p]}", r + 1, self.proportions[p, r]) for p in range(m) for r in range(m))
        return write_csv(path, ("position", "rank", "proportion"), rows)

    def plot(self, path):
        from .plotting import stacked_bars

        return stacked_bars(
            self.proportions,
            path,
            row_labels=[f"{r},{c}" for r, c in self.cells],
            title=f"description order (n={self.n_trials - self.n_excluded})",
        )


def parse_listing_item(text: str, scene: SceneSpec, exclude: Sequence[int] = ()) -> Optional[int]:
    """Scene object index named by ``"color shape"`` in ``text``, if any."""
    words = normalize(text).split()
    if len(words) < 2:
        return None
    for i, o in enumerate(scene.objects):
        if i not in exclude and words[0] == o.color and words[1] == o.shape:
            return i
    return None


def list_objects(backend, instance: TaskInstance, edits=(), first_only: bool = False) -> Optional[list[int]]:
    """Generate an open listing item by item; ``None`` if an item fails to parse."""
    scene = instance.scene
    m = 1 if first_only else len(scene.objects)
    named: list[int] = []
    inst = instance
    for _ in range(m):
        gen = backend.generate(inst, max_new_tokens=2, edits=edits).generated or ""
        idx = parse_listing_item(gen, scene, named)
        if idx is None:
            return None
        named.append(idx)
        inst = extend_listing(instance, [scene.objects[i].description for i in named])
    return named


def ordering_study(
    backend,
    base_scene: SceneSpec,
    use_intervention: bool = False,
    site: str = "key_proj",
    layer_range: Optional[Sequence[int]] = None,
) -> OrderReport:
    """Rank proportions over all object permutations of ``base_scene``.

    With ``use_intervention`` the position ID of the raster-first cell is
    swapped with each other cell (deltas estimated leave-one-out over the
    permutations) and success means the first generated object is the one
    moved into that ID.
    """
    if base_scene.target_index is not None:
        base_scene = base_scene.with_objects(base_scene.objects, target_index=None)
    scenes = permute_objects(base_scene)
    instances = [build_prompt(s, "open_listing") for s in scenes]
    cells = tuple(sorted(o.cell for o in base_scene.objects))
    m = len(cells)
    counts = np.zeros((m, m))
    excluded = 0
    for inst in instances:
        order = list_objects(backend, inst)
        if order is None:
            excluded += 1
            continue
        for rank, idx in enumerate(order):
            counts[cells.index(inst.scene.objects[idx].cell), rank] += 1
    parsed = len(instances) - excluded
    props = counts / parsed if parsed else np.full((m, m), np.nan)
    report = OrderReport(props, cells, len(instances), excluded)
    if use_intervention:
        if layer_range is None:
            raise ConfigError("use_intervention needs a layer_range")
        report.intervention_efficacy, report.n_interventions = _order_intervention(
            backend, instances, cells, site, tuple(layer_range)
        )
    return report


def _order_intervention(backend, instances, cells, site, layer_range) -> tuple[float, int]:
    first = cells[0]
    means = [object_means(backend, i, site, cells, layer_range) for i in instances]
    totals = {c: {l: sum(mm[c][l] for mm in means) for l in layer_range} for c in cells}
    n_other = len(instances) - 1
    if n_other < 1:
        raise ConfigError("order intervention needs at least 2 permutations")
    hits = total = 0
    for t, inst in enumerate(instances):
        layout = backend.resolve_layout(inst)
        for x in cells[1:]:
            # object at x takes the first cell's position ID: D[x -> first]
            deltas = {
                l: (totals[first][l] - means[t][first][l] - totals[x][l] + means[t][x][l]) / n_other
                for l in layer_range
            }
            plan = make_swap_plan(PositionDelta(deltas, site, (x, first), n_other), layout, layer_range)
            order = list_objects(backend, inst, edits=plan.edits, first_only=True)
            total += 1
            hits += order is not None and inst.scene.objects[order[0]].cell == x
    return hits / total, total
