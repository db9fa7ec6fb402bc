"""Position-ID swaps on keys/values and last-token residual repair.

A position delta is the mean difference between the projections of the
objects at two cells,

    D[A->B][l] = E_x[ x_B[l] - x_A[l] ],

where ``x_A`` is the site's projection averaged over the object's image
tokens. A swap adds ``+D`` to the tokens of the object at ``A`` and ``-D`` to
those at ``B`` across a layer range, so each object carries the other's
position ID.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backend.types import CaptureSpec, EditSpec, ForwardResult, KV_SITES
from .errors import ConfigError, LayoutError
from .io import save_tensor, write_csv
from .rsa import as_instances
from .scenegen.prompts import build_prompt
from .scenegen.types import SceneSpec, TaskInstance

Cell = tuple[int, int]


@dataclass(frozen=True)
class PositionDelta:
    """Per-layer ``D[A->B]``; each entry is ``[n_kv_heads, width]`` (or ``[width]`` for the residual)."""

    deltas: dict
    site: str
    cells: tuple[Cell, Cell]
    n_images: int

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.deltas))

    def reverse(self) -> "PositionDelta":
        """``D[B->A] = -D[A->B]``."""
        return PositionDelta({l: -d for l, d in self.deltas.items()}, self.site, self.cells[::-1], self.n_images)

    def save(self, directory):
        a, b = self.cells
        out = []
        for l, d in self.deltas.items():
            name = f"delta.{self.site}.{a[0]}{a[1]}-{b[0]}{b[1]}.L{l}"
            meta = {"site": self.site, "A": list(a), "B": list(b), "layer": l, "n_images": self.n_images}
            out += save_tensor(directory, name, d, meta)
        return out


def _check_site(site: str) -> None:
    if site not in (*KV_SITES, "residual"):
        raise ConfigError(f"position deltas are defined on key_proj/value_proj/residual, not {site!r}")


def object_means(backend, instance: TaskInstance, site: str, cells: Sequence[Cell], layers: Sequence[int]):
    """``{cell: {layer: mean projection over the object's tokens}}`` from one forward pass."""
    layout = backend.resolve_layout(instance)
    spans = {}
    for c in cells:
        try:
            spans[c] = layout.span_of_cell(c)
        except KeyError:
            raise LayoutError(f"trial {instance.trial_id} has no object at cell {c}") from None
    pos = tuple(sorted({p for s in spans.values() for p in s}))
    trace = backend.run_forward(instance, CaptureSpec({site}, tuple(layers), pos)).trace
    out = {c: {} for c in cells}
    for l in layers:
        for c, span in spans.items():
            out[c][l] = trace.at(site, l, list(span)).mean(axis=0)
    return out


def estimate_position_delta(
    backend,
    data,
    site: str,
    A: Cell,
    B: Cell,
    layers: Optional[Sequence[int]] = None,
    task_kind: str = "color_retrieval",
) -> PositionDelta:
    """Mean ``x_B - x_A`` over all images of ``data`` (a Dataset, scenes or instances)."""
    _check_site(site)
    A, B = tuple(A), tuple(B)
    layers = list(range(backend.n_layers)) if layers is None else list(layers)
    instances = as_instances(data, task_kind)
    if not instances:
        raise ConfigError("no images to estimate a delta from")
    if A == B:
        warnings.warn(f"A == B == {A}: zero delta", stacklevel=2)
        w = backend.site_width(site)
        shape = (w,) if site == "residual" else (backend.n_kv_heads, w)
        return PositionDelta({l: np.zeros(shape) for l in layers}, site, (A, B), len(instances))
    acc = {l: 0.0 for l in layers}
    for inst in instances:
        m = object_means(backend, inst, site, (A, B), layers)
        for l in layers:
            acc[l] = acc[l] + (m[B][l] - m[A][l])
    return PositionDelta({l: acc[l] / len(instances) for l in layers}, site, (A, B), len(instances))


@dataclass(frozen=True)
class SwapPlan:
    """``+D`` on the object tokens at ``A``, ``-D`` on those at ``B``, per layer in range."""

    base: PositionDelta
    layer_range: tuple[int, ...]
    edits: tuple[EditSpec, ...] = field(default=())

    def reverse(self) -> "SwapPlan":
        """The B->A plan with the same delta: every edit negated."""
        return SwapPlan(
            self.base.reverse(),
            self.layer_range,
            tuple(EditSpec(e.site, e.layer, e.positions, -e.payload, e.mode, e.head) for e in self.edits),
        )


def make_swap_plan(delta: PositionDelta, instance_or_layout, layer_range: Sequence[int], backend=None) -> SwapPlan:
    """Bind ``delta`` to one instance's token layout."""
    layout = instance_or_layout
    if isinstance(instance_or_layout, TaskInstance):
        if backend is None:
            raise ConfigError("pass backend to resolve the instance layout")
        layout = backend.resolve_layout(instance_or_layout)
    A, B = delta.cells
    span_a, span_b = layout.span_of_cell(A), layout.span_of_cell(B)
    missing = [l for l in layer_range if l not in delta.deltas]
    if missing:
        raise ConfigError(f"delta has no estimate for layers {missing}")
    edits = []
    for l in layer_range:
        d = delta.deltas[l]
        edits.append(EditSpec(delta.site, l, span_a, d, "add"))
        edits.append(EditSpec(delta.site, l, span_b, -d, "add"))
    return SwapPlan(delta, tuple(layer_range), tuple(edits))


def apply_swap(
    backend, instance: TaskInstance, plan: SwapPlan | Sequence[SwapPlan], generate: bool = False, max_new_tokens: int = 2
) -> ForwardResult:
    """Forward (or greedy generation) with the plan's edits in flight."""
    plans = [plan] if isinstance(plan, SwapPlan) else list(plan)
    edits = [e for p in plans for e in p.edits]
    if not edits:
        warnings.warn("empty layer range: swap is a no-op", stacklevel=2)
    if generate:
        return backend.generate(instance, max_new_tokens=max_new_tokens, edits=edits)
    return backend.run_forward(instance, edits=edits)


@dataclass
class EfficacyMatrix:
    """``values[A, B]``: fraction of trials answering color(B) after the swap.

    Rows index the queried cell ``A``, columns the target cell ``B``;
    ``baseline`` is the same statistic without any edit.
    """

    values: np.ndarray
    baseline: np.ndarray
    counts: np.ndarray
    cells: tuple[Cell, ...]
    layer_range: tuple[int, ...]
    site: str

    def off_diagonal(self, which: str = "values") -> np.ndarray:
        m = getattr(self, which)
        return m[~np.eye(len(m), dtype=bool)]

    def to_csv(self, path):
        n = len(self.cells)
        rows = (
            (f"{self.cells[i]}", f"{self.cells[j]}", self.values[i, j], self.baseline[i, j], self.counts[i, j])
            for i in range(n)
            for j in range(n)
        )
        return write_csv(path, ("queried_A", "target_B", "efficacy", "baseline", "n"), rows)

    def heatmap(self, path):
        from .plotting import heatmap

        labels = [f"{r},{c}" for r, c in self.cells]
        lr = f"{self.layer_range[0]}-{self.layer_range[-1]}" if self.layer_range else "none"
        return heatmap(
            self.values,
            path,
            title=f"{self.site} swap efficacy, layers {lr}",
            xlabel="target object index B",
            ylabel="queried object index A",
            xticklabels=labels,
            yticklabels=labels,
            vmin=0.0,
            vmax=1.0,
            annotate=True,
        )


def _first_answer_id(backend, word: str) -> int:
    return backend.answer_token_id(word)


def efficacy_matrix(
    backend,
    dataset,
    site: str = "key_proj",
    layer_range: Sequence[int] = (),
    task_kind: str = "color_retrieval",
    max_trials: Optional[int] = None,
) -> EfficacyMatrix:
    """Swap success per (queried cell, target cell) pair.

    For every trial whose target sits at ``A`` and every other occupied
    cell ``B``, the delta is estimated leave-one-out on all other images and
    success means the first answer token is color(B). Trials per row may be
    capped with ``max_trials``.
    """
    _check_site(site)
    if task_kind != "color_retrieval":
        raise ConfigError("efficacy is scored on color_retrieval prompts")
    layer_range = tuple(layer_range)
    instances = as_instances(dataset, task_kind)
    cells = tuple(sorted({o.cell for i in instances for o in i.scene.objects}))
    for inst in instances:
        if {o.cell for o in inst.scene.objects} != set(cells):
            raise ConfigError("efficacy needs every image to occupy the same cells")
    n = len(cells)
    if len(instances) < 2:
        raise ConfigError("leave-one-out estimation needs at least 2 images")
    # per-image object means: one capture each
    means = [object_means(backend, inst, site, cells, layer_range) for inst in instances] if layer_range else None
    totals = None
    if layer_range:
        totals = {c: {l: sum(m[c][l] for m in means) for l in layer_range} for c in cells}
    vals = np.zeros((n, n))
    base = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=int)
    by_row: dict[int, list[int]] = {}
    for t, inst in enumerate(instances):
        by_row.setdefault(cells.index(inst.scene.target.cell), []).append(t)
    m_other = len(instances) - 1
    for i, A in enumerate(cells):
        for t in by_row.get(i, [])[:max_trials]:
            inst = instances[t]
            clean = backend.run_forward(inst).logits
            clean_top = int(np.argmax(clean))
            layout = backend.resolve_layout(inst)
            for j, B in enumerate(cells):
                color_b = inst.scene.objects[inst.scene.index_at(B)].color
                want = _first_answer_id(backend, color_b)
                counts[i, j] += 1
                base[i, j] += clean_top == want
                if not layer_range or i == j:
                    vals[i, j] += clean_top == want
                    continue
                deltas = {
                    l: (totals[B][l] - means[t][B][l] - totals[A][l] + means[t][A][l]) / m_other for l in layer_range
                }
                plan = make_swap_plan(PositionDelta(deltas, site, (A, B), m_other), layout, layer_range)
                out = backend.run_forward(inst, edits=plan.edits).logits
                vals[i, j] += int(np.argmax(out)) == want
    with np.errstate(invalid="ignore"):
        values = np.where(counts > 0, vals / np.maximum(counts, 1), np.nan)
        baseline = np.where(counts > 0, base / np.maximum(counts, 1), np.nan)
    return EfficacyMatrix(values, baseline, counts, cells, layer_range, site)


# --------------------------------------------------------------- residual repair


@dataclass(frozen=True)
class MeanBank:
    """Mean last-token residual per ``(layer, target cell)`` with trial counts."""

    means: dict
    counts: dict

    def get(self, layer: int, cell: Cell) -> np.ndarray:
        try:
            return self.means[(int(layer), tuple(cell))]
        except KeyError:
            raise KeyError(f"mean bank has no entry for layer {layer}, target cell {tuple(cell)}") from None

    def save(self, directory):
        out = []
        for (l, c), v in sorted(self.means.items()):
            meta = {"layer": l, "cell": list(c), "count": self.counts[(l, c)]}
            out += save_tensor(directory, f"meanbank.L{l}.{c[0]}{c[1]}", v, meta)
        return out


def build_mean_bank(backend, data, layers: Sequence[int], task_kind: str = "scene_description") -> MeanBank:
    """Average last-token residuals of the trials in ``data`` grouped by target cell.

    ``data`` should hold high-entropy trials.
    """
    sums: dict = {}
    counts: dict = {}
    layers = tuple(layers)
    for inst in as_instances(data, task_kind):
        cell = inst.scene.target.cell
        trace = backend.run_forward(inst, CaptureSpec({"residual"}, layers, (-1,))).trace
        for l in layers:
            key = (l, cell)
            sums[key] = sums.get(key, 0.0) + trace.get("residual", l)[0]
            counts[key] = counts.get(key, 0) + 1
    if not sums:
        raise ConfigError("no trials for the mean bank")
    return MeanBank({k: v / counts[k] for k, v in sums.items()}, counts)


def repair_edits(bank: MeanBank, instance: TaskInstance, layer: int) -> list[EditSpec]:
    vec = bank.get(layer, instance.scene.target.cell)
    # position -1 is re-resolved at every decoding step
    return [EditSpec("residual", layer, (-1,), vec, "replace")]


def residual_patch_repair(
    backend, instance: TaskInstance, bank: MeanBank, layer: int, max_new_tokens: int = 2
) -> ForwardResult:
    """Greedy completion with the last-token residual at ``layer`` replaced by the bank mean."""
    if not 0 <= layer < backend.n_layers:
        raise ConfigError(f"layer {layer} outside model depth {backend.n_layers}")
    return backend.generate(instance, max_new_tokens=max_new_tokens, edits=repair_edits(bank, instance, layer))


def retrieval_instances(scenes: Sequence[SceneSpec]) -> list[TaskInstance]:
    return [build_prompt(s, "color_retrieval") for s in scenes]
