"""Representational similarity analysis.

Model RSMs are trial-by-trial cosine similarities of captured activations;
target RSMs encode hypothesized structure (grid position, color, shape).
Alignment is the Pearson correlation of their off-diagonal upper triangles.

Activations are read from one of two token sources:

* ``last_token``: the final prompt token, one group (``G = 1``);
* ``comma_tokens``: the comma after each described object, one group per
  described object (``G = n_described``). Each comma is attributed to the
  object named just before it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Optional, Sequence

import numpy as np

from .backend.types import CaptureSpec
from .errors import ConfigError, DegenerateError
from .io import load_tensor, save_tensor, write_csv
from .scenegen.prompts import build_prompt
from .scenegen.types import Dataset, SceneSpec, TaskInstance

TokenSource = Literal["last_token", "comma_tokens"]
TargetKind = Literal["position", "color", "shape", "feature"]
TOKEN_SOURCES = ("last_token", "comma_tokens")
TARGET_KINDS = ("position", "color", "shape", "feature")

Unit = tuple[int, Optional[int]]  # (layer, head or None)


@dataclass(frozen=True)
class SimilarityMatrix:
    """A stack of ``G`` trial-by-trial similarity matrices."""

    values: np.ndarray  # [G, T, T]
    token_source: str
    kind: str
    trial_ids: tuple[int, ...]
    unit: Optional[Unit] = None

    @property
    def n_trials(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class AlignmentScore:
    r: float
    defined: bool


@dataclass
class AlignmentCurve:
    """Pearson r per unit. Undefined scores are NaN with ``defined=False``."""

    scores: dict = field(default_factory=dict)  # Unit -> AlignmentScore
    token_source: str = "last_token"
    target_kind: str = "position"

    def units(self) -> list[Unit]:
        return sorted(self.scores, key=lambda u: (u[0], -1 if u[1] is None else u[1]))

    def layers(self) -> list[int]:
        return [u[0] for u in self.units()]

    def values(self) -> np.ndarray:
        return np.array([self.scores[u].r for u in self.units()])

    def argmax_layer(self, tol: float = 1e-9) -> int:
        """Layer of the highest defined score.

        Scores within ``tol`` of each other count as tied, and the earliest
        tied unit wins, so round-off cannot move the peak to a later layer.
        """
        best = None
        for u in self.units():
            s = self.scores[u]
            if s.defined and (best is None or s.r > self.scores[best].r + tol):
                best = u
        if best is None:
            raise DegenerateError("no defined alignment score")
        return best[0]

    def to_dict(self) -> dict:
        return {
            "token_source": self.token_source,
            "target_kind": self.target_kind,
            "scores": [
                {"layer": u[0], "head": u[1], "r": self.scores[u].r, "defined": self.scores[u].defined}
                for u in self.units()
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AlignmentCurve":
        scores = {
            (int(s["layer"]), None if s["head"] is None else int(s["head"])): AlignmentScore(
                float(s["r"]), bool(s["defined"])
            )
            for s in d["scores"]
        }
        return cls(scores, d["token_source"], d["target_kind"])

    def to_csv(self, path):
        rows = [
            (u[0], "" if u[1] is None else u[1], self.target_kind, self.scores[u].r) for u in self.units()
        ]
        return write_csv(path, ("layer", "head", "target_kind", "r"), rows)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AlignmentCurve):
            return NotImplemented
        if (self.token_source, self.target_kind) != (other.token_source, other.target_kind):
            return False
        if set(self.scores) != set(other.scores):
            return False
        for u, s in self.scores.items():
            o = other.scores[u]
            if s.defined != o.defined or not (s.r == o.r or (math.isnan(s.r) and math.isnan(o.r))):
                return False
        return True


@dataclass(frozen=True)
class TraceSet:
    """Activations of ``T`` trials gathered per unit.

    ``acts[(layer, head)]`` is ``[G, T, width]``; ``head`` is ``None`` for the
    residual stream.
    """

    site: str
    token_source: str
    acts: dict
    instances: tuple[TaskInstance, ...]

    @property
    def trial_ids(self) -> tuple[int, ...]:
        return tuple(i.trial_id for i in self.instances)

    def units(self) -> list[Unit]:
        return sorted(self.acts, key=lambda u: (u[0], -1 if u[1] is None else u[1]))


# --------------------------------------------------------------- capture


def as_instances(data, task_kind: str = "scene_description") -> list[TaskInstance]:
    """Accept a Dataset, scenes or ready-made instances."""
    items = list(data.scenes if isinstance(data, Dataset) else data)
    return [x if isinstance(x, TaskInstance) else build_prompt(x, task_kind) for x in items]


def token_positions(layout, token_source: str) -> list[int]:
    if token_source == "last_token":
        return [layout.last_token]
    if token_source == "comma_tokens":
        return list(layout.commas)
    raise ConfigError(f"unknown token source {token_source!r}")


def collect_traces(
    backend,
    data,
    site: str = "residual",
    token_source: str = "last_token",
    layers: Optional[Sequence[int]] = None,
    heads: Optional[Sequence[int]] = None,
) -> TraceSet:
    """Run every trial once and gather ``site`` at the token source."""
    instances = as_instances(data)
    layers = list(range(backend.n_layers)) if layers is None else list(layers)
    per_unit: dict[Unit, list[np.ndarray]] = {}
    n_groups = None
    for inst in instances:
        layout = backend.resolve_layout(inst)
        pos = token_positions(layout, token_source)
        if not pos:
            raise ConfigError(f"trial {inst.trial_id} has no {token_source}")
        if n_groups is None:
            n_groups = len(pos)
        elif len(pos) != n_groups:
            raise ConfigError(f"trial {inst.trial_id} has {len(pos)} {token_source}, expected {n_groups}")
        cap = CaptureSpec({site}, tuple(layers), tuple(pos), None if heads is None else tuple(heads))
        trace = backend.run_forward(inst, capture=cap).trace
        for layer in layers:
            e = trace.entry(site, layer)
            if site == "residual":
                per_unit.setdefault((layer, None), []).append(e.values)
            else:
                for j, h in enumerate(e.heads):
                    per_unit.setdefault((layer, h), []).append(e.values[:, j])
    acts = {u: np.stack(v, axis=1) for u, v in per_unit.items()}  # [G, T, w]
    return TraceSet(site, token_source, acts, tuple(instances))


# --------------------------------------------------------------- model RSMs


def cosine_rsm(acts: np.ndarray, trial_ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """Pairwise cosine similarity of ``[G, T, w]`` (or ``[T, w]``) activations."""
    a = np.asarray(acts, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[None]
    norms = np.linalg.norm(a, axis=-1)
    bad = np.argwhere(norms == 0)
    if bad.size:
        g, t = bad[0]
        tid = trial_ids[t] if trial_ids is not None else t
        raise DegenerateError(f"zero-norm activation for trial {tid} (group {g})")
    u = a / norms[..., None]
    sim = np.clip(u @ u.transpose(0, 2, 1), -1.0, 1.0)
    idx = np.arange(sim.shape[1])
    sim[:, idx, idx] = 1.0
    return sim[0] if squeeze else sim


def model_rsm(traces: TraceSet, layer: int, head: Optional[int] = None) -> SimilarityMatrix:
    """Cosine RSM of one unit of a :class:`TraceSet`."""
    try:
        acts = traces.acts[(layer, head)]
    except KeyError:
        raise KeyError(f"trace set has no unit (layer={layer}, head={head})") from None
    vals = cosine_rsm(acts, traces.trial_ids)
    return SimilarityMatrix(vals, traces.token_source, "model", traces.trial_ids, (layer, head))


def model_rsms(traces: TraceSet) -> dict[Unit, SimilarityMatrix]:
    return {u: model_rsm(traces, *u) for u in traces.units()}


# --------------------------------------------------------------- target RSMs


def _group_objects(inst: TaskInstance, token_source: str) -> list[int]:
    """Scene object index each group refers to."""
    if token_source == "last_token":
        if inst.scene.target_index is None:
            raise ConfigError(f"trial {inst.trial_id} has no target for last_token RSA")
        return [inst.scene.target_index]
    if token_source == "comma_tokens":
        return list(inst.object_order[: inst.n_described])
    raise ConfigError(f"unknown token source {token_source!r}")


def target_rsm(data, kind: str, token_source: str = "last_token") -> SimilarityMatrix:
    """Hypothesis RSM over the trials of ``data``.

    ``position`` is ``1 - D / max D`` with Euclidean distance between unit
    spaced cell coordinates and the maximum taken over all trial pairs;
    ``color`` and ``shape`` are equality indicators; ``feature`` is their
    mean.
    """
    if kind not in TARGET_KINDS:
        raise ConfigError(f"unknown target kind {kind!r}")
    instances = as_instances(data)
    grids = {i.scene.grid for i in instances}
    if len(grids) > 1:
        raise ConfigError(f"trials mix grid geometries {sorted(grids)}")
    groups = [_group_objects(i, token_source) for i in instances]
    G = len(groups[0])
    if any(len(g) != G for g in groups):
        raise ConfigError("trials differ in the number of token groups")
    objs = [[i.scene.objects[k] for k in g] for i, g in zip(instances, groups)]
    T = len(instances)
    vals = np.empty((G, T, T))
    for g in range(G):
        col = [o[g] for o in objs]
        if kind == "position":
            xy = np.array([o.cell for o in col], dtype=float)
            dist = np.sqrt(((xy[:, None] - xy[None]) ** 2).sum(-1))
            vals[g] = dist
        else:
            c = np.array([o.color for o in col])
            s = np.array([o.shape for o in col])
            eq_c = (c[:, None] == c[None]).astype(float)
            eq_s = (s[:, None] == s[None]).astype(float)
            vals[g] = {"color": eq_c, "shape": eq_s, "feature": 0.5 * (eq_c + eq_s)}[kind]
    if kind == "position":
        dmax = vals.max()
        if dmax == 0:
            raise DegenerateError("all trials share one position: maximum distance is 0")
        vals = 1.0 - vals / dmax
    tids = tuple(i.trial_id for i in instances)
    return SimilarityMatrix(vals, token_source, kind, tids)


# --------------------------------------------------------------- alignment


def upper_triangle(values: np.ndarray) -> np.ndarray:
    """Off-diagonal upper triangle of every group, concatenated."""
    v = np.asarray(values)
    if v.ndim == 2:
        v = v[None]
    iu = np.triu_indices(v.shape[1], k=1)
    return np.concatenate([m[iu] for m in v])


def pearson(x: np.ndarray, y: np.ndarray) -> AlignmentScore:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    # relative guard: a constant vector leaves rounding-level residue
    if nx <= 1e-12 * max(1.0, np.abs(x).max()) or ny <= 1e-12 * max(1.0, np.abs(y).max()):
        return AlignmentScore(float("nan"), False)
    r = float(np.clip((xc @ yc) / (nx * ny), -1.0, 1.0))
    return AlignmentScore(r, True)


def alignment(model: SimilarityMatrix, target: SimilarityMatrix) -> AlignmentScore:
    """Pearson r between two RSMs over their off-diagonal upper triangles.

    Groups are pooled: the triangles of all ``G`` matrices are concatenated.
    """
    if model.values.shape != target.values.shape:
        raise ConfigError(f"RSM shapes differ: {model.values.shape} vs {target.values.shape}")
    if model.trial_ids != target.trial_ids:
        raise ConfigError("RSMs are over different trials")
    return pearson(upper_triangle(model.values), upper_triangle(target.values))


def alignment_curve(
    models: Mapping[Unit, SimilarityMatrix] | Iterable[SimilarityMatrix], target: SimilarityMatrix
) -> AlignmentCurve:
    if not isinstance(models, Mapping):
        models = {m.unit: m for m in models}
    scores = {u: alignment(m, target) for u, m in models.items()}
    return AlignmentCurve(scores, target.token_source, target.kind)


def rsa_curves(
    backend,
    data,
    kinds: Sequence[str] = ("position", "feature"),
    token_source: str = "last_token",
    site: str = "residual",
    layers: Optional[Sequence[int]] = None,
    heads: Optional[Sequence[int]] = None,
) -> dict[str, AlignmentCurve]:
    """Capture once, then align every unit against each target kind."""
    traces = collect_traces(backend, data, site, token_source, layers, heads)
    models = model_rsms(traces)
    return {k: alignment_curve(models, target_rsm(traces.instances, k, token_source)) for k in kinds}


# --------------------------------------------------------------- persistence


def save_rsm(rsm: SimilarityMatrix, directory, name: str):
    meta = {
        "kind": rsm.kind,
        "token_source": rsm.token_source,
        "trial_ids": list(rsm.trial_ids),
        "unit": None if rsm.unit is None else list(rsm.unit),
    }
    return save_tensor(directory, name, rsm.values, meta)


def load_rsm(directory, name: str) -> SimilarityMatrix:
    vals, meta = load_tensor(directory, name)
    unit = None if meta["unit"] is None else tuple(meta["unit"])
    return SimilarityMatrix(vals, meta["token_source"], meta["kind"], tuple(meta["trial_ids"]), unit)
