"""Causal mediation analysis over attention heads.

For a clean context ``c`` and an alternative context, the patched context
``c*`` is ``c`` with one head's output at the patch positions replaced by its
value in the alternative run. The score is

    s = (M(c*)[a*] - M(c*)[a]) - (M(c)[a*] - M(c)[a])

on raw logits, where ``a`` is the clean answer and ``a*`` the answer the
alternative context implies.

Conditions:

* ``switched_target_id``: the alternative image swaps the two objects'
  cells; ``a`` = color B, ``a*`` = color A. Patched at the last token.
* ``different_target_feature``: the alternative replaces B by a new object
  C at the same cell; ``a`` = color B, ``a*`` = color C. Last token.
* ``semantic_matching``: switched images, patched at the caption color
  token of the described object.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from .backend.types import CaptureSpec, EditSpec
from .errors import ConfigError, InvariantError
from .io import write_csv
from .scenegen.generate import two_object_scene
from .scenegen.prompts import build_prompt
from .scenegen.types import Dataset, ObjectSpec, TaskInstance

ConditionKind = Literal["switched_target_id", "different_target_feature", "semantic_matching"]
CONDITION_KINDS = ("switched_target_id", "different_target_feature", "semantic_matching")


@dataclass(frozen=True)
class CMACondition:
    kind: str
    clean: TaskInstance
    alternative: TaskInstance
    clean_answer: str
    expected_answer: str
    patch_at: Literal["last_token", "caption_color"] = "last_token"

    def __post_init__(self):
        if self.clean.prompt_text != self.alternative.prompt_text:
            raise InvariantError("cma", "clean and alternative prompts differ")
        if self.clean_answer == self.expected_answer:
            raise InvariantError("cma", f"a == a* == {self.clean_answer!r}")

    def patch_positions(self, backend) -> tuple[int, ...]:
        layout = backend.resolve_layout(self.clean)
        if self.patch_at == "last_token":
            return (layout.last_token,)
        if 0 not in layout.caption_colors:
            raise InvariantError("cma", f"trial {self.clean.trial_id}: no caption color token to patch")
        return tuple(layout.caption_colors[0])


@dataclass
class CMAMap:
    """Mean score per (layer, head); ``per_sample`` keeps ``[n, L, H]``."""

    scores: np.ndarray
    kind: str
    n_samples: int
    per_sample: Optional[np.ndarray] = None
    flags: tuple[str, ...] = field(default=())

    def to_csv(self, path):
        L, H = self.scores.shape
        rows = ((l, h, self.kind, self.scores[l, h]) for l in range(L) for h in range(H))
        return write_csv(path, ("layer", "head", "condition", "score"), rows)

    def heatmap(self, path):
        from .plotting import heatmap

        L, H = self.scores.shape
        return heatmap(
            self.scores,
            path,
            title=f"CMA: {self.kind} (n={self.n_samples})",
            xlabel="head",
            ylabel="layer",
            xticklabels=range(H),
            yticklabels=range(L),
            cmap="RdBu_r",
            vmin=-np.abs(self.scores).max() or None,
            vmax=np.abs(self.scores).max() or None,
        )


def _alt_object_c(dataset: Dataset, a: ObjectSpec, b: ObjectSpec, rng) -> tuple[str, str]:
    colors = {c for c, _ in dataset.conjunction_set}
    if len(colors) < 3:
        raise ConfigError(
            f"different_target_feature needs >= 3 distinct colors; conjunction set has {len(colors)}"
        )
    pool = [cs for cs in dataset.conjunction_set if cs[0] not in (a.color, b.color)]
    fresh = [cs for cs in pool if cs[1] not in (a.shape, b.shape)]
    pool = fresh or pool
    return pool[int(rng.integers(len(pool)))]


def build_condition(
    dataset: Dataset, kind: str, n_samples: int, seed: int = 0
) -> list[CMACondition]:
    """Build ``n_samples`` clean/alternative pairs from scenes of ``dataset``.

    Each sample reduces a scene to its target B plus one other object A
    (chosen at random); the prompt describes A and asks for B.
    """
    if kind not in CONDITION_KINDS:
        raise ConfigError(f"unknown CMA condition {kind!r}")
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset.scenes))
    out = []
    for i in range(n_samples):
        scene = dataset.scenes[int(order[i % len(order)])]
        if len(scene.objects) < 2 or scene.target_index is None:
            raise ConfigError("CMA conditions need scenes with a target and another object")
        others = [j for j in range(len(scene.objects)) if j != scene.target_index]
        ai = others[int(rng.integers(len(others)))]
        base = two_object_scene(scene, ai, scene.target_index)
        a, b = base.objects
        if kind == "different_target_feature":
            c_color, c_shape = _alt_object_c(dataset, a, b, rng)
            alt_scene = base.with_objects((a, ObjectSpec(c_color, c_shape, b.cell)), target_index=1)
            expected = c_color
        else:
            alt_scene = base.with_objects(
                (ObjectSpec(a.color, a.shape, b.cell), ObjectSpec(b.color, b.shape, a.cell)), target_index=1
            )
            expected = a.color
        clean = build_prompt(base, "scene_description")
        alt = build_prompt(alt_scene, "scene_description")
        patch_at = "caption_color" if kind == "semantic_matching" else "last_token"
        out.append(CMACondition(kind, clean, alt, b.color, expected, patch_at))
    return out


def _answer_ids(backend, cond: CMACondition) -> tuple[int, int]:
    return backend.answer_token_id(cond.clean_answer), backend.answer_token_id(cond.expected_answer)


def _n_subtokens(backend, word: str) -> int:
    tok = getattr(backend, "tokenizer", None)
    return len(tok.token_ids(word)) if tok is not None and hasattr(tok, "token_ids") else 1


def _diff(logits: np.ndarray, a: int, a_star: int) -> float:
    return float(logits[a_star] - logits[a])


def cma_score(
    backend, condition: CMACondition, layer: int, head: int, site: str = "head_output"
) -> float:
    """Score of one head on one condition (three forward passes)."""
    a, a_star = _answer_ids(backend, condition)
    pos = condition.patch_positions(backend)
    alt = backend.run_forward(condition.alternative, CaptureSpec({site}, (layer,), pos, (head,)))
    payload = alt.trace.get(site, layer)[:, 0]
    clean = backend.run_forward(condition.clean).logits
    patched = backend.run_forward(
        condition.clean, edits=[EditSpec(site, layer, pos, payload, "replace", head)]
    ).logits
    return _diff(patched, a, a_star) - _diff(clean, a, a_star)


def cma_map(
    backend,
    conditions: Sequence[CMACondition],
    layers: Optional[Sequence[int]] = None,
    heads: Optional[Sequence[int]] = None,
    site: str = "head_output",
) -> CMAMap:
    """Score every (layer, head), one head patched at a time, averaged over conditions.

    Unlisted layers/heads are left at 0.
    """
    if not conditions:
        raise ConfigError("no CMA conditions")
    kinds = {c.kind for c in conditions}
    if len(kinds) > 1:
        raise ConfigError(f"mixed condition kinds {sorted(kinds)}")
    L, H = backend.n_layers, backend.n_heads
    layers = list(range(L)) if layers is None else list(layers)
    heads = list(range(H)) if heads is None else list(heads)
    per = np.zeros((len(conditions), L, H))
    flags = set()
    for n, cond in enumerate(conditions):
        a, a_star = _answer_ids(backend, cond)
        for word in (cond.clean_answer, cond.expected_answer):
            if _n_subtokens(backend, word) > 1:
                flags.add(f"first sub-token used for {word!r}")
        pos = cond.patch_positions(backend)
        alt = backend.run_forward(cond.alternative, CaptureSpec({site}, tuple(layers), pos, tuple(heads)))
        base = _diff(backend.run_forward(cond.clean).logits, a, a_star)
        for layer in layers:
            vals = alt.trace.get(site, layer)
            for j, h in enumerate(heads):
                edit = EditSpec(site, layer, pos, vals[:, j], "replace", h)
                patched = backend.run_forward(cond.clean, edits=[edit]).logits
                per[n, layer, h] = _diff(patched, a, a_star) - base
    scores = per.mean(axis=0)
    if not np.isfinite(scores).all():
        raise InvariantError("cma", "non-finite CMA score")
    return CMAMap(scores, conditions[0].kind, len(conditions), per, tuple(sorted(flags)))


def top_heads(cmap: CMAMap | np.ndarray, k: int) -> list[tuple[int, int]]:
    """``k`` highest-scoring heads; ties broken by (layer, head) ascending."""
    scores = cmap.scores if isinstance(cmap, CMAMap) else np.asarray(cmap)
    L, H = scores.shape
    if not 0 <= k <= L * H:
        raise ConfigError(f"k={k} outside 0..{L * H}")
    units = sorted(((l, h) for l in range(L) for h in range(H)), key=lambda u: (-scores[u], u))
    return units[:k]
