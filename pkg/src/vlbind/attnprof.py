"""Attention mass of selected heads over labelled token groups."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .backend.types import CaptureSpec, TokenLayout
from .errors import ConfigError, EditError
from .io import write_csv

OTHER = "other"


@dataclass(frozen=True)
class AttentionProfile:
    """``values[q, g]``: attention mass from query ``q`` to group ``g``.

    Groups are ``pos_n``, ``C_n``, ``S_n``, ``commas`` and a final ``other``
    absorbing every remaining key, so each row sums to 1 (post-softmax
    weights averaged uniformly over ``heads``).
    """

    values: np.ndarray
    groups: tuple[str, ...]
    query_positions: tuple[int, ...]
    heads: tuple[tuple[int, int], ...]
    note: str = "post-softmax weights, uniform mean over heads"

    def group(self, name: str) -> np.ndarray:
        return self.values[:, self.groups.index(name)]

    def to_csv(self, path):
        rows = (
            (q, g, self.values[i, j])
            for i, q in enumerate(self.query_positions)
            for j, g in enumerate(self.groups)
        )
        return write_csv(path, ("query_position", "group", "mass"), rows)

    def heatmap(self, path, query_labels: Optional[Sequence[str]] = None):
        from .plotting import heatmap

        heads = ", ".join(f"{l}.{h}" for l, h in self.heads)
        return heatmap(
            self.values,
            path,
            title=f"attention profile ({heads})",
            xlabel="key group",
            ylabel="query",
            xticklabels=self.groups,
            yticklabels=query_labels or self.query_positions,
            vmin=0.0,
            vmax=1.0,
        )


def check_groups(groups: Mapping[str, Sequence[int]], n_keys: int) -> None:
    seen: dict[int, str] = {}
    for name, idx in groups.items():
        if name == OTHER:
            raise ConfigError(f"group name {OTHER!r} is reserved")
        for i in idx:
            if not 0 <= i < n_keys:
                raise ConfigError(f"group {name!r} index {i} outside {n_keys} keys")
            if i in seen:
                raise ConfigError(f"groups {seen[i]!r} and {name!r} overlap at token {i}")
            seen[i] = name


def profile_from_weights(weights: np.ndarray, groups: Mapping[str, Sequence[int]]) -> tuple[np.ndarray, tuple[str, ...]]:
    """Group masses from ``[H, Q, S]`` attention weights, averaged over ``H``.

    Returns ``(values [Q, G+1], labels)`` with ``other`` last.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    S = w.shape[-1]
    check_groups(groups, S)
    mean = w.mean(axis=0)
    labels = tuple(groups) + (OTHER,)
    rest = np.ones(S, dtype=bool)
    cols = []
    for idx in groups.values():
        idx = list(idx)
        cols.append(mean[:, idx].sum(axis=1))
        rest[idx] = False
    cols.append(mean[:, rest].sum(axis=1))
    return np.stack(cols, axis=1), labels


def attention_profile(
    backend,
    instance,
    heads: Sequence[tuple[int, int]],
    query_positions: Optional[Sequence[int]] = None,
    layout: Optional[TokenLayout] = None,
) -> AttentionProfile:
    """Profile of ``heads`` (list of ``(layer, head)``) on one instance.

    ``query_positions`` default to the last token.
    """
    if not heads:
        raise ConfigError("no heads given")
    for l, h in heads:
        if not (0 <= l < backend.n_layers and 0 <= h < backend.n_heads):
            raise EditError(f"head {l}.{h} outside model dims {backend.n_layers}x{backend.n_heads}")
    layout = layout or backend.resolve_layout(instance)
    q = tuple(query_positions) if query_positions is not None else (layout.last_token,)
    layers = tuple(sorted({l for l, _ in heads}))
    hs = tuple(sorted({h for _, h in heads}))
    trace = backend.run_forward(instance, CaptureSpec({"attention_weights"}, layers, q, hs)).trace
    stack = []
    for l, h in heads:
        stack.append(trace.at("attention_weights", l, q, head=h))  # [Q, S]
    values, labels = profile_from_weights(np.stack(stack), layout.groups())
    return AttentionProfile(values, labels, q, tuple((int(l), int(h)) for l, h in heads))


def mean_profile(profiles: Sequence[AttentionProfile]) -> AttentionProfile:
    """Average profiles with identical group labels and query count."""
    first = profiles[0]
    for p in profiles[1:]:
        if p.groups != first.groups or p.values.shape != first.values.shape:
            raise ConfigError("profiles have different groups or query counts")
    return AttentionProfile(
        np.mean([p.values for p in profiles], axis=0), first.groups, first.query_positions, first.heads, first.note
    )
