"""Records exchanged with a backend: layouts, capture/edit specs, traces."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from ..errors import EditError

Site = Literal["residual", "head_output", "head_z", "attention_weights", "key_proj", "value_proj"]
SITES: tuple[str, ...] = ("residual", "head_output", "head_z", "attention_weights", "key_proj", "value_proj")
EDITABLE_SITES: tuple[str, ...] = ("residual", "head_output", "head_z", "key_proj", "value_proj")
HEAD_SITES = ("head_output", "head_z")
KV_SITES = ("key_proj", "value_proj")


@dataclass(frozen=True)
class TokenLayout:
    """Token indices of the semantically meaningful spans of one prompt.

    Objects are numbered ``n = 0..M-1`` in description order (see
    :attr:`vlbind.scenegen.TaskInstance.object_order`). Caption spans are
    tuples because a word may tokenize to several tokens; ``multi_token``
    names the words for which that happened.
    """

    image_spans: dict[int, tuple[int, ...]]
    object_cells: dict[int, tuple[int, int]]
    caption_colors: dict[int, tuple[int, ...]]
    caption_shapes: dict[int, tuple[int, ...]]
    commas: tuple[int, ...]
    last_token: int
    n_tokens: int
    image_token_range: tuple[int, int] = (0, 0)
    multi_token: tuple[str, ...] = ()

    def span_of_cell(self, cell) -> tuple[int, ...]:
        for n, c in self.object_cells.items():
            if c == tuple(cell):
                return self.image_spans[n]
        raise KeyError(f"no object at cell {cell}")

    def groups(self) -> dict[str, tuple[int, ...]]:
        """Labelled, disjoint token groups (``pos_n``, ``C_n``, ``S_n``, ``commas``)."""
        out: dict[str, tuple[int, ...]] = {}
        for n in sorted(self.image_spans):
            out[f"pos_{n}"] = self.image_spans[n]
        for n in sorted(self.caption_colors):
            out[f"C_{n}"] = self.caption_colors[n]
            if n in self.caption_shapes:
                out[f"S_{n}"] = self.caption_shapes[n]
        for n in sorted(set(self.caption_shapes) - set(self.caption_colors)):
            out[f"S_{n}"] = self.caption_shapes[n]
        if self.commas:
            out["commas"] = self.commas
        return out


@dataclass(frozen=True)
class CaptureSpec:
    """What to record. ``None`` means every layer / position / head."""

    sites: frozenset = frozenset({"residual"})
    layers: Optional[tuple[int, ...]] = None
    positions: Optional[tuple[int, ...]] = None
    heads: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "sites", frozenset(self.sites))
        for s in self.sites:
            if s not in SITES:
                raise EditError(f"unknown capture site {s!r}")
        for name in ("layers", "positions", "heads"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(int(x) for x in v))


@dataclass(frozen=True)
class EditSpec:
    """One in-flight activation edit.

    ``positions`` may use negative indices (``-1`` is the current last
    token, re-resolved at every decoding step). ``head`` selects one query
    head (``head_output``/``head_z``) or key/value head (``key_proj``/
    ``value_proj``); ``None`` edits all heads at once. ``payload`` broadcasts
    over positions: shape ``[width]`` or ``[len(positions), width]`` (with an
    extra head axis before ``width`` when ``head`` is ``None`` on a head
    site).
    """

    site: str
    layer: int
    positions: tuple[int, ...]
    payload: np.ndarray
    mode: Literal["replace", "add"] = "replace"
    head: Optional[int] = None

    def __post_init__(self):
        if self.site not in EDITABLE_SITES:
            raise EditError(f"site {self.site!r} is not editable")
        if self.mode not in ("replace", "add"):
            raise EditError(f"unknown edit mode {self.mode!r}")
        object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))
        object.__setattr__(self, "payload", np.asarray(self.payload, dtype=np.float64))


def resolve_positions(positions: Iterable[int], n_tokens: int) -> list[int]:
    out = []
    for p in positions:
        q = p + n_tokens if p < 0 else p
        if not 0 <= q < n_tokens:
            raise EditError(f"position {p} outside sequence of {n_tokens}")
        out.append(q)
    return out


def apply_edit(arr: np.ndarray, edit: EditSpec, n_tokens: int) -> None:
    """Apply ``edit`` in place to a token-major site array.

    ``arr`` is ``[S, width]`` for the residual or ``[S, H, width]`` for
    head-indexed sites.
    """
    pos = resolve_positions(edit.positions, n_tokens)
    width = arr.shape[-1]
    if edit.payload.shape[-1] != width:
        raise EditError(
            f"payload width {edit.payload.shape[-1]} != {edit.site} width {width} at layer {edit.layer}"
        )
    if arr.ndim == 2:
        if edit.head is not None:
            raise EditError("residual edits take no head")
        idx = (pos,)
    else:
        if edit.head is not None:
            if not 0 <= edit.head < arr.shape[1]:
                raise EditError(f"head {edit.head} out of range for {edit.site}")
            idx = (pos, edit.head)
        else:
            idx = (pos,)
    target_shape = arr[idx].shape
    try:
        payload = np.broadcast_to(edit.payload, target_shape)
    except ValueError:
        raise EditError(f"payload shape {edit.payload.shape} does not fit {target_shape}") from None
    if edit.mode == "replace":
        arr[idx] = payload
    else:
        arr[idx] = arr[idx] + payload


@dataclass(frozen=True)
class TraceEntry:
    values: np.ndarray
    positions: tuple[int, ...]
    heads: Optional[tuple[int, ...]] = None


@dataclass
class ActivationTrace:
    """Captured tensors keyed by ``(site, layer)``.

    Layouts: ``residual`` ``[P, d]``; ``head_output``/``head_z``
    ``[P, Hsel, w]``; ``key_proj``/``value_proj`` ``[P, Hkv_sel, w]``;
    ``attention_weights`` ``[Hsel, P, S]`` (post-softmax).
    """

    entries: dict = field(default_factory=dict)
    trial_id: Optional[int] = None

    def add(self, site: str, layer: int, values: np.ndarray, positions, heads=None) -> None:
        self.entries[(site, int(layer))] = TraceEntry(
            np.array(values, copy=True), tuple(positions), None if heads is None else tuple(heads)
        )

    def __contains__(self, key) -> bool:
        return tuple(key) in self.entries

    def keys(self):
        return self.entries.keys()

    def entry(self, site: str, layer: int) -> TraceEntry:
        try:
            return self.entries[(site, int(layer))]
        except KeyError:
            raise KeyError(f"trace has no {site!r} at layer {layer}") from None

    def get(self, site: str, layer: int) -> np.ndarray:
        return self.entry(site, layer).values

    def at(self, site: str, layer: int, positions: Sequence[int], head: Optional[int] = None) -> np.ndarray:
        """Values at absolute token ``positions`` (and optionally one head)."""
        e = self.entry(site, layer)
        rows = [e.positions.index(p) for p in positions]
        if site == "attention_weights":
            v = e.values[:, rows]
            if head is not None:
                v = v[e.heads.index(head)]
            return v
        v = e.values[rows]
        if head is not None:
            if e.heads is None:
                raise KeyError(f"{site} has no head axis")
            v = v[:, e.heads.index(head)]
        return v

    @property
    def sites(self) -> set[str]:
        return {k[0] for k in self.entries}


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray
    trace: ActivationTrace
    layout: Optional[TokenLayout] = None
    generated: Optional[str] = None
    generated_ids: tuple[int, ...] = ()

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.logits))
