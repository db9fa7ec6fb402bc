"""Deterministic synthetic backend with planted binding circuitry.

The model is a small attention-plus-MLP stack over numpy arrays whose
weights are written by hand so that every mechanism the toolkit looks for
is present at a known place:

* image patch tokens carry ``P_cell + F_obj`` where ``P`` are planted
  position vectors (Gram matrix affine in grid distance) and
  ``F_obj = (F_color + F_shape) / sqrt(2)``;
* a *semantic matching* head lets each caption color/shape word attend to
  the image patches with the same feature and copy their position;
* a *position-ID* head at the query token reads the positions already named
  in the caption; with an *occupancy* head and the following MLP it selects
  the target position (the first unnamed object in raster order, or the
  named object for a ``... is`` query);
* a *feature retrieval* head uses that position as a query against the
  image keys and copies the matched object's features.

At ``sigma == 0`` the last-token residual equals ``P_target`` throughout
the position stage and ``F_target`` throughout the feature stage. Every
other head writes into a junk subspace that the MLPs clear, so it has no
causal effect on the output.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, EditError, LayoutError
from ..scenegen.palette import COLOR_NAMES, SHAPES
from ..scenegen.render import check_layout
from ..scenegen.types import SceneSpec, TaskInstance
from .tokenizer import WordTokenizer, align_caption
from .types import (
    HEAD_SITES,
    KV_SITES,
    ActivationTrace,
    CaptureSpec,
    EditSpec,
    ForwardResult,
    TokenLayout,
    apply_edit,
    resolve_positions,
)

_WORD_DIM = 8
_JUNK_DIM = 16
_NO_KEY = -np.inf


@dataclass(frozen=True)
class SyntheticBackendConfig:
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 128
    max_grid: tuple[int, int] = (4, 4)
    # planted circuit placement (layer, head)
    semantic_layer: int = 1
    semantic_head: int = 2
    copy_layer: int = 2
    copy_head: int = 1
    position_layer: int = 3
    position_head: int = 0
    occupancy_head: int = 3
    retrieval_layer: int = 5
    retrieval_head: int = 1
    # geometry / sharpness
    position_gram_slope: float = 1.0
    beta: float = 1000.0
    raster_bias: float = 1e-6
    # noise: sigma is the expected norm of the added vectors
    sigma: float = 0.0
    low_entropy_noise: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticBackendConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown synthetic backend keys: {sorted(unknown)}")
        d = dict(d)
        if "max_grid" in d:
            d["max_grid"] = tuple(d["max_grid"])
        return cls(**d)

    @property
    def position_stage(self) -> range:
        return range(self.position_layer, self.retrieval_layer)

    @property
    def feature_stage(self) -> range:
        return range(self.retrieval_layer, self.n_layers)

    @property
    def planted_heads(self) -> dict[str, tuple[int, int]]:
        return {
            "semantic_matching": (self.semantic_layer, self.semantic_head),
            "copy_previous": (self.copy_layer, self.copy_head),
            "position_id": (self.position_layer, self.position_head),
            "occupancy": (self.position_layer, self.occupancy_head),
            "feature_retrieval": (self.retrieval_layer, self.retrieval_head),
        }

    def validate(self) -> None:
        if not (0 <= self.semantic_layer < self.copy_layer < self.position_layer < self.retrieval_layer < self.n_layers):
            raise ConfigError("planted layers must satisfy semantic < copy < position < retrieval < n_layers")
        for name, (layer, head) in self.planted_heads.items():
            if not 0 <= head < self.n_heads:
                raise ConfigError(f"{name} head index {head} outside {self.n_heads} heads")
        if self.position_head == self.occupancy_head:
            raise ConfigError("position-ID and occupancy heads share a slot")
        if min(self.sigma, self.low_entropy_noise) < 0:
            raise ConfigError("noise scales must be >= 0")


@dataclass
class _Head:
    kind: str
    wq: Optional[np.ndarray]
    wk: Optional[np.ndarray]
    wv: np.ndarray
    mask: str


class SyntheticBackend:
    """Backend implementing the capture/edit protocol on planted weights."""

    family = "synthetic"

    def __init__(self, config: SyntheticBackendConfig = SyntheticBackendConfig()):
        config.validate()
        self.config = config
        self.n_layers = config.n_layers
        self.n_heads = config.n_heads
        self.n_kv_heads = config.n_heads
        self.d_model = config.d_model
        self.d_head = config.d_model
        self.tokenizer = WordTokenizer()
        self._build()

    # ------------------------------------------------------------------ weights
    def _build(self) -> None:
        cfg = self.config
        d = cfg.d_model
        mr, mc = cfg.max_grid
        nc = mr * mc
        self.n_cells = nc
        sizes = [
            ("word", _WORD_DIM),
            ("pos", nc),
            ("color", len(COLOR_NAMES)),
            ("shape", len(SHAPES)),
            ("desc", nc),
            ("ds", nc),
            ("occ", nc),
            ("junk", _JUNK_DIM),
        ]
        need = sum(s for _, s in sizes)
        if need > d:
            raise ConfigError(f"d_model={d} too small for planted subspaces ({need} dims)")
        rng = np.random.default_rng(cfg.seed)
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        self.basis: dict[str, np.ndarray] = {}
        start = 0
        for name, size in sizes:
            self.basis[name] = q[:, start : start + size]
            start += size

        cells = np.array([(r, c) for r in range(mr) for c in range(mc)], dtype=float)
        dist = np.sqrt(((cells[:, None] - cells[None]) ** 2).sum(-1))
        gram = 1.0 - cfg.position_gram_slope * dist / dist.max()
        try:
            chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise ConfigError(
                f"position_gram_slope={cfg.position_gram_slope} gives rank-deficient position embeddings"
            ) from None
        self.position_gram = gram
        self._chol_inv = np.linalg.inv(chol)
        B = self.basis
        self.P = chol @ B["pos"].T  # [n_cells, d]
        self.F_color = B["color"].T.copy()
        self.F_shape = B["shape"].T.copy()
        planted = np.vstack([self.P, self.F_color, self.F_shape])
        if np.linalg.matrix_rank(planted) != planted.shape[0]:
            raise ConfigError("planted position/feature embeddings are linearly dependent")

        V = self.tokenizer.vocab_size
        w = rng.standard_normal((V, _WORD_DIM))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        self.word_emb = w @ B["word"].T
        tok = self.tokenizer
        self._color_ids = {c: tok.index[c] for c in COLOR_NAMES}
        self._shape_ids = {s: tok.index[s] for s in SHAPES}
        for c, i in self._color_ids.items():
            self.word_emb[i] += self.F_color[COLOR_NAMES.index(c)]
        for s, i in self._shape_ids.items():
            self.word_emb[i] += self.F_shape[SHAPES.index(s)]

        def proj(*names):
            return sum(B[n] @ B[n].T for n in names)

        def iso(src, dst):
            return B[src] @ B[dst].T

        self._proj_feat = proj("color", "shape")
        self._basis_feat = np.hstack([B["color"], B["shape"]])

        heads: list[list[_Head]] = []
        for layer in range(cfg.n_layers):
            row = []
            for h in range(cfg.n_heads):
                wq = rng.standard_normal((d, d)) / np.sqrt(d)
                wk = rng.standard_normal((d, d)) / np.sqrt(d)
                wv = (rng.standard_normal((d, _JUNK_DIM)) / np.sqrt(d)) @ B["junk"].T
                row.append(_Head("null", wq, wk, wv, "causal"))
            heads.append(row)
        heads[cfg.semantic_layer][cfg.semantic_head] = _Head(
            "semantic_matching", cfg.beta * self._proj_feat, self._proj_feat, iso("pos", "desc"), "object"
        )
        heads[cfg.copy_layer][cfg.copy_head] = _Head("copy_previous", None, None, proj("desc"), "previous")
        heads[cfg.position_layer][cfg.position_head] = _Head(
            "position_id", None, None, iso("desc", "ds"), "caption_features"
        )
        heads[cfg.position_layer][cfg.occupancy_head] = _Head(
            "occupancy", None, None, iso("pos", "occ"), "object"
        )
        heads[cfg.retrieval_layer][cfg.retrieval_head] = _Head(
            "feature_retrieval",
            cfg.beta * proj("pos"),
            proj("pos", "color", "shape"),
            self._proj_feat,
            "object",
        )
        self.heads = heads

        U = np.zeros((V, d))
        for c, i in self._color_ids.items():
            U[i] = 2.0 * self.F_color[COLOR_NAMES.index(c)]
        for s, i in self._shape_ids.items():
            U[i] = self.F_shape[SHAPES.index(s)]
        self.unembed = U
        feat_ids = list(self._color_ids.values()) + list(self._shape_ids.values())
        self._after_color = np.zeros(V)
        self._after_color[list(self._color_ids.values())] = -10.0
        self._after_shape = np.zeros(V)
        self._after_shape[feat_ids] = -10.0
        self._after_shape[tok.index[","]] = 5.0

    # ------------------------------------------------------------------ helpers
    def cell_id(self, cell) -> int:
        r, c = cell
        mr, mc = self.config.max_grid
        if not (0 <= r < mr and 0 <= c < mc):
            raise LayoutError(f"cell {cell} outside the backend's {mr}x{mc} position table")
        return r * mc + c

    def position_vector(self, cell) -> np.ndarray:
        return self.P[self.cell_id(cell)]

    def feature_vector(self, color: str, shape: str) -> np.ndarray:
        return (self.F_color[COLOR_NAMES.index(color)] + self.F_shape[SHAPES.index(shape)]) / np.sqrt(2.0)

    def answer_token_id(self, word: str) -> int:
        """First sub-token of ``word``."""
        ids = self.tokenizer.token_ids(word)
        if not ids or ids[0] == self.tokenizer.index[WordTokenizer.UNK]:
            raise KeyError(f"{word!r} is not in the vocabulary")
        return ids[0]

    def site_width(self, site: str, layer: int = 0) -> int:
        return self.d_model

    @staticmethod
    def _image_key(scene: SceneSpec) -> int:
        desc = repr((scene.trial_id, scene.grid, scene.image_patches, [(o.color, o.shape, o.cell) for o in scene.objects]))
        return zlib.crc32(desc.encode())

    def _noise(self, key: Sequence[int], shape) -> np.ndarray:
        return np.random.default_rng([self.config.seed, *key]).standard_normal(shape)

    # ------------------------------------------------------------------ layout
    def resolve_layout(self, instance: TaskInstance, n_extra: int = 0) -> TokenLayout:
        scene = instance.scene
        try:
            check_layout(scene)
        except Exception as exc:
            raise LayoutError(str(exc)) from exc
        n_r, n_c = scene.image_patches
        n_img = n_r * n_c
        spans, cells = {}, {}
        order = instance.object_order or tuple(scene.raster_order())
        for n, idx in enumerate(order):
            toks = tuple(pr * n_c + pc for pr, pc in scene.object_patches_of(idx))
            if len(toks) != scene.object_patches**2:
                raise LayoutError(f"object {idx} maps to {len(toks)} tokens")
            spans[n] = toks
            cells[n] = scene.objects[idx].cell
        ids, offsets = self.tokenizer.encode(instance.prompt_text)
        colors, shapes, commas = align_caption(instance, offsets, base=n_img)
        multi = tuple(
            sorted(
                {scene.objects[order[n]].color for n, t in colors.items() if len(t) > 1}
                | {scene.objects[order[n]].shape for n, t in shapes.items() if len(t) > 1}
            )
        )
        n_tokens = n_img + len(ids) + n_extra
        return TokenLayout(
            image_spans=spans,
            object_cells=cells,
            caption_colors=colors,
            caption_shapes=shapes,
            commas=commas,
            last_token=n_tokens - 1,
            n_tokens=n_tokens,
            image_token_range=(0, n_img),
            multi_token=multi,
        )

    # ------------------------------------------------------------------ forward
    def _embed(self, scene: SceneSpec, ids: Sequence[int]):
        cfg = self.config
        d = cfg.d_model
        n_r, n_c = scene.image_patches
        n_img = n_r * n_c
        S = n_img + len(ids)
        x = np.zeros((S, d))
        x[:n_img] = self.word_emb[self.tokenizer.index[WordTokenizer.IMAGE]]
        is_obj = np.zeros(S, dtype=bool)
        for i, obj in enumerate(scene.objects):
            vec = self.position_vector(obj.cell) + self.feature_vector(obj.color, obj.shape)
            for pr, pc in scene.object_patches_of(i):
                t = pr * n_c + pc
                x[t] = vec
                is_obj[t] = True
        x[n_img:] = self.word_emb[np.asarray(ids, dtype=int)]
        key = self._image_key(scene)
        if cfg.sigma > 0:
            x[:n_img] += self._noise((1, key), (n_img, d)) * cfg.sigma / np.sqrt(d)
            for j, w in enumerate(ids):
                x[n_img + j] += self._noise((2, key, j, w), d) * cfg.sigma / np.sqrt(d)
        ids = np.asarray(ids, dtype=int)
        color_set = set(self._color_ids.values())
        shape_set = set(self._shape_ids.values())
        meta = {
            "n_img": n_img,
            "is_obj": is_obj,
            "is_color": np.r_[np.zeros(n_img, bool), [i in color_set for i in ids]],
            "is_shape": np.r_[np.zeros(n_img, bool), [i in shape_set for i in ids]],
            "query_mode": np.r_[np.zeros(n_img, bool), ids == self.tokenizer.index["is"]],
            "ids": ids,
            "key": key,
            "low": scene.entropy == "low",
        }
        meta["is_featw"] = meta["is_color"] | meta["is_shape"]
        return x, meta

    def _mask(self, kind: str, S: int, meta) -> np.ndarray:
        causal = np.tril(np.ones((S, S), dtype=bool))
        if kind == "causal":
            return causal
        if kind == "object":
            m = causal & meta["is_obj"][None, :]
        elif kind == "previous":
            m = np.eye(S, k=-1, dtype=bool)
        elif kind == "caption_features":
            m = np.tril(np.ones((S, S), dtype=bool), k=-1) & meta["is_featw"][None, :]
        else:
            raise ValueError(kind)
        # rows with no valid key fall back to a sink at token 0, an image
        # token that carries no description/occupancy content
        m[~m.any(axis=1), 0] = True
        return m

    def _select_targets(self, xt: np.ndarray, query_mode: np.ndarray) -> np.ndarray:
        B = self.basis
        occ = xt @ B["occ"] @ self._chol_inv
        ds = xt @ B["ds"] @ self._chol_inv
        rank = np.arange(self.n_cells, dtype=float) * self.config.raster_bias
        out = np.zeros_like(xt)
        for j in range(xt.shape[0]):
            top = occ[j].max()
            if top <= 1e-9:
                continue
            occupied = occ[j] > 0.5 * top
            if query_mode[j]:
                score = np.where(occupied, ds[j] - rank, -np.inf)
                tid = int(np.argmax(score))
            else:
                score = np.where(occupied, ds[j] + rank, np.inf)
                tid = int(np.argmin(score))
            out[j] = self.P[tid]
        return out

    def _mlp(self, layer: int, x: np.ndarray, x0: np.ndarray, meta) -> np.ndarray:
        cfg = self.config
        B = self.basis
        d = cfg.d_model
        n_img = meta["n_img"]
        x = x - (x @ B["junk"]) @ B["junk"].T
        x[:n_img] = x0[:n_img]
        text = slice(n_img, None)
        ids = meta["ids"]
        low = meta["low"] and cfg.low_entropy_noise > 0
        if layer == cfg.copy_layer and low:
            nd = B["desc"].shape[1]
            for j, w in enumerate(ids):
                eps = self._noise((4, meta["key"], j, w), nd) * cfg.low_entropy_noise / np.sqrt(nd)
                x[n_img + j] += B["desc"] @ eps
        if layer == cfg.position_layer:
            xt = self._select_targets(x[text], meta["query_mode"][n_img:])
            for j, w in enumerate(ids):
                if cfg.sigma > 0:
                    xt[j] += self._noise((3, meta["key"], j, w), d) * cfg.sigma / np.sqrt(d)
                if low:
                    npos = B["pos"].shape[1]
                    eps = self._noise((5, meta["key"], j, w), npos) * cfg.low_entropy_noise / np.sqrt(npos)
                    xt[j] += B["pos"] @ eps
            x[text] = xt
        if layer == cfg.retrieval_layer:
            xt = x[text] @ self._proj_feat
            if cfg.sigma > 0:
                for j, w in enumerate(ids):
                    xt[j] += self._noise((6, meta["key"], j, w), d) * cfg.sigma / np.sqrt(d)
            x[text] = xt
        return x

    def _logits(self, x_last: np.ndarray, last_id: int) -> np.ndarray:
        logits = self.unembed @ x_last
        if last_id in self._color_ids.values():
            logits = logits + self._after_color
        elif last_id in self._shape_ids.values():
            logits = logits + self._after_shape
        return logits

    def forward_ids(
        self,
        scene: SceneSpec,
        ids: Sequence[int],
        capture: Optional[CaptureSpec] = None,
        edits: Sequence[EditSpec] = (),
    ) -> tuple[np.ndarray, ActivationTrace]:
        """Run the stack on ``scene`` followed by prompt token ``ids``."""
        cfg = self.config
        x, meta = self._embed(scene, ids)
        x0 = x.copy()
        S = x.shape[0]
        by_layer: dict[tuple[int, str], list[EditSpec]] = {}
        for e in edits:
            if not 0 <= e.layer < cfg.n_layers:
                raise EditError(f"edit layer {e.layer} outside {cfg.n_layers} layers")
            resolve_positions(e.positions, S)
            by_layer.setdefault((e.layer, e.site), []).append(e)
        trace = ActivationTrace(trial_id=scene.trial_id)
        want_layers = set(range(cfg.n_layers)) if capture is None or capture.layers is None else set(capture.layers)
        sites = frozenset() if capture is None else capture.sites
        if capture is not None and capture.layers is not None:
            bad = [l for l in capture.layers if not 0 <= l < cfg.n_layers]
            if bad:
                raise EditError(f"capture layers {bad} outside model depth")
        if capture is not None and capture.heads is not None:
            bad = [h for h in capture.heads if not 0 <= h < cfg.n_heads]
            if bad:
                raise EditError(f"capture heads {bad} outside {cfg.n_heads} heads")
        cap_pos = list(range(S)) if capture is None or capture.positions is None else resolve_positions(capture.positions, S)
        cap_heads = list(range(cfg.n_heads)) if capture is None or capture.heads is None else list(capture.heads)
        # Image-token head outputs are overwritten by the MLP reset, so only
        # text rows (plus captured / edited rows) need attention.
        rows = set(range(meta["n_img"], S))
        if sites & {"attention_weights", *HEAD_SITES}:
            rows.update(cap_pos)
        for e in edits:
            if e.site in HEAD_SITES:
                rows.update(resolve_positions(e.positions, S))
        # text rows and extra rows run as separate blocks so that capturing
        # never changes the matmul shapes (and rounding) of the base pass
        R0 = np.arange(meta["n_img"], S)
        Rx = np.array(sorted(rows.difference(R0.tolist())), dtype=int)
        blocks = [b for b in (R0, Rx) if len(b)]
        R = np.concatenate(blocks)
        spans, off = [], 0
        for b in blocks:
            spans.append((b, slice(off, off + len(b))))
            off += len(b)
        row_of = {int(r): i for i, r in enumerate(R)}
        masks: dict[str, np.ndarray] = {}
        cap_rows = [row_of[p] for p in cap_pos] if (sites & {"attention_weights", *HEAD_SITES}) else []

        for layer in range(cfg.n_layers):
            row = self.heads[layer]
            H = len(row)
            keys = np.zeros((S, H, cfg.d_model))
            vals = np.empty((S, H, cfg.d_model))
            queries = np.zeros((len(R), H, cfg.d_model))
            for h, head in enumerate(row):
                if head.wq is not None:
                    for b, sl in spans:
                        queries[sl, h] = x[b] @ head.wq
                    keys[:, h] = x @ head.wk
                vals[:, h] = x @ head.wv
            for e in by_layer.get((layer, "key_proj"), ()):
                apply_edit(keys, e, S)
            for e in by_layer.get((layer, "value_proj"), ()):
                apply_edit(vals, e, S)
            need_attn = "attention_weights" in sites and layer in want_layers
            attn = np.empty((H, len(R), S)) if need_attn else None
            outs = np.zeros((S, H, cfg.d_model))
            for h, head in enumerate(row):
                if head.mask not in masks:
                    masks[head.mask] = self._mask(head.mask, S, meta)[R]
                for b, sl in spans:
                    m = masks[head.mask][sl]
                    if head.wq is None:
                        scores = np.where(m, 0.0, _NO_KEY)
                    else:
                        scores = np.where(m, queries[sl, h] @ keys[:, h].T, _NO_KEY)
                    scores -= scores.max(axis=1, keepdims=True)
                    w = np.exp(scores)
                    w /= w.sum(axis=1, keepdims=True)
                    if need_attn:
                        attn[h, sl] = w
                    outs[b, h] = w @ vals[:, h]
            for site in ("head_z", "head_output"):
                for e in by_layer.get((layer, site), ()):
                    apply_edit(outs, e, S)
            if layer in want_layers:
                for site in sites:
                    if site in HEAD_SITES:
                        trace.add(site, layer, outs[cap_pos][:, cap_heads], cap_pos, cap_heads)
                    elif site in KV_SITES:
                        arr = keys if site == "key_proj" else vals
                        trace.add(site, layer, arr[cap_pos][:, cap_heads], cap_pos, cap_heads)
                    elif site == "attention_weights":
                        trace.add(site, layer, attn[cap_heads][:, cap_rows], cap_pos, cap_heads)
            x = x + outs.sum(axis=1)
            x = self._mlp(layer, x, x0, meta)
            for e in by_layer.get((layer, "residual"), ()):
                apply_edit(x, e, S)
            if layer in want_layers and "residual" in sites:
                trace.add("residual", layer, x[cap_pos], cap_pos)
        logits = self._logits(x[-1], int(meta["ids"][-1]))
        return logits, trace

    # ------------------------------------------------------------------ protocol
    def run_forward(
        self,
        instance: TaskInstance,
        capture: Optional[CaptureSpec] = None,
        edits: Sequence[EditSpec] = (),
    ) -> ForwardResult:
        layout = self.resolve_layout(instance)
        ids, _ = self.tokenizer.encode(instance.prompt_text)
        logits, trace = self.forward_ids(instance.scene, ids, capture, edits)
        return ForwardResult(logits=logits, trace=trace, layout=layout)

    def generate(
        self,
        instance: TaskInstance,
        max_new_tokens: int = 2,
        edits: Sequence[EditSpec] = (),
        capture: Optional[CaptureSpec] = None,
    ) -> ForwardResult:
        """Greedy continuation; ``edits`` apply at every decoding step."""
        layout = self.resolve_layout(instance)
        ids, _ = self.tokenizer.encode(instance.prompt_text)
        first_logits, first_trace = None, None
        new: list[int] = []
        for step in range(max_new_tokens):
            logits, trace = self.forward_ids(instance.scene, ids + new, capture if step == 0 else None, edits)
            if step == 0:
                first_logits, first_trace = logits, trace
            new.append(int(np.argmax(logits)))
        if first_logits is None:
            first_logits, first_trace = self.forward_ids(instance.scene, ids, capture, edits)
        return ForwardResult(
            logits=first_logits,
            trace=first_trace,
            layout=layout,
            generated=self.tokenizer.decode(new),
            generated_ids=tuple(new),
        )


def make_synthetic_backend(config: Optional[SyntheticBackendConfig] = None, **overrides) -> SyntheticBackend:
    """Build a synthetic backend; keyword overrides patch the default config."""
    cfg = config or SyntheticBackendConfig()
    if overrides:
        cfg = SyntheticBackendConfig.from_dict({**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **overrides})
    return SyntheticBackend(cfg)
