"""Qwen2-VL adapter built on torch forward hooks.

Needs the optional ``hf`` extra (torch, transformers). Image tokens are the
post-merge tokens: one token per 28x28 pixel block, so a 56x56 object maps
to 4 tokens in raster order inside the image span.

Sites:

* ``residual``: decoder layer output;
* ``head_z``: per-head attention output before ``o_proj`` (``head_dim`` wide);
* ``head_output``: per-head contribution after ``o_proj`` (``hidden`` wide);
* ``key_proj`` / ``value_proj``: ``k_proj`` / ``v_proj`` outputs per kv head,
  before the rotary embedding;
* ``attention_weights``: post-softmax weights (eager attention).

Generation re-runs the full sequence at every step (no KV cache) so edits
at negative positions follow the growing sequence.
"""
from __future__ import annotations

import inspect
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np

from ..errors import EditError, LayoutError
from ..scenegen.render import render_scene
from ..scenegen.types import TaskInstance
from .protocol import cache_dir
from .tokenizer import align_caption
from .types import (
    HEAD_SITES,
    KV_SITES,
    SITES,
    ActivationTrace,
    CaptureSpec,
    EditSpec,
    ForwardResult,
    TokenLayout,
    resolve_positions,
)

DEFAULT_MODEL = "Qwen/Qwen2-VL-7B-Instruct"
TOKEN_PX = 28


def _torch():
    import torch

    return torch


class Qwen2VLBackend:
    """Capture/edit protocol over a ``Qwen2VLForConditionalGeneration``."""

    family = "qwen2-vl"

    def __init__(self, model, tokenizer, image_processor, device: str = "cpu"):
        self.model = model.eval().to(device)
        self.tokenizer = tokenizer
        self.image_processor = image_processor
        self.device = device
        cfg = model.config
        tcfg = getattr(cfg, "text_config", cfg)
        self.n_layers = tcfg.num_hidden_layers
        self.n_heads = tcfg.num_attention_heads
        self.n_kv_heads = tcfg.num_key_value_heads
        self.d_model = tcfg.hidden_size
        self.d_head = self.d_model // self.n_heads
        self.image_token_id = cfg.image_token_id
        self.vision_start_id = cfg.vision_start_token_id
        self.vision_end_id = cfg.vision_end_token_id
        self.layers = self._find_layers()
        self._dtype = next(model.parameters()).dtype
        # newer transformers compute M-RoPE from explicit modality ids
        self._wants_mm_types = "mm_token_type_ids" in inspect.signature(model.model.forward).parameters

    @classmethod
    def from_pretrained(cls, model_id: str = DEFAULT_MODEL, device: str = "cpu", dtype: str = "float32", **kw):
        torch = _torch()
        from transformers import AutoTokenizer, Qwen2VLForConditionalGeneration, Qwen2VLImageProcessor

        cd = str(cache_dir())
        model = Qwen2VLForConditionalGeneration.from_pretrained(
            model_id, cache_dir=cd, dtype=getattr(torch, dtype), attn_implementation="eager", **kw
        )
        tok = AutoTokenizer.from_pretrained(model_id, cache_dir=cd)
        ip = Qwen2VLImageProcessor.from_pretrained(model_id, cache_dir=cd)
        return cls(model, tok, ip, device)

    def _find_layers(self):
        m = self.model
        for path in ("model.language_model.layers", "model.layers", "language_model.model.layers"):
            obj = m
            try:
                for part in path.split("."):
                    obj = getattr(obj, part)
                return obj
            except AttributeError:
                continue
        raise LayoutError("could not locate the decoder layers")

    # ------------------------------------------------------------------ inputs
    def _encode(self, instance: TaskInstance, extra_ids: Sequence[int] = ()):
        torch = _torch()
        img = render_scene(instance.scene)
        enc = self.image_processor(images=[img], return_tensors="pt")
        grid = enc["image_grid_thw"][0].tolist()
        merge = getattr(self.image_processor, "merge_size", 2)
        n_r, n_c = grid[1] // merge, grid[2] // merge
        if (n_r, n_c) != tuple(instance.scene.image_patches):
            raise LayoutError(
                f"image maps to {n_r}x{n_c} tokens, expected {instance.scene.image_patches} (no resizing allowed)"
            )
        t = self.tokenizer(instance.prompt_text, add_special_tokens=False, return_offsets_mapping=True)
        ids = [self.vision_start_id] + [self.image_token_id] * (n_r * n_c) + [self.vision_end_id]
        base = len(ids)
        ids = ids + list(t["input_ids"]) + list(extra_ids)
        inputs = {
            "input_ids": torch.tensor([ids], device=self.device),
            "attention_mask": torch.ones(1, len(ids), dtype=torch.long, device=self.device),
            "pixel_values": enc["pixel_values"].to(self.device, self._dtype),
            "image_grid_thw": enc["image_grid_thw"].to(self.device),
        }
        if self._wants_mm_types:
            mm = [int(i == self.image_token_id) for i in ids]
            inputs["mm_token_type_ids"] = torch.tensor([mm], device=self.device)
        return inputs, base, [tuple(o) for o in t["offset_mapping"]]

    def resolve_layout(self, instance: TaskInstance) -> TokenLayout:
        inputs, base, offsets = self._encode(instance)
        scene = instance.scene
        n_c = scene.image_patches[1]
        img0 = 1  # after <|vision_start|>
        order = instance.object_order or tuple(scene.raster_order())
        spans, cells = {}, {}
        for n, idx in enumerate(order):
            spans[n] = tuple(img0 + pr * n_c + pc for pr, pc in scene.object_patches_of(idx))
            cells[n] = scene.objects[idx].cell
        colors, shapes, commas = align_caption(instance, offsets, base=base)
        multi = tuple(
            sorted({w for n, idx in enumerate(order) for w in scene.objects[idx].conjunction if self._n_sub(w) > 1})
        )
        n_tokens = inputs["input_ids"].shape[1]
        return TokenLayout(
            image_spans=spans,
            object_cells=cells,
            caption_colors=colors,
            caption_shapes=shapes,
            commas=commas,
            last_token=n_tokens - 1,
            n_tokens=n_tokens,
            image_token_range=(img0, img0 + scene.image_patches[0] * n_c),
            multi_token=multi,
        )

    def _n_sub(self, word: str) -> int:
        return len(self.tokenizer(" " + word, add_special_tokens=False)["input_ids"])

    def answer_token_id(self, word: str) -> int:
        """First sub-token of ``" " + word`` (answers follow a space)."""
        ids = self.tokenizer(" " + word, add_special_tokens=False)["input_ids"]
        if not ids:
            raise KeyError(f"{word!r} does not tokenize")
        return int(ids[0])

    def site_width(self, site: str, layer: int = 0) -> int:
        if site in ("residual", "head_output"):
            return self.d_model
        if site in ("head_z", *KV_SITES):
            return self.d_head
        raise EditError(f"site {site!r} has no width")

    # ------------------------------------------------------------------ hooks
    @contextmanager
    def _hooks(self, S: int, capture: Optional[CaptureSpec], edits: Sequence[EditSpec], trace: ActivationTrace):
        torch = _torch()
        handles = []
        want_layers = set(range(self.n_layers)) if capture is None or capture.layers is None else set(capture.layers)
        sites = frozenset() if capture is None else capture.sites
        cap_pos = (
            list(range(S)) if capture is None or capture.positions is None else resolve_positions(capture.positions, S)
        )
        by = {}
        for e in edits:
            if e.site not in SITES:
                raise EditError(f"unknown site {e.site!r}")
            if not 0 <= e.layer < self.n_layers:
                raise EditError(f"edit layer {e.layer} outside {self.n_layers} layers")
            if e.payload.shape[-1] != self.site_width(e.site):
                raise EditError(f"payload width {e.payload.shape[-1]} != {e.site} width {self.site_width(e.site)}")
            by.setdefault((e.layer, e.site), []).append(e)

        def heads_for(site):
            n = self.n_kv_heads if site in KV_SITES else self.n_heads
            return list(range(n)) if capture is None or capture.heads is None else [h for h in capture.heads if h < n]

        def tens(payload, like):
            return torch.as_tensor(payload, dtype=like.dtype, device=like.device)

        def edit_headwise(x, edits_here, n_h, w):
            # x: [1, S, n_h * w] viewed as [S, n_h, w]
            v = x[0].view(S, n_h, w)
            for e in edits_here:
                pos = resolve_positions(e.positions, S)
                idx = (pos,) if e.head is None else (pos, e.head)
                p = tens(e.payload, v).expand_as(v[idx])
                v[idx] = p if e.mode == "replace" else v[idx] + p
            return x

        for layer, block in enumerate(self.layers):
            attn = block.self_attn

            def kv_hook(site, layer=layer):
                def hook(mod, inp, out):
                    out = out.clone()
                    if (layer, site) in by:
                        out = edit_headwise(out, by[(layer, site)], self.n_kv_heads, self.d_head)
                    if layer in want_layers and site in sites:
                        hs = heads_for(site)
                        v = out[0].view(S, self.n_kv_heads, self.d_head)[cap_pos][:, hs]
                        trace.add(site, layer, v.float().cpu().numpy(), cap_pos, hs)
                    return out

                return hook

            handles.append(attn.k_proj.register_forward_hook(kv_hook("key_proj")))
            handles.append(attn.v_proj.register_forward_hook(kv_hook("value_proj")))

            def o_pre(mod, args, layer=layer):
                (z,) = args
                z = z.clone()
                if (layer, "head_z") in by:
                    z = edit_headwise(z, by[(layer, "head_z")], self.n_heads, self.d_head)
                if layer in want_layers and "head_z" in sites:
                    hs = heads_for("head_z")
                    v = z[0].view(S, self.n_heads, self.d_head)[cap_pos][:, hs]
                    trace.add("head_z", layer, v.float().cpu().numpy(), cap_pos, hs)
                return (z,)

            def o_post(mod, args, out, layer=layer):
                need_cap = layer in want_layers and "head_output" in sites
                eds = by.get((layer, "head_output"), ())
                if not need_cap and not eds:
                    return out
                (z,) = args
                W = mod.weight.view(self.d_model, self.n_heads, self.d_head)
                zz = z[0].view(S, self.n_heads, self.d_head)
                contrib = torch.einsum("shd,mhd->shm", zz, W)  # [S, H, d_model]
                if eds:
                    new = contrib.clone()
                    for e in eds:
                        pos = resolve_positions(e.positions, S)
                        idx = (pos,) if e.head is None else (pos, e.head)
                        p = tens(e.payload, new)
                        new[idx] = p.expand_as(new[idx]) if e.mode == "replace" else new[idx] + p
                    out = out + (new - contrib).sum(dim=1)[None]
                    contrib = new
                if need_cap:
                    hs = heads_for("head_output")
                    trace.add("head_output", layer, contrib[cap_pos][:, hs].float().cpu().numpy(), cap_pos, hs)
                return out

            handles.append(attn.o_proj.register_forward_pre_hook(o_pre))
            handles.append(attn.o_proj.register_forward_hook(o_post))

            if layer in want_layers and "attention_weights" in sites:

                def attn_hook(mod, inp, out, layer=layer):
                    w = out[1]
                    if w is None:
                        raise EditError("attention weights unavailable; load with attn_implementation='eager'")
                    hs = heads_for("attention_weights")
                    trace.add("attention_weights", layer, w[0][hs][:, cap_pos].float().cpu().numpy(), cap_pos, hs)

                handles.append(attn.register_forward_hook(attn_hook))

            def block_hook(mod, inp, out, layer=layer):
                h = out[0] if isinstance(out, tuple) else out
                if (layer, "residual") in by:
                    h = h.clone()
                    for e in by[(layer, "residual")]:
                        pos = resolve_positions(e.positions, S)
                        p = tens(e.payload, h)
                        h[0, pos] = p.expand_as(h[0, pos]) if e.mode == "replace" else h[0, pos] + p
                if layer in want_layers and "residual" in sites:
                    trace.add("residual", layer, h[0, cap_pos].float().cpu().numpy(), cap_pos)
                return (h, *out[1:]) if isinstance(out, tuple) else h

            handles.append(block.register_forward_hook(block_hook))
        try:
            yield
        finally:
            for h in handles:
                h.remove()

    def _forward(self, instance, capture, edits, extra_ids=()):
        inputs, _, _ = self._encode(instance, extra_ids)
        S = inputs["input_ids"].shape[1]
        if capture is not None:
            for l in capture.layers or ():
                if not 0 <= l < self.n_layers:
                    raise EditError(f"capture layer {l} outside model depth")
        trace = ActivationTrace(trial_id=instance.trial_id)
        with _torch().no_grad(), self._hooks(S, capture, edits, trace):
            out = self.model(**inputs, use_cache=False)
        logits = out.logits[0, -1].float().cpu().numpy().astype(np.float64)
        return logits, trace

    def run_forward(self, instance, capture=None, edits=()) -> ForwardResult:
        logits, trace = self._forward(instance, capture, edits)
        return ForwardResult(logits, trace, self.resolve_layout(instance))

    def generate(self, instance, max_new_tokens: int = 2, edits=(), capture=None) -> ForwardResult:
        new: list[int] = []
        first = None
        for step in range(max(1, max_new_tokens)):
            logits, trace = self._forward(instance, capture if step == 0 else None, edits, new)
            if step == 0:
                first = (logits, trace)
            if step < max_new_tokens:
                new.append(int(np.argmax(logits)))
        text = self.tokenizer.decode(new, skip_special_tokens=True)
        return ForwardResult(first[0], first[1], self.resolve_layout(instance), text, tuple(new))


__all__ = ["Qwen2VLBackend", "DEFAULT_MODEL", "HEAD_SITES"]
