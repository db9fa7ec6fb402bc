"""Rasterization of scenes to RGB arrays."""
from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from ..errors import InvariantError
from .palette import BACKGROUND, COLORS, SHAPE_OUTLINES
from .types import SceneSpec

# Shapes are inset from the 56 px box so neighbours never touch.
INSET_PX = 4


def check_layout(scene: SceneSpec) -> None:
    """Raise if object boxes overlap or leave the image."""
    h, w = scene.image_size
    boxes = [scene.object_bbox(i) for i in range(len(scene.objects))]
    for i, (x0, y0, x1, y1) in enumerate(boxes):
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise InvariantError("scenegen", f"object {i} box {boxes[i]} outside {w}x{h} image")
        if x0 % scene.patch_px or y0 % scene.patch_px:
            raise InvariantError("scenegen", f"object {i} box not patch aligned")
        for j in range(i):
            a0, b0, a1, b1 = boxes[j]
            if x0 < a1 and a0 < x1 and y0 < b1 and b0 < y1:
                raise InvariantError("scenegen", f"objects {j} and {i} have overlapping boxes")


def render_scene(scene: SceneSpec) -> np.ndarray:
    """Draw the scene; returns a ``(H, W, 3)`` uint8 array."""
    check_layout(scene)
    h, w = scene.image_size
    img = Image.new("RGB", (w, h), BACKGROUND)
    draw = ImageDraw.Draw(img)
    for i, obj in enumerate(scene.objects):
        x0, y0, x1, y1 = scene.object_bbox(i)
        bx0, by0 = x0 + INSET_PX, y0 + INSET_PX
        side = (x1 - x0) - 2 * INSET_PX - 1
        fill = COLORS[obj.color]
        outline = SHAPE_OUTLINES[obj.shape]
        if outline is None:
            draw.ellipse([bx0, by0, bx0 + side, by0 + side], fill=fill)
        else:
            draw.polygon([(bx0 + u * side, by0 + v * side) for u, v in outline], fill=fill)
    return np.array(img, dtype=np.uint8)


def save_png(array: np.ndarray, path) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False)
