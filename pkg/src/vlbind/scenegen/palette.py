"""Named colors and filled-polygon shape geometry."""
from __future__ import annotations

import math

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 30, 30),
    "green": (30, 160, 50),
    "blue": (30, 70, 220),
    "purple": (130, 40, 170),
    "yellow": (240, 210, 20),
    "orange": (245, 130, 20),
    "cyan": (20, 200, 210),
    "magenta": (225, 40, 190),
    "brown": (130, 80, 35),
}

SHAPES: tuple[str, ...] = (
    "circle",
    "triangle",
    "square",
    "star",
    "heart",
    "cross",
    "diamond",
    "pentagon",
    "hexagon",
)

COLOR_NAMES: tuple[str, ...] = tuple(COLORS)

BACKGROUND = (255, 255, 255)


def _regular_polygon(n: int, phase: float = -math.pi / 2) -> list[tuple[float, float]]:
    return [
        (0.5 + 0.5 * math.cos(phase + 2 * math.pi * i / n), 0.5 + 0.5 * math.sin(phase + 2 * math.pi * i / n))
        for i in range(n)
    ]


def _star(points: int = 5, inner: float = 0.2) -> list[tuple[float, float]]:
    out = []
    for i in range(2 * points):
        r = 0.5 if i % 2 == 0 else inner
        a = -math.pi / 2 + math.pi * i / points
        out.append((0.5 + r * math.cos(a), 0.5 + r * math.sin(a)))
    return out


def _heart(n: int = 48) -> list[tuple[float, float]]:
    pts = []
    for i in range(n):
        t = 2 * math.pi * i / n
        x = 16 * math.sin(t) ** 3
        y = 13 * math.cos(t) - 5 * math.cos(2 * t) - 2 * math.cos(3 * t) - math.cos(4 * t)
        pts.append((x, -y))
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    return [((x - x0) / (x1 - x0), (y - y0) / (y1 - y0)) for x, y in pts]


def _cross(arm: float = 0.3) -> list[tuple[float, float]]:
    a, b = 0.5 - arm / 2, 0.5 + arm / 2
    return [(a, 0), (b, 0), (b, a), (1, a), (1, b), (b, b), (b, 1), (a, 1), (a, b), (0, b), (0, a), (a, a)]


# Unit-square outlines; ``None`` means the shape is drawn as an ellipse.
SHAPE_OUTLINES: dict[str, list[tuple[float, float]] | None] = {
    "circle": None,
    "triangle": [(0.5, 0.0), (1.0, 1.0), (0.0, 1.0)],
    "square": [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
    "star": _star(),
    "heart": _heart(),
    "cross": _cross(),
    "diamond": [(0.5, 0.0), (1.0, 0.5), (0.5, 1.0), (0.0, 0.5)],
    "pentagon": _regular_polygon(5),
    "hexagon": _regular_polygon(6, phase=0.0),
}
