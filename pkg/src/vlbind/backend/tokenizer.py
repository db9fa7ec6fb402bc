"""Word-level tokenizer for the synthetic backend and caption alignment helpers."""
from __future__ import annotations

import re
from typing import Sequence

from ..scenegen.palette import COLOR_NAMES, SHAPES
from ..scenegen.types import TaskInstance

_TOKEN_RE = re.compile(r"[A-Za-z]+|\d+|[^\sA-Za-z\d]")

_TEMPLATE_WORDS = (
    "This is an image with a and In this the color of is The objects present in are A "
    "zero one two three four five six seven eight nine ten eleven twelve thirteen fourteen "
    "fifteen sixteen"
).split()


class WordTokenizer:
    """Splits on words, digit runs and single punctuation marks."""

    UNK = "<unk>"
    IMAGE = "<img>"

    def __init__(self, extra: Sequence[str] = ()):
        words = [self.UNK, self.IMAGE, ",", "."]
        words += [str(i) for i in range(1, 17)]
        words += list(COLOR_NAMES) + list(SHAPES) + _TEMPLATE_WORDS + list(extra)
        self.vocab: list[str] = list(dict.fromkeys(words))
        self.index = {w: i for i, w in enumerate(self.vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> tuple[list[int], list[tuple[int, int]]]:
        ids, offsets = [], []
        for m in _TOKEN_RE.finditer(text):
            ids.append(self.index.get(m.group(), self.index[self.UNK]))
            offsets.append(m.span())
        return ids, offsets

    def decode(self, ids: Sequence[int]) -> str:
        out = ""
        for i in ids:
            w = self.vocab[i]
            if w in (",", ".") or not out:
                out += w
            else:
                out += " " + w
        return out

    def token_ids(self, word: str) -> list[int]:
        return self.encode(word)[0]


def _tokens_in(offsets: Sequence[tuple[int, int]], start: int, end: int, base: int) -> tuple[int, ...]:
    return tuple(base + i for i, (a, b) in enumerate(offsets) if a < end and start < b)


def align_caption(instance: TaskInstance, offsets: Sequence[tuple[int, int]], base: int = 0):
    """Locate caption color/shape words and trailing commas in the prompt.

    ``offsets`` are the character spans of the prompt tokens; ``base`` is the
    absolute index of the first prompt token. Returns ``(colors, shapes,
    commas)`` where ``colors``/``shapes`` map description index ``n`` to a
    token tuple.
    """
    text = instance.prompt_text
    scene = instance.scene
    colors: dict[int, tuple[int, ...]] = {}
    shapes: dict[int, tuple[int, ...]] = {}
    commas: list[int] = []
    if instance.task_kind == "color_retrieval":
        shape = scene.objects[instance.object_order[0]].shape
        i = text.rfind(f"the {shape}")
        if i >= 0:
            s0 = i + 4
            shapes[0] = _tokens_in(offsets, s0, s0 + len(shape), base)
        return colors, shapes, tuple(commas)
    cursor = 0
    for n, obj_idx in enumerate(instance.object_order[: instance.n_described]):
        obj = scene.objects[obj_idx]
        phrase = f"{obj.color} {obj.shape}"
        i = text.find(phrase, cursor)
        if i < 0:
            continue
        colors[n] = _tokens_in(offsets, i, i + len(obj.color), base)
        s0 = i + len(obj.color) + 1
        shapes[n] = _tokens_in(offsets, s0, s0 + len(obj.shape), base)
        cursor = s0 + len(obj.shape)
        j = cursor
        while j < len(text) and text[j] == " ":
            j += 1
        if j < len(text) and text[j] == ",":
            commas.extend(_tokens_in(offsets, j, j + 1, base))
    return colors, shapes, tuple(commas)
