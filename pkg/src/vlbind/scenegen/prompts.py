"""Prompt templates and expected answers."""
from __future__ import annotations

from typing import Optional, Sequence

from ..errors import ConfigError
from .types import SceneSpec, TaskInstance, TaskKind

_NUMBER_WORDS = (
    "zero one two three four five six seven eight nine ten eleven twelve "
    "thirteen fourteen fifteen sixteen"
).split()


def build_prompt(
    scene: SceneSpec,
    task_kind: TaskKind,
    order: Optional[Sequence[int]] = None,
) -> TaskInstance:
    """Pair ``scene`` with the prompt template for ``task_kind``.

    ``order`` sets the caption order of the described (non-target) objects
    for ``scene_description``; raster order by default.
    """
    objs = scene.objects
    if task_kind == "scene_description":
        if scene.target_index is None:
            raise ConfigError("scene_description needs a target object")
        described = [i for i in scene.raster_order() if i != scene.target_index]
        if order is not None:
            order = list(order)
            if sorted(order) != sorted(described):
                raise ConfigError(f"order {order} must list exactly the non-target objects {described}")
            described = order
        phrases = [f"a {objs[i].description}" for i in described]
        if not phrases:
            text = "This is an image with a"
        elif len(phrases) == 1:
            text = f"This is an image with {phrases[0]} and a"
        else:
            text = "This is an image with " + ", ".join(phrases) + ", and a"
        rest = [i for i in scene.raster_order() if i not in described]
        return TaskInstance(
            scene=scene,
            prompt_text=text,
            answer=scene.target.description,
            task_kind=task_kind,
            object_order=tuple(described + rest),
            n_described=len(described),
        )
    if task_kind == "color_retrieval":
        if scene.target_index is None:
            raise ConfigError("color_retrieval needs a target object")
        target = scene.target
        rest = [i for i in scene.raster_order() if i != scene.target_index]
        return TaskInstance(
            scene=scene,
            prompt_text=f"In this image, the color of the {target.shape} is",
            answer=target.color,
            task_kind=task_kind,
            object_order=tuple([scene.target_index] + rest),
            n_described=0,
        )
    if task_kind == "open_listing":
        if scene.target_index is not None:
            raise ConfigError("open_listing takes no target; clear target_index")
        m = len(objs)
        word = _NUMBER_WORDS[m] if m < len(_NUMBER_WORDS) else str(m)
        return TaskInstance(
            scene=scene,
            prompt_text=f"The {word} objects present in this image are 1.A ",
            answer="",
            task_kind=task_kind,
            object_order=tuple(scene.raster_order()),
            n_described=0,
        )
    raise ConfigError(f"unknown task kind {task_kind!r}")


def extend_listing(instance: TaskInstance, descriptions: Sequence[str]) -> TaskInstance:
    """Append already-listed objects to an open-listing prompt.

    ``["red circle"]`` turns ``"... are 1.A "`` into
    ``"... are 1.A red circle, 2.A "``.
    """
    if instance.task_kind != "open_listing":
        raise ConfigError("extend_listing applies to open_listing instances")
    text = instance.prompt_text
    for k, d in enumerate(descriptions, start=2):
        text = f"{text.rstrip()} {d}, {k}.A "
    scene = instance.scene
    named = []
    for d in descriptions:
        hits = [i for i, o in enumerate(scene.objects) if o.description == d and i not in named]
        if hits:
            named.append(hits[0])
    rest = [i for i in scene.raster_order() if i not in named]
    return TaskInstance(
        scene=scene,
        prompt_text=text,
        answer="",
        task_kind="open_listing",
        object_order=tuple(named + rest),
        n_described=len(named),
    )
