"""Dataset manifest: one JSON line per trial, PNG images, YAML config."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import yaml

from .generate import generate_dataset
from .prompts import build_prompt
from .render import render_scene, save_png
from .types import Dataset, GeneratorConfig, TaskKind


def trial_record(instance, image_path: Optional[str]) -> dict:
    s = instance.scene
    return {
        "trial_id": s.trial_id,
        "grid": list(s.grid),
        "image_size": list(s.image_size),
        "cells": [list(o.cell) for o in s.objects],
        "colors": [o.color for o in s.objects],
        "shapes": [o.shape for o in s.objects],
        "target": s.target_index,
        "entropy": s.entropy,
        "prompt": instance.prompt_text,
        "answer": instance.answer,
        "image": image_path,
    }


def write_dataset(
    dataset: Dataset,
    out_dir,
    task_kind: TaskKind = "scene_description",
    images: bool = True,
) -> list[Path]:
    """Write ``config.yaml``, ``trials.jsonl`` and (optionally) PNGs.

    Returns the written paths in a stable order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    cfg_path = out / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(dataset.config.to_dict(), sort_keys=True))
    written.append(cfg_path)
    if images:
        (out / "images").mkdir(exist_ok=True)
    lines = []
    for scene in dataset.scenes:
        inst = build_prompt(scene, task_kind)
        rel = None
        if images:
            rel = f"images/{scene.trial_id:06d}.png"
            save_png(render_scene(scene), out / rel)
            written.append(out / rel)
        lines.append(json.dumps(trial_record(inst, rel), sort_keys=True))
    manifest = out / "trials.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    written.insert(1, manifest)
    return written


def load_config(path) -> GeneratorConfig:
    return GeneratorConfig.from_dict(yaml.safe_load(Path(path).read_text()))


def read_manifest(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def regenerate(path) -> Dataset:
    """Rebuild a dataset from a written ``config.yaml``."""
    return generate_dataset(load_config(path))
