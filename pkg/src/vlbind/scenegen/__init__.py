"""Synthetic colored-shape grid stimuli, prompts and manifests."""
from .generate import (
    PCA_CONJUNCTIONS,
    PRESETS,
    check_dataset,
    conjunction_set,
    generate_dataset,
    most_distinct_conjunctions,
    permute_objects,
    two_object_scene,
)
from .io import load_config, read_manifest, write_dataset
from .palette import COLOR_NAMES, COLORS, SHAPES
from .prompts import build_prompt, extend_listing
from .render import check_layout, render_scene
from .types import Dataset, GeneratorConfig, ObjectSpec, SceneSpec, TaskInstance

__all__ = [
    "COLORS",
    "COLOR_NAMES",
    "Dataset",
    "GeneratorConfig",
    "ObjectSpec",
    "PCA_CONJUNCTIONS",
    "PRESETS",
    "SHAPES",
    "SceneSpec",
    "TaskInstance",
    "build_prompt",
    "check_dataset",
    "check_layout",
    "conjunction_set",
    "extend_listing",
    "generate_dataset",
    "load_config",
    "most_distinct_conjunctions",
    "permute_objects",
    "read_manifest",
    "render_scene",
    "two_object_scene",
    "write_dataset",
]
