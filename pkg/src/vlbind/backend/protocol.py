"""Backend protocol and the model-family registry."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, runtime_checkable

from ..scenegen.types import TaskInstance
from .types import CaptureSpec, EditSpec, ForwardResult, TokenLayout

CACHE_ENV = "VLBIND_CACHE_DIR"


@runtime_checkable
class Backend(Protocol):
    """What every model adapter provides.

    Layer and head indices are 0-based. ``n_kv_heads`` may be smaller than
    ``n_heads`` (grouped-query attention); key/value sites are indexed by
    kv head, head-output sites by query head.
    """

    family: str
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_model: int

    def resolve_layout(self, instance: TaskInstance) -> TokenLayout: ...

    def run_forward(
        self,
        instance: TaskInstance,
        capture: Optional[CaptureSpec] = None,
        edits: Sequence[EditSpec] = (),
    ) -> ForwardResult: ...

    def generate(
        self,
        instance: TaskInstance,
        max_new_tokens: int = 2,
        edits: Sequence[EditSpec] = (),
        capture: Optional[CaptureSpec] = None,
    ) -> ForwardResult: ...

    def answer_token_id(self, word: str) -> int: ...

    def site_width(self, site: str, layer: int = 0) -> int: ...


_REGISTRY: dict[str, Callable[..., Backend]] = {}


def register_backend(family: str):
    """Decorator registering a backend factory under ``family``."""

    def deco(factory):
        _REGISTRY[family] = factory
        return factory

    return deco


def available_backends() -> list[str]:
    return sorted(_REGISTRY)


def get_backend(family: str, **kwargs) -> Backend:
    """Instantiate the backend registered for ``family``.

    Raises ``KeyError`` for unknown families.
    """
    try:
        factory = _REGISTRY[family]
    except KeyError:
        raise KeyError(f"unknown backend family {family!r}; known: {available_backends()}") from None
    return factory(**kwargs)


def cache_dir() -> Path:
    """Adapter weight cache directory (``$VLBIND_CACHE_DIR`` or ``~/.cache/vlbind``)."""
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "vlbind"))
