"""Forward-pass protocol with activation capture and in-flight edits."""
from .protocol import Backend, available_backends, cache_dir, get_backend, register_backend
from .synthetic import SyntheticBackend, SyntheticBackendConfig, make_synthetic_backend
from .tokenizer import WordTokenizer, align_caption
from .types import (
    EDITABLE_SITES,
    SITES,
    ActivationTrace,
    CaptureSpec,
    EditSpec,
    ForwardResult,
    TokenLayout,
    TraceEntry,
)


@register_backend("synthetic")
def _synthetic_factory(**kwargs):
    return make_synthetic_backend(**kwargs)


@register_backend("qwen2-vl")
def _qwen_factory(**kwargs):
    from .hf_qwen2vl import Qwen2VLBackend

    return Qwen2VLBackend.from_pretrained(**kwargs)


__all__ = [
    "EDITABLE_SITES",
    "SITES",
    "ActivationTrace",
    "Backend",
    "CaptureSpec",
    "EditSpec",
    "ForwardResult",
    "SyntheticBackend",
    "SyntheticBackendConfig",
    "TokenLayout",
    "TraceEntry",
    "WordTokenizer",
    "align_caption",
    "available_backends",
    "cache_dir",
    "get_backend",
    "make_synthetic_backend",
    "register_backend",
]
