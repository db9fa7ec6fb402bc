"""Protocol conformance checks any backend must pass."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .types import CaptureSpec, EditSpec


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _check(name, fn) -> CheckResult:
    try:
        ok, detail = fn()
    except Exception as exc:  # report, don't abort the suite
        return CheckResult(name, False, f"{type(exc).__name__}: {exc}")
    return CheckResult(name, bool(ok), detail)


def run_conformance(backend, instance, seed: int = 0, atol: float = 1e-5) -> list[CheckResult]:
    """Layout shape, determinism, capture purity, edit locality and edit algebra."""
    rng = np.random.default_rng(seed)
    L = backend.n_layers
    mid = L // 2
    results = []

    def layout_shape():
        lay = backend.resolve_layout(instance)
        k = instance.scene.object_patches**2
        spans = list(lay.image_spans.values())
        bad = [s for s in spans if len(s) != k]
        flat = [t for g in lay.groups().values() for t in g]
        disjoint = len(flat) == len(set(flat))
        ok = not bad and disjoint and lay.last_token == lay.n_tokens - 1 and max(flat) < lay.last_token
        return ok, f"{len(spans)} spans of {k}, disjoint={disjoint}, last={lay.last_token}/{lay.n_tokens}"

    def determinism():
        a = backend.run_forward(instance).logits
        b = backend.run_forward(instance).logits
        return np.array_equal(a, b) and np.isfinite(a).all(), "two unedited runs"

    def capture_purity():
        a = backend.run_forward(instance).logits
        cap = CaptureSpec({"residual", "head_output", "attention_weights"}, (0, mid, L - 1))
        r = backend.run_forward(instance, capture=cap)
        sites_ok = r.trace.sites == set(cap.sites)
        diff = float(np.abs(a - r.logits).max())
        return diff == 0.0 and sites_ok, f"max |dlogit| = {diff:g}, sites={sorted(r.trace.sites)}"

    def edit_locality():
        cap = CaptureSpec({"residual"})
        clean = backend.run_forward(instance, capture=cap).trace
        v = rng.standard_normal(backend.site_width("residual", mid))
        edited = backend.run_forward(instance, capture=cap, edits=[EditSpec("residual", mid, (-1,), v, "add")]).trace
        before = max(float(np.abs(clean.get("residual", l) - edited.get("residual", l)).max()) for l in range(mid))
        at = float(np.abs(clean.get("residual", mid) - edited.get("residual", mid)).max())
        return before == 0.0 and at > 0, f"layers < {mid} max diff {before:g}; at {mid}: {at:g}"

    def add_algebra():
        a = backend.run_forward(instance).logits
        v = rng.standard_normal(backend.site_width("residual", mid))
        edits = [EditSpec("residual", mid, (-1,), v, "add"), EditSpec("residual", mid, (-1,), -v, "add")]
        b = backend.run_forward(instance, edits=edits).logits
        diff = float(np.abs(a - b).max())
        return diff < atol, f"add(v) add(-v): max |dlogit| = {diff:g}"

    def replace_last():
        r = backend.run_forward(instance, capture=CaptureSpec({"residual"}, (L - 1,), (-1,)))
        vec = r.trace.get("residual", L - 1)[0]
        b = backend.run_forward(instance, edits=[EditSpec("residual", L - 1, (-1,), vec, "replace")]).logits
        diff = float(np.abs(r.logits - b).max())
        return diff < atol, f"replace with clean vector: max |dlogit| = {diff:g}"

    for name, fn in [
        ("layout_shape", layout_shape),
        ("determinism", determinism),
        ("capture_purity", capture_purity),
        ("edit_locality", edit_locality),
        ("add_algebra", add_algebra),
        ("replace_last_layer", replace_last),
    ]:
        results.append(_check(name, fn))
    return results


def all_passed(results) -> bool:
    return all(r.passed for r in results)


def format_results(results, instance_label: Optional[str] = None) -> str:
    head = f"conformance ({instance_label})\n" if instance_label else ""
    return head + "\n".join(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}" for r in results)
