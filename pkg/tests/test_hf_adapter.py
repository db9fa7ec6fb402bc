import numpy as np
import pytest

pytest.importorskip("torch")
pytest.importorskip("transformers")

from vlbind.backend import CaptureSpec, EditSpec  # noqa: E402
from vlbind.backend.conformance import all_passed, format_results, run_conformance  # noqa: E402
from vlbind.scenegen import build_prompt  # noqa: E402

from hf_tiny import tiny_qwen2vl_backend  # noqa: E402

pytestmark = pytest.mark.hf


@pytest.fixture(scope="module")
def hf():
    return tiny_qwen2vl_backend(seed=0)


def test_conformance(hf, ds2):
    res = run_conformance(hf, build_prompt(ds2[1], "scene_description"), atol=1e-4)
    assert all_passed(res), format_results(res)


def test_layout_covers_image_grid(hf, ds2):
    inst = build_prompt(ds2[0], "scene_description")
    lay = hf.resolve_layout(inst)
    n_img = 10 * 10
    assert lay.image_token_range[1] - lay.image_token_range[0] == n_img
    assert all(len(s) == 4 for s in lay.image_spans.values())
    assert len(lay.caption_colors) == 3


def test_capture_shapes(hf, ds2):
    inst = build_prompt(ds2[0], "color_retrieval")
    cap = CaptureSpec({"residual", "head_output", "key_proj", "attention_weights"}, (1,), (-1,))
    r = hf.run_forward(inst, capture=cap)
    S = hf.resolve_layout(inst).n_tokens
    assert r.trace.get("residual", 1).shape == (1, hf.site_width("residual"))
    assert r.trace.get("head_output", 1).shape[:2] == (1, hf.n_heads)
    assert r.trace.get("key_proj", 1).shape[:2] == (1, hf.n_kv_heads)
    w = r.trace.get("attention_weights", 1)
    assert w.shape == (hf.n_heads, 1, S)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-4)


def test_head_output_replace_is_identity(hf, ds2):
    inst = build_prompt(ds2[2], "color_retrieval")
    r = hf.run_forward(inst, capture=CaptureSpec({"head_output"}, (2,)))
    v = r.trace.get("head_output", 2)
    pos = r.trace.entry("head_output", 2).positions
    out = hf.run_forward(inst, edits=[EditSpec("head_output", 2, pos, v, "replace")]).logits
    assert np.abs(out - r.logits).max() < 1e-4


def test_key_edit_round_trip(hf, ds2):
    inst = build_prompt(ds2[2], "color_retrieval")
    lay = hf.resolve_layout(inst)
    span = lay.image_spans[0]
    d = np.random.default_rng(0).standard_normal((hf.n_kv_heads, hf.site_width("key_proj")))
    clean = hf.run_forward(inst).logits
    edited = hf.run_forward(inst, edits=[EditSpec("key_proj", 1, span, d, "add")]).logits
    both = hf.run_forward(
        inst, edits=[EditSpec("key_proj", 1, span, d, "add"), EditSpec("key_proj", 1, span, -d, "add")]
    ).logits
    assert np.abs(edited - clean).max() > 0
    assert np.abs(both - clean).max() < 1e-4


def test_generate(hf, ds2):
    out = hf.generate(build_prompt(ds2[0], "scene_description"), max_new_tokens=2)
    assert len(out.generated_ids) == 2 and isinstance(out.generated, str)
