import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlbind.backend import (
    CaptureSpec,
    EditSpec,
    available_backends,
    get_backend,
    make_synthetic_backend,
)
from vlbind.backend.conformance import all_passed, format_results, run_conformance
from vlbind.errors import ConfigError, EditError
from vlbind.scenegen import build_prompt


def test_registry():
    assert {"synthetic", "qwen2-vl"} <= set(available_backends())
    with pytest.raises(KeyError):
        get_backend("no-such-model")
    be = get_backend("synthetic", sigma=0.0)
    assert be.n_layers == 8 and be.n_heads == 4


def test_config_validation():
    with pytest.raises(ConfigError):
        make_synthetic_backend(position_layer=6, retrieval_layer=5)
    with pytest.raises(ConfigError):
        make_synthetic_backend(occupancy_head=0, position_head=0)


@pytest.mark.parametrize("task", ["scene_description", "color_retrieval"])
def test_conformance_suite(backend, ds3, task):
    res = run_conformance(backend, build_prompt(ds3[7], task), seed=3)
    assert all_passed(res), format_results(res)


def test_conformance_with_noise(ds2):
    be = make_synthetic_backend(sigma=0.3, low_entropy_noise=0.5)
    res = run_conformance(be, build_prompt(ds2[2], "scene_description"))
    assert all_passed(res), format_results(res)


def test_layout_groups(backend, ds3):
    inst = build_prompt(ds3[10], "scene_description")
    lay = backend.resolve_layout(inst)
    g = lay.groups()
    assert len([k for k in g if k.startswith("pos_")]) == 9
    assert all(len(g[f"pos_{n}"]) == 4 for n in range(9))
    assert len([k for k in g if k.startswith("C_")]) == 8
    assert len(g["commas"]) == 8
    flat = [t for v in g.values() for t in v]
    assert len(flat) == len(set(flat))
    for n, cell in lay.object_cells.items():
        assert inst.scene.objects[inst.object_order[n]].cell == cell


def test_unedited_model_answers_correctly(backend, ds3):
    for s in ds3.scenes[:20]:
        inst = build_prompt(s, "scene_description")
        assert backend.generate(inst, max_new_tokens=2).generated.strip() == inst.answer
        r = build_prompt(s, "color_retrieval")
        assert backend.run_forward(r).argmax == backend.answer_token_id(r.answer)


def test_capture_shapes(backend, ds2):
    inst = build_prompt(ds2[0], "scene_description")
    lay = backend.resolve_layout(inst)
    S = lay.n_tokens
    cap = CaptureSpec(
        {"residual", "head_output", "head_z", "attention_weights", "key_proj", "value_proj"}, (2,), (0, S - 1), (1, 3)
    )
    tr = backend.run_forward(inst, capture=cap).trace
    d = backend.site_width("residual")
    assert tr.get("residual", 2).shape == (2, d)
    assert tr.get("head_output", 2).shape == (2, 2, backend.site_width("head_output"))
    assert tr.get("attention_weights", 2).shape == (2, 2, S)
    np.testing.assert_allclose(tr.get("attention_weights", 2).sum(-1), 1.0, atol=1e-12)
    assert tr.get("key_proj", 2).shape[0] == 2


def test_edit_errors(backend, ds2):
    inst = build_prompt(ds2[0], "scene_description")
    with pytest.raises(EditError):
        EditSpec("attention_weights", 0, (0,), np.zeros(3))
    with pytest.raises(EditError):
        CaptureSpec({"bogus"})
    with pytest.raises(EditError):
        backend.run_forward(inst, edits=[EditSpec("residual", 1, (-1,), np.zeros(5))])
    with pytest.raises(EditError):
        backend.run_forward(inst, edits=[EditSpec("residual", 1, (10_000,), np.zeros(backend.site_width("residual")))])


def test_head_output_replace_with_own_value_is_identity(backend, ds2):
    inst = build_prompt(ds2[5], "color_retrieval")
    r = backend.run_forward(inst, capture=CaptureSpec({"head_output"}, (5,)))
    v = r.trace.get("head_output", 5)
    pos = r.trace.entry("head_output", 5).positions
    out = backend.run_forward(inst, edits=[EditSpec("head_output", 5, pos, v, "replace")]).logits
    np.testing.assert_allclose(out, r.logits, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(layer=st.integers(0, 7), pos=st.integers(-6, -1), seed=st.integers(0, 2**16), scale=st.floats(0.01, 10.0))
def test_add_then_subtract_restores_logits(backend, ds2, layer, pos, seed, scale):
    inst = build_prompt(ds2[1], "scene_description")
    v = scale * np.random.default_rng(seed).standard_normal(backend.site_width("residual"))
    clean = backend.run_forward(inst).logits
    out = backend.run_forward(
        inst, edits=[EditSpec("residual", layer, (pos,), v, "add"), EditSpec("residual", layer, (pos,), -v, "add")]
    ).logits
    np.testing.assert_allclose(out, clean, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(layer=st.integers(1, 7), seed=st.integers(0, 2**16))
def test_edit_leaves_earlier_layers_untouched(backend, ds2, layer, seed):
    inst = build_prompt(ds2[2], "scene_description")
    cap = CaptureSpec({"residual"})
    v = np.random.default_rng(seed).standard_normal(backend.site_width("residual"))
    clean = backend.run_forward(inst, capture=cap).trace
    edited = backend.run_forward(inst, capture=cap, edits=[EditSpec("residual", layer, (0,), v, "add")]).trace
    for l in range(layer):
        np.testing.assert_array_equal(clean.get("residual", l), edited.get("residual", l))
    assert not np.array_equal(clean.get("residual", layer), edited.get("residual", layer))


def test_noise_is_deterministic_per_seed(ds2):
    inst = build_prompt(ds2[0], "scene_description")
    a = make_synthetic_backend(sigma=0.2, seed=1).run_forward(inst).logits
    b = make_synthetic_backend(sigma=0.2, seed=1).run_forward(inst).logits
    c = make_synthetic_backend(sigma=0.2, seed=2).run_forward(inst).logits
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
