import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlbind.attnprof import attention_profile, check_groups, mean_profile, profile_from_weights
from vlbind.errors import ConfigError, EditError
from vlbind.scenegen import build_prompt


def test_uniform_attention_gives_group_share():
    S = 10
    w = np.full((2, 3, S), 1.0 / S)
    groups = {"a": [0, 1, 2], "b": [5]}
    vals, labels = profile_from_weights(w, groups)
    assert labels == ("a", "b", "other")
    np.testing.assert_allclose(vals, np.tile([0.3, 0.1, 0.6], (3, 1)), atol=1e-12)


def test_group_validation():
    with pytest.raises(ConfigError):
        check_groups({"a": [0, 1], "b": [1]}, 4)
    with pytest.raises(ConfigError):
        check_groups({"a": [7]}, 4)
    with pytest.raises(ConfigError):
        check_groups({"other": [0]}, 4)


def _softmax_rows(rng, shape):
    z = rng.standard_normal(shape)
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), H=st.integers(1, 4), Q=st.integers(1, 3), cut=st.integers(1, 7))
def test_rows_sum_to_one_and_head_mean_commutes(seed, H, Q, cut):
    rng = np.random.default_rng(seed)
    S = 8
    w = _softmax_rows(rng, (H, Q, S))
    groups = {"x": list(range(cut)), "y": [S - 1]} if cut < S - 1 else {"x": list(range(cut))}
    vals, _ = profile_from_weights(w, groups)
    np.testing.assert_allclose(vals.sum(axis=1), 1.0, atol=1e-12)
    # grouping then averaging heads == averaging then grouping
    per_head = np.mean([profile_from_weights(w[h], groups)[0] for h in range(H)], axis=0)
    np.testing.assert_allclose(vals, per_head, atol=1e-12)


def test_planted_head_profiles(backend, ds2):
    inst = build_prompt(ds2[6], "scene_description")
    lay = backend.resolve_layout(inst)
    ret = attention_profile(backend, inst, [(5, 1)], layout=lay)
    # the retrieval head reads the target object's image tokens
    n_target = inst.object_order.index(inst.scene.target_index)
    assert ret.group(f"pos_{n_target}")[0] == pytest.approx(1.0, abs=1e-6)
    pid = attention_profile(backend, inst, [(3, 0)])
    caption = sum(pid.group(g)[0] for g in pid.groups if g[0] in "CS")
    assert caption == pytest.approx(1.0, abs=1e-6)
    sem = attention_profile(backend, inst, [(1, 2)], query_positions=lay.caption_colors[0])
    assert sem.group("pos_0")[0] == pytest.approx(1.0, abs=1e-6)


def test_profile_outputs_and_mean(tmp_path, backend, ds2):
    profs = [attention_profile(backend, build_prompt(s, "scene_description"), [(5, 1), (3, 0)]) for s in ds2.scenes[:4]]
    m = mean_profile(profs)
    np.testing.assert_allclose(m.values, np.mean([p.values for p in profs], axis=0))
    np.testing.assert_allclose(m.values.sum(axis=1), 1.0, atol=1e-12)
    assert m.to_csv(tmp_path / "p.csv").exists()
    assert m.heatmap(tmp_path / "p.png").exists()


def test_head_out_of_range(backend, ds2):
    inst = build_prompt(ds2[0], "scene_description")
    with pytest.raises(EditError):
        attention_profile(backend, inst, [(9, 0)])
    with pytest.raises(ConfigError):
        attention_profile(backend, inst, [])
