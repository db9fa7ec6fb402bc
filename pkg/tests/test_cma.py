import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vlbind.cma import CMACondition, CMAMap, build_condition, cma_map, cma_score, top_heads
from vlbind.errors import ConfigError, InvariantError
from vlbind.scenegen import GeneratorConfig, generate_dataset

PLANTED = {
    "switched_target_id": (3, 0),
    "different_target_feature": (5, 1),
    "semantic_matching": (1, 2),
}


@pytest.fixture(scope="module")
def maps(backend, ds2):
    return {k: cma_map(backend, build_condition(ds2, k, 4, seed=1)) for k in PLANTED}


@pytest.mark.parametrize("kind", list(PLANTED))
def test_planted_head_ranks_first(maps, kind):
    m = maps[kind]
    assert top_heads(m, 1)[0] == PLANTED[kind]
    assert m.scores[PLANTED[kind]] > 1.0
    others = np.abs(m.scores).copy()
    others[PLANTED[kind]] = 0
    assert others.max() < 1e-6


def test_three_pass_score_matches_map(backend, ds2, maps):
    conds = build_condition(ds2, "switched_target_id", 4, seed=1)
    per = maps["switched_target_id"].per_sample
    for n, c in enumerate(conds[:2]):
        for l, h in [(3, 0), (5, 1), (0, 0)]:
            assert abs(cma_score(backend, c, l, h) - per[n, l, h]) < 1e-5


def test_clean_alternative_scores_zero(backend, ds2):
    c = build_condition(ds2, "switched_target_id", 1)[0]
    same = CMACondition(c.kind, c.clean, c.clean, c.clean_answer, c.expected_answer)
    m = cma_map(backend, [same])
    assert np.abs(m.scores).max() == 0.0


def test_condition_construction(ds2, ds3):
    for c in build_condition(ds2, "switched_target_id", 5):
        a, b = c.clean.scene.objects
        a2, b2 = c.alternative.scene.objects
        assert (a2.cell, b2.cell) == (b.cell, a.cell)
        assert c.clean_answer == b.color and c.expected_answer == a.color
    for c in build_condition(ds3, "different_target_feature", 5):
        a, b = c.clean.scene.objects
        _, cc = c.alternative.scene.objects
        assert cc.cell == b.cell and cc.color not in (a.color, b.color)
        assert c.expected_answer == cc.color
    for c in build_condition(ds2, "semantic_matching", 2):
        assert c.patch_at == "caption_color"


def test_condition_errors(ds2):
    with pytest.raises(ConfigError):
        build_condition(ds2, "nope", 3)
    with pytest.raises(ConfigError):
        build_condition(ds2, "switched_target_id", 0)
    low = generate_dataset(GeneratorConfig("2x2", entropy="low"))
    with pytest.raises(ConfigError):
        build_condition(low, "different_target_feature", 2)
    c = build_condition(ds2, "switched_target_id", 1)[0]
    with pytest.raises(InvariantError):
        CMACondition(c.kind, c.clean, c.alternative, "red", "red")


def test_map_outputs(tmp_path, maps):
    m = maps["switched_target_id"]
    assert m.to_csv(tmp_path / "m.csv").read_text().count("\n") == 1 + 8 * 4
    assert m.heatmap(tmp_path / "m.png").stat().st_size > 0


def test_top_heads_tie_break():
    s = np.array([[1.0, 2.0], [2.0, 0.5]])
    assert top_heads(s, 3) == [(0, 1), (1, 0), (0, 0)]
    with pytest.raises(ConfigError):
        top_heads(s, 5)


@settings(max_examples=50, deadline=None)
@given(s=arrays(np.float64, (4, 3), elements=st.sampled_from([-1.0, 0.0, 0.5, 2.0])), k=st.integers(0, 12))
def test_top_heads_sort_oracle(s, k):
    units = [(l, h) for l in range(4) for h in range(3)]
    # oracle: stable sort on descending score over raster order
    oracle = sorted(units, key=lambda u: -s[u])[:k]
    assert top_heads(CMAMap(s, "x", 1), k) == oracle
