import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vlbind.backend import make_synthetic_backend
from vlbind.errors import ConfigError, DegenerateError
from vlbind.rsa import (
    AlignmentCurve,
    SimilarityMatrix,
    alignment,
    collect_traces,
    cosine_rsm,
    load_rsm,
    model_rsm,
    pearson,
    rsa_curves,
    save_rsm,
    target_rsm,
    upper_triangle,
)
from vlbind.scenegen import GeneratorConfig, generate_dataset


def _loop_cosine(x):
    T = len(x)
    out = np.empty((T, T))
    for i in range(T):
        for j in range(T):
            out[i, j] = x[i] @ x[j] / (np.linalg.norm(x[i]) * np.linalg.norm(x[j]))
    return out


def test_cosine_rsm_oracle(backend, ds2):
    ts = collect_traces(backend, ds2, "residual", "last_token", [3, 6])
    for unit in ts.units():
        x = ts.acts[unit][0]
        np.testing.assert_allclose(cosine_rsm(x), _loop_cosine(x), atol=1e-9)
        m = model_rsm(ts, *unit)
        np.testing.assert_allclose(m.values[0], _loop_cosine(x), atol=1e-9)
        np.testing.assert_allclose(m.values, m.values.transpose(0, 2, 1), atol=1e-12)


def test_zero_norm_is_degenerate():
    x = np.ones((3, 4))
    x[1] = 0
    with pytest.raises(DegenerateError, match="trial 11"):
        cosine_rsm(x, trial_ids=[10, 11, 12])


def test_position_target_oracle_2x2(ds2):
    t = target_rsm(ds2, "position")
    cells = [s.target.cell for s in ds2]
    dmax = math.sqrt(2)
    for i, a in enumerate(cells):
        for j, b in enumerate(cells):
            want = 1 - math.dist(a, b) / dmax
            assert abs(t.values[0, i, j] - want) < 1e-12
    i = cells.index((0, 0))
    j = cells.index((0, 1))
    assert abs(t.values[0, i, j] - (1 - 1 / math.sqrt(2))) < 1e-12


def test_feature_targets(ds3):
    col = target_rsm(ds3, "color").values[0]
    shp = target_rsm(ds3, "shape").values[0]
    feat = target_rsm(ds3, "feature").values[0]
    targets = [s.target for s in ds3]
    for i in (0, 5, 40):
        for j in (3, 5, 77):
            assert col[i, j] == float(targets[i].color == targets[j].color)
            assert shp[i, j] == float(targets[i].shape == targets[j].shape)
    np.testing.assert_allclose(feat, 0.5 * (col + shp))


def test_comma_targets_group_by_object(backend, ds3):
    t = target_rsm(ds3, "position", "comma_tokens")
    assert t.values.shape[0] == 8
    ts = collect_traces(backend, ds3, "residual", "comma_tokens", [2])
    assert ts.acts[(2, None)].shape[:2] == (8, len(ds3))


def test_upper_triangle_excludes_diagonal():
    v = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3)
    ut = upper_triangle(v)
    assert ut.tolist() == [1, 2, 5, 10, 11, 14]


def test_pearson_undefined_on_constant():
    s = pearson(np.ones(5), np.arange(5.0))
    assert not s.defined and math.isnan(s.r)
    assert pearson(np.arange(5.0), 3 * np.arange(5.0) + 1).r == pytest.approx(1.0)


def test_alignment_checks_trials(ds2):
    t = target_rsm(ds2, "position")
    other = SimilarityMatrix(t.values, t.token_source, "model", tuple(reversed(t.trial_ids)))
    with pytest.raises(ConfigError):
        alignment(other, t)


def test_planted_stage_alignment(backend, ds3):
    curves = rsa_curves(backend, ds3, ("position", "feature"))
    pos, feat = curves["position"], curves["feature"]
    assert pos.argmax_layer() == 3 and feat.argmax_layer() == 5
    assert pos.scores[(3, None)].r == pytest.approx(1.0, abs=1e-9)
    assert feat.scores[(5, None)].r == pytest.approx(1.0, abs=1e-9)


def test_alignment_degrades_with_noise():
    ds = generate_dataset(GeneratorConfig("2x2", k=2, seed=0))
    rs = []
    for sigma in (0.0, 0.1, 0.2, 0.5, 1.0, 2.0):
        be = make_synthetic_backend(sigma=sigma)
        rs.append(rsa_curves(be, ds, ("position",), layers=[3])["position"].scores[(3, None)].r)
    # strictly decreasing until the signal is gone, then near zero
    assert all(a > b for a, b in zip(rs[:4], rs[1:4])), rs
    assert all(abs(r) < 0.2 for r in rs[3:]), rs


def test_curve_and_rsm_round_trip(tmp_path, backend, ds2):
    c = rsa_curves(backend, ds2, ("position",))["position"]
    assert AlignmentCurve.from_dict(c.to_dict()) == c
    t = target_rsm(ds2, "position")
    save_rsm(t, tmp_path, "t")
    back = load_rsm(tmp_path, "t")
    np.testing.assert_array_equal(back.values, t.values)
    assert back.trial_ids == t.trial_ids


@settings(max_examples=30, deadline=None)
@given(
    x=arrays(np.float64, (6, 5), elements=st.floats(-10, 10)).filter(
        lambda a: (np.linalg.norm(a, axis=1) > 1e-3).all()
    ),
    perm=st.permutations(range(6)),
)
def test_rsm_permutation_equivariance(x, perm):
    p = np.asarray(perm)
    np.testing.assert_allclose(cosine_rsm(x[p]), cosine_rsm(x)[np.ix_(p, p)], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(
    x=arrays(np.float64, (5, 4), elements=st.floats(-10, 10)).filter(
        lambda a: (np.linalg.norm(a, axis=1) > 1e-3).all()
    ),
    scale=st.floats(0.01, 100),
)
def test_rsm_scale_invariance_and_bounds(x, scale):
    r = cosine_rsm(x)
    np.testing.assert_allclose(cosine_rsm(scale * x), r, atol=1e-9)
    assert (np.abs(r) <= 1 + 1e-12).all()
    np.testing.assert_allclose(np.diag(r), 1.0)
