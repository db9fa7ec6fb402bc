"""Desk-scale acceptance checks, one printed PASS/FAIL line per criterion.

Everything runs on the planted synthetic backend. The integration-scale
check against a real checkpoint is skipped here.
"""
import json
import math

import numpy as np
import pytest

from vlbind.backend import make_synthetic_backend
from vlbind.cli import main
from vlbind.cma import CMACondition, build_condition, cma_map, cma_score, top_heads
from vlbind.dimred import pca_project
from vlbind.experiments import repair_intervention, scene_description_accuracy
from vlbind.intervene import (
    apply_swap,
    build_mean_bank,
    efficacy_matrix,
    estimate_position_delta,
    make_swap_plan,
)
from vlbind.rsa import alignment, collect_traces, cosine_rsm, model_rsm, rsa_curves, target_rsm
from vlbind.scenegen import GeneratorConfig, build_prompt, generate_dataset


@pytest.fixture
def report(capsys):
    def _report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return _report


def test_1_trial_counts_and_image_sizes(report):
    want = {"2x2": (100, 1600, 280), "3x3": (50, 4050, 392), "4x4": (20, 5120, 504), "3x2-pca": (200, 7200, 392)}
    got = {}
    for grid, (k, n, size) in want.items():
        ds = generate_dataset(GeneratorConfig(grid, k=k))
        got[grid] = (len(ds), sorted({s.image_size for s in ds}))
    ok = all(got[g] == (n, [(size, size)]) for g, (_, n, size) in want.items())
    report(1, ok, ", ".join(f"{g}: {n} @ {sz[0][0]}" for g, (n, sz) in got.items()))


def test_2_rsm_oracles(report, backend):
    ds = generate_dataset(GeneratorConfig("2x2", k=1))
    ts = collect_traces(backend, ds, "residual", "last_token", [1, 3, 5])
    err = 0.0
    for unit in ts.units():
        x = ts.acts[unit][0]
        n = np.linalg.norm(x, axis=1)
        loop = np.array([[x[i] @ x[j] / (n[i] * n[j]) for j in range(len(x))] for i in range(len(x))])
        err = max(err, np.abs(model_rsm(ts, *unit).values[0] - loop).max(), np.abs(cosine_rsm(x) - loop).max())
    # Pearson alignment against a hand-rolled correlation over i < j pairs
    target = target_rsm(ds, "position")
    T = len(ds)
    for unit in ts.units():
        m = model_rsm(ts, *unit).values[0]
        a = [m[i, j] for i in range(T) for j in range(i + 1, T)]
        b = [target.values[0, i, j] for i in range(T) for j in range(i + 1, T)]
        ma, mb = sum(a) / len(a), sum(b) / len(b)
        cov = sum((p - ma) * (q - mb) for p, q in zip(a, b))
        va = sum((p - ma) ** 2 for p in a)
        vb = sum((q - mb) ** 2 for q in b)
        got = alignment(model_rsm(ts, *unit), target)
        if va > 1e-20 * len(a):
            err = max(err, abs(got.r - cov / math.sqrt(va * vb)))
        else:
            err = max(err, 0.0 if not got.defined else 1.0)
    t = target.values[0]
    cells = [s.target.cell for s in ds]
    pos_oracle = np.array([[1 - math.dist(a, b) / math.sqrt(2) for b in cells] for a in cells])
    err_t = np.abs(t - pos_oracle).max()
    adj = t[cells.index((0, 0)), cells.index((0, 1))]
    adj_err = abs(adj - (1 - 1 / math.sqrt(2)))
    ok = err < 1e-9 and err_t < 1e-9 and adj_err < 1e-12
    report(2, ok, f"model RSM / Pearson err {err:.1e}, target err {err_t:.1e}, adjacent 1-1/sqrt2 err {adj_err:.1e}")


def test_3_cma(report, backend):
    ds = generate_dataset(GeneratorConfig("2x2", k=1))
    planted = backend.config.planted_heads
    checks, details = [], []
    for kind, head in [("switched_target_id", planted["position_id"]), ("different_target_feature", planted["feature_retrieval"])]:
        conds = build_condition(ds, kind, 5, seed=0)
        m = cma_map(backend, conds)
        top = top_heads(m, 1)[0]
        rest = np.abs(m.scores).copy()
        rest[head] = 0
        two_pass = max(abs(cma_score(backend, conds[0], l, h) - m.per_sample[0, l, h]) for l, h in [head, (0, 0), (7, 3)])
        checks += [top == head, rest.max() < 1e-6, two_pass < 1e-5]
        details.append(f"{kind}: top {top} (s={m.scores[head]:.3f}), others < {rest.max():.1e}, oracle err {two_pass:.1e}")
    c = build_condition(ds, "switched_target_id", 1)[0]
    same = cma_map(backend, [CMACondition(c.kind, c.clean, c.clean, c.clean_answer, c.expected_answer)])
    checks.append(np.abs(same.scores).max() == 0.0)
    details.append(f"alternative=clean max |s| {np.abs(same.scores).max():.1e}")
    report(3, all(checks), "; ".join(details))


def test_4_position_before_feature(report):
    ds = generate_dataset(GeneratorConfig("3x3", k=1))
    rows, ok = [], True
    for sigma in (0.0, 0.05, 0.1):
        for seed in (0, 1, 2):
            curves = rsa_curves(make_synthetic_backend(sigma=sigma, seed=seed), ds, ("position", "feature"))
            lp, lf = curves["position"].argmax_layer(), curves["feature"].argmax_layer()
            ok &= lp < lf
            rows.append(f"s={sigma}/seed{seed}: {lp}<{lf}")
    report(4, ok, ", ".join(rows))


def test_5_intervention(report, backend):
    ds = generate_dataset(GeneratorConfig("2x2", k=1))
    stage = tuple(backend.config.feature_stage)
    before = tuple(range(stage[0]))
    with pytest.warns(UserWarning):
        aa = estimate_position_delta(backend, ds, "key_proj", (0, 0), (0, 0), stage)
    d_aa = max(np.abs(v).max() for v in aa.deltas.values())
    ab = estimate_position_delta(backend, ds, "key_proj", (0, 0), (1, 1), stage)
    ba = estimate_position_delta(backend, ds, "key_proj", (1, 1), (0, 0), stage)
    anti = max(np.abs(ab.deltas[l] + ba.deltas[l]).max() for l in stage)
    eff = efficacy_matrix(backend, ds, "key_proj", stage)
    early = efficacy_matrix(backend, ds, "key_proj", before)
    inst = build_prompt(ds[0], "color_retrieval")
    plan = make_swap_plan(ab, inst, stage, backend)
    restore = np.abs(apply_swap(backend, inst, [plan, plan.reverse()]).logits - backend.run_forward(inst).logits).max()
    ok = (
        d_aa == 0.0
        and anti < 1e-6
        and bool(np.all(eff.off_diagonal() == 1.0))
        and bool(np.array_equal(early.values, early.baseline))
        and restore < 1e-5
    )
    report(
        5,
        ok,
        f"D_AA {d_aa:.1e}, D_AB+D_BA {anti:.1e}, off-diag efficacy {np.nanmean(eff.off_diagonal()):.2f} "
        f"in layers {stage[0]}-{stage[-1]}, pre-retrieval equals baseline {np.array_equal(early.values, early.baseline)}, "
        f"round trip {restore:.1e}",
    )


def test_6_repair(report):
    be = make_synthetic_backend(low_entropy_noise=1.0)
    hi = generate_dataset(GeneratorConfig("3x3", k=1, seed=0))
    lo = generate_dataset(GeneratorConfig("3x3", entropy="low", k=1, seed=1))
    layer = be.config.position_stage[0]
    bank = build_mean_bank(be, hi, [layer])
    before = scene_description_accuracy(be, lo).cells[("3x3", "low", "none")].mean
    after = scene_description_accuracy(be, lo, repair_intervention(bank, layer)).cells[("3x3", "low", "repair")].mean
    report(6, before < 0.7 and after == 1.0, f"low-entropy accuracy {before:.2f} -> {after:.2f} after repair at layer {layer}")


def test_7_pca(report, backend):
    ds = generate_dataset(GeneratorConfig("3x2-pca", k=1))
    ts = collect_traces(backend, ds, "residual", "last_token", [2, 4, 6])
    err = 0.0
    for layer, _ in ts.units():
        x = ts.acts[(layer, None)][0]
        xc = x - x.mean(0)
        w = np.sort(np.linalg.eigvalsh(xc.T @ xc))[::-1]
        p = pca_project(x, 2, layer)
        err = max(err, np.abs(p.explained_variance_ratio - w[:2] / w.sum()).max())
        cov = xc.T @ xc
        for c, lam in zip(p.components, w[:2]):
            err = max(err, np.abs(cov @ c - lam * c).max() / max(1.0, lam))
    rng = np.random.default_rng(0)
    plane = rng.standard_normal((40, 2)) @ np.linalg.qr(rng.standard_normal((16, 2)))[0].T
    total = pca_project(plane, 2).explained_variance_ratio.sum()
    report(7, err < 1e-9 and abs(total - 1) < 1e-9, f"eigendecomposition err {err:.1e}, 2-plane explained {total:.12f}")


def test_8_cli_determinism(report, tmp_path):
    runs = []
    for name in ("a", "b"):
        hashes = {}
        for kind, extra in [("gen", ["--grid", "2x2", "--k", "2"]), ("rsa", ["--grid", "2x2"]), ("cma", ["--n-samples", "2"])]:
            out = tmp_path / name / kind
            assert main(["run", kind, "--out", str(out), "--seed", "11", *extra]) == 0
            hashes[kind] = json.loads((out / "manifest.json").read_text())["artifacts"]
        runs.append(hashes)
    n = sum(len(v) for v in runs[0].values())
    report(8, runs[0] == runs[1], f"{n} artifacts across gen/rsa/cma, hashes identical")


@pytest.mark.skip(reason="integration scale: needs the real Qwen2-VL checkpoint (acceptance 9)")
def test_9_integration_scale():
    pass
