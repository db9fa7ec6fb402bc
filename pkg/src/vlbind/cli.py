"""Declarative experiment runner.

Usage::

    vlbind run <kind> [--config exp.yaml] [--out DIR] [--seed N] [--set key=value ...]

``kind`` is one of gen, capture, rsa, pca, cma, attn, intervene, table1,
ordering, conformance. Keys come from the YAML file, then explicit flags,
then ``--set`` overrides. Every run writes ``manifest.json`` listing the
resolved config, the seed and the SHA-256 of every file in the output
directory.

Exit codes: 0 success, 1 configuration error, 2 unknown backend adapter,
3 invariant violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, InvariantError, VLBindError
from .io import save_tensor, sha256_file, write_csv

KINDS = ("gen", "capture", "rsa", "pca", "cma", "attn", "intervene", "table1", "ordering", "conformance")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs/{kind}",
    "backend": "synthetic",
    "backend_options": {},
    "grid": None,
    "entropy": "high",
    "k": 1,
    "cells": None,
    "conjunctions": None,
    "n_trials": None,
    "images": True,
    "token_source": "last_token",
    "site": None,
    "layers": None,
    "heads": None,
    "condition": "switched_target_id",
    "n_samples": 10,
    "top_k": 5,
    "layer_range": None,
    "max_trials": None,
    "grids": ["3x3"],
    "repair_layer": None,
    "strict": True,
    "use_intervention": False,
    "components": 2,
}

GRID_DEFAULTS = {"pca": "3x2-pca", "cma": "2x2", "attn": "2x2", "intervene": "2x2", "ordering": "2x2"}


class RunError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# ------------------------------------------------------------------ config


def resolve_config(kind: str, file_cfg: dict, flags: dict, sets: Sequence[str]) -> dict:
    cfg = dict(DEFAULTS)
    unknown = set(file_cfg) - set(DEFAULTS) - {"kind"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg.update({k: v for k, v in file_cfg.items() if k != "kind"})
    cfg.update({k: v for k, v in flags.items() if v is not None})
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        if key.startswith("backend_options."):
            cfg["backend_options"] = {**cfg["backend_options"], key.split(".", 1)[1]: value}
        elif key in DEFAULTS:
            cfg[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if cfg["grid"] is None:
        cfg["grid"] = GRID_DEFAULTS.get(kind, "3x3")
    if cfg["seed"] is None:
        raise ConfigError("seed is mandatory")
    cfg["out"] = str(cfg["out"]).format(kind=kind)
    cfg["kind"] = kind
    return cfg


def make_backend(cfg: dict):
    from .backend import get_backend

    opts = dict(cfg["backend_options"] or {})
    try:
        return get_backend(cfg["backend"], **opts)
    except KeyError as exc:
        raise RunError(2, str(exc).strip('"')) from None
    except ImportError as exc:
        raise RunError(2, f"backend {cfg['backend']!r} unavailable: {exc}") from None


def make_dataset(cfg: dict, grid: Optional[str] = None, entropy: Optional[str] = None, seed_offset: int = 0):
    from .scenegen import GeneratorConfig, generate_dataset

    gc = GeneratorConfig.from_dict(
        {
            "grid": grid or cfg["grid"],
            "entropy": entropy or cfg["entropy"],
            "k": int(cfg["k"]),
            "seed": int(cfg["seed"]) + seed_offset,
            "cells": cfg["cells"],
            "conjunctions": cfg["conjunctions"],
        }
    )
    return generate_dataset(gc)


def subsample(cfg: dict, scenes):
    n = cfg["n_trials"]
    scenes = list(scenes)
    if n is None or n >= len(scenes):
        return scenes
    idx = np.sort(np.random.default_rng(int(cfg["seed"])).permutation(len(scenes))[: int(n)])
    return [scenes[i] for i in idx]


def _layers(cfg: dict, backend) -> list[int]:
    return list(range(backend.n_layers)) if cfg["layers"] is None else [int(x) for x in cfg["layers"]]


def _feature_layers(cfg: dict, backend) -> tuple[int, ...]:
    if cfg["layer_range"] is not None:
        return tuple(int(x) for x in cfg["layer_range"])
    stage = getattr(getattr(backend, "config", None), "feature_stage", None)
    if stage is None:
        raise ConfigError("layer_range is required for this backend")
    return tuple(stage)


# ------------------------------------------------------------------ experiments


def run_gen(cfg, out: Path) -> dict:
    from .scenegen import write_dataset

    ds = make_dataset(cfg)
    write_dataset(ds, out / "dataset", images=bool(cfg["images"]))
    h, w = ds.scenes[0].image_size
    return {"n_trials": len(ds), "image_size": [h, w], "n_positions": ds.n_positions}


def run_capture(cfg, out: Path) -> dict:
    from .rsa import collect_traces

    be = make_backend(cfg)
    scenes = subsample(cfg, make_dataset(cfg).scenes)
    site = cfg["site"] or "residual"
    ts = collect_traces(be, scenes, site, cfg["token_source"], _layers(cfg, be), cfg["heads"])
    for layer, head in ts.units():
        name = f"acts.{site}.L{layer}" + ("" if head is None else f".H{head}")
        meta = {"site": site, "layer": layer, "head": head, "token_source": ts.token_source, "trial_ids": list(ts.trial_ids)}
        save_tensor(out / "traces", name, ts.acts[(layer, head)], meta)
    return {"n_trials": len(scenes), "units": len(ts.units())}


def run_rsa(cfg, out: Path) -> dict:
    from .plotting import line_plot
    from .rsa import collect_traces, model_rsms, save_rsm, target_rsm, alignment_curve

    be = make_backend(cfg)
    scenes = subsample(cfg, make_dataset(cfg).scenes)
    site = cfg["site"] or "residual"
    ts = collect_traces(be, scenes, site, cfg["token_source"], _layers(cfg, be), cfg["heads"])
    models = model_rsms(ts)
    series, summary = {}, {}
    for kind in ("position", "color", "shape", "feature"):
        target = target_rsm(ts.instances, kind, cfg["token_source"])
        save_rsm(target, out / "rsm", f"target.{kind}")
        curve = alignment_curve(models, target)
        curve.to_csv(out / f"alignment_{kind}.csv")
        (out / f"alignment_{kind}.json").write_text(json.dumps(curve.to_dict(), indent=1, sort_keys=True))
        series[kind] = ([f"{l}" if h is None else f"{l}.{h}" for l, h in curve.units()], curve.values())
        defined = [s for s in curve.scores.values() if s.defined]
        summary[kind] = {"argmax_layer": curve.argmax_layer() if defined else None, "n_undefined": len(curve.scores) - len(defined)}
    line_plot(series, out / "alignment.png", title=f"RSA ({cfg['token_source']})", xlabel="layer", ylabel="Pearson r")
    return {"n_trials": len(scenes), "curves": summary}


def run_pca(cfg, out: Path) -> dict:
    from .dimred import pca_project, trial_labels
    from .plotting import scatter_panels
    from .rsa import collect_traces

    be = make_backend(cfg)
    scenes = subsample(cfg, make_dataset(cfg).scenes)
    ts = collect_traces(be, scenes, "residual", "last_token", _layers(cfg, be))
    labels = trial_labels(ts.instances)
    k = int(cfg["components"])
    panels, ratios = {}, {}
    for layer, _ in ts.units():
        p = pca_project(ts.acts[(layer, None)][0], k, layer, labels)
        p.to_csv(out / "pca" / f"layer{layer:02d}.csv")
        panels[f"layer {layer}"] = p.coords[:, :2]
        ratios[layer] = [float(x) for x in p.explained_variance_ratio]
    for key in ("position", "feature"):
        scatter_panels(panels, labels[key], out / f"pca_{key}.png", title=f"PCA coloured by {key}")
    return {"n_trials": len(scenes), "explained_variance_ratio": ratios}


def run_cma(cfg, out: Path) -> dict:
    from .cma import build_condition, cma_map, top_heads

    be = make_backend(cfg)
    ds = make_dataset(cfg)
    conds = build_condition(ds, cfg["condition"], int(cfg["n_samples"]), seed=int(cfg["seed"]))
    m = cma_map(be, conds, site=cfg["site"] or "head_output")
    m.to_csv(out / "cma.csv")
    m.heatmap(out / "cma.png")
    top = top_heads(m, min(int(cfg["top_k"]), m.scores.size))
    return {"condition": m.kind, "n_samples": m.n_samples, "top_heads": [list(h) for h in top], "flags": list(m.flags)}


def run_attn(cfg, out: Path) -> dict:
    from .attnprof import attention_profile, mean_profile
    from .cma import build_condition, cma_map, top_heads
    from .scenegen import build_prompt

    be = make_backend(cfg)
    ds = make_dataset(cfg)
    if cfg["heads"]:
        heads = [tuple(int(x) for x in h) for h in cfg["heads"]]
    else:
        conds = build_condition(ds, cfg["condition"], int(cfg["n_samples"]), seed=int(cfg["seed"]))
        heads = top_heads(cma_map(be, conds), int(cfg["top_k"]))
    profiles = [attention_profile(be, build_prompt(s, "scene_description"), heads) for s in subsample(cfg, ds.scenes)]
    p = mean_profile(profiles)
    p.to_csv(out / "attention_profile.csv")
    p.heatmap(out / "attention_profile.png", query_labels=["last token"])
    return {"heads": [list(h) for h in heads], "n_instances": len(profiles), "groups": list(p.groups)}


def run_intervene(cfg, out: Path) -> dict:
    from .intervene import efficacy_matrix

    be = make_backend(cfg)
    ds = make_dataset(cfg)
    site = cfg["site"] or "key_proj"
    lr = _feature_layers(cfg, be)
    m = efficacy_matrix(be, subsample(cfg, ds.scenes), site, lr, max_trials=cfg["max_trials"])
    m.to_csv(out / "efficacy.csv")
    m.heatmap(out / "efficacy.png")
    off = m.off_diagonal()
    return {"site": site, "layer_range": list(lr), "mean_offdiag_efficacy": float(np.nanmean(off)), "diag": [float(x) for x in np.diag(m.values)]}


def run_table1(cfg, out: Path) -> dict:
    from .experiments import AccuracyReport, repair_intervention, scene_description_accuracy
    from .intervene import build_mean_bank

    be = make_backend(cfg)
    layer = cfg["repair_layer"]
    if layer is None:
        stage = getattr(getattr(be, "config", None), "position_stage", None)
        if stage is None:
            raise ConfigError("repair_layer is required for this backend")
        layer = stage[0]
    report = AccuracyReport()
    for grid in cfg["grids"]:
        hi = subsample(cfg, make_dataset(cfg, grid, "high").scenes)
        lo = subsample(cfg, make_dataset(cfg, grid, "low", seed_offset=1).scenes)
        bank = build_mean_bank(be, hi, [int(layer)])
        strict = bool(cfg["strict"])
        report = report.merge(scene_description_accuracy(be, hi, strict=strict, grid=grid))
        report = report.merge(scene_description_accuracy(be, lo, strict=strict, grid=grid))
        repair = repair_intervention(bank, int(layer))
        report = report.merge(scene_description_accuracy(be, lo, repair, strict=strict, grid=grid))
    report.to_csv(out / "table1.csv")
    (out / "table1.json").write_text(report.to_json())
    (out / "table1.md").write_text(report.table())
    return {"repair_layer": int(layer), "table": report.table()}


def run_ordering(cfg, out: Path) -> dict:
    from .experiments import ordering_study
    from .scenegen import COLOR_NAMES, ObjectSpec, PRESETS, SceneSpec

    preset = PRESETS.get(cfg["grid"])
    if preset is None:
        raise ConfigError(f"ordering needs a preset grid, got {cfg['grid']!r}")
    rows, cols = preset.grid
    cells = [tuple(c) for c in cfg["cells"]] if cfg["cells"] else [(r, c) for r in range(rows) for c in range(cols)][:4]
    if cfg["conjunctions"]:
        conj = [tuple(c) for c in cfg["conjunctions"]]
    else:
        conj = [(c, "circle") for c in COLOR_NAMES[: len(cells)]]  # same shape, distinct colors
    scene = SceneSpec(preset.grid, preset.image_patches, tuple(ObjectSpec(c, s, cell) for (c, s), cell in zip(conj, cells)))
    be = make_backend(cfg)
    lr = _feature_layers(cfg, be) if cfg["use_intervention"] else None
    rep = ordering_study(be, scene, bool(cfg["use_intervention"]), cfg["site"] or "key_proj", lr)
    rep.to_csv(out / "order.csv")
    rep.plot(out / "order.png")
    return {
        "n_trials": rep.n_trials,
        "n_excluded": rep.n_excluded,
        "first_rank": [float(x) for x in rep.proportions[:, 0]],
        "intervention_efficacy": rep.intervention_efficacy,
    }


def run_conformance(cfg, out: Path) -> dict:
    from .backend.conformance import all_passed, format_results, run_conformance as suite
    from .scenegen import build_prompt

    be = make_backend(cfg)
    ds = make_dataset(cfg)
    texts, ok = [], True
    for s in subsample(cfg, ds.scenes)[:3]:
        res = suite(be, build_prompt(s, "scene_description"), seed=int(cfg["seed"]))
        ok &= all_passed(res)
        texts.append(format_results(res, f"trial {s.trial_id}"))
    (out / "conformance.txt").write_text("\n\n".join(texts) + "\n")
    if not ok:
        raise InvariantError("backend", "conformance suite failed; see conformance.txt")
    return {"passed": True}


RUNNERS = {k: globals()[f"run_{k}"] for k in KINDS}


# ------------------------------------------------------------------ manifest


def write_manifest(out: Path, cfg: dict, summary: dict, config_file: Optional[Path]) -> Path:
    artifacts = {
        p.relative_to(out).as_posix(): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    inputs = {}
    if config_file is not None:
        inputs["config_file"] = {"name": config_file.name, "sha256": sha256_file(config_file)}
    manifest = {
        "kind": cfg["kind"],
        "seed": cfg["seed"],
        "version": __version__,
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "inputs": inputs,
        "summary": summary,
        "artifacts": artifacts,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_plain) + "\n")
    return path


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(type(o))


def run(kind: str, cfg: dict, config_file: Optional[Path] = None) -> tuple[int, dict]:
    """Run one experiment; returns ``(exit code, summary)``."""
    from .backend import available_backends

    if cfg["backend"] not in available_backends():
        print(f"error: unknown backend family {cfg['backend']!r}; known: {available_backends()}", file=sys.stderr)
        return 2, {}
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        summary = RUNNERS[kind](cfg, out)
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code, {}
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3, {}
    except (ConfigError, VLBindError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1, {}
    write_manifest(out, cfg, summary, config_file)
    return 0, summary


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vlbind", description="Position-ID binding experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("kind", choices=KINDS)
    r.add_argument("--config", type=Path, help="YAML experiment config")
    r.add_argument("--out", help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--backend", help="backend family (synthetic, qwen2-vl)")
    r.add_argument("--grid")
    r.add_argument("--entropy", choices=("high", "low"))
    r.add_argument("--k", type=int, help="trials per (identity, position) combination")
    r.add_argument("--condition", help="CMA condition")
    r.add_argument("--n-samples", dest="n_samples", type=int)
    r.add_argument("--n-trials", dest="n_trials", type=int, help="subsample this many trials")
    r.add_argument("--sigma", type=float, help="synthetic backend noise scale")
    r.add_argument("--no-images", dest="images", action="store_false", default=None)
    r.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE")
    sub.add_parser("list-backends", help="print registered backend families")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-backends":
        from .backend import available_backends

        print("\n".join(available_backends()))
        return 0
    try:
        file_cfg = {}
        if args.config is not None:
            if not args.config.exists():
                raise ConfigError(f"config file {args.config} does not exist")
            file_cfg = yaml.safe_load(args.config.read_text()) or {}
            if file_cfg.get("kind", args.kind) != args.kind:
                raise ConfigError(f"config is for {file_cfg['kind']!r}, not {args.kind!r}")
        flags = {k: getattr(args, k) for k in ("out", "seed", "backend", "grid", "entropy", "k", "condition", "n_samples", "n_trials", "images")}
        cfg = resolve_config(args.kind, file_cfg, flags, args.sets)
        if args.sigma is not None:
            cfg["backend_options"] = {**cfg["backend_options"], "sigma": args.sigma}
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    code, summary = run(args.kind, cfg, args.config)
    if code == 0:
        print(json.dumps({"kind": args.kind, "out": cfg["out"], "summary": summary}, indent=1, default=_plain))
    return code


if __name__ == "__main__":
    sys.exit(main())
