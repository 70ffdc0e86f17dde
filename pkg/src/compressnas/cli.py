"""Command-line driver.

Exit codes: 0 success, 2 input error, 3 infeasible search, 4 verification
failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, cnt
from .decompose import factors_to_layers, reconstruct, tucker2_decompose
from .estimators import Calibration, CalibrationError
from .graph import (
    ModelError, ModelGraph, ModelSyntaxError, activation_peak, flash_bytes, fingerprint, layer_weights,
    load_model, param_count, rewrite_neck_projection, rewrite_projection_stem, save_model,
)
from .presets import (
    PRESETS, build_preset, check_param_count, check_structure, resolve_taps, stem_layers,
)
from .search import SearchConfig, apply_selection, build_lookup_table, solve_mckp
from .tensor import conv2d

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 2, 3, 4
INPUT_ERRORS = (ModelError, ModelSyntaxError, CalibrationError, ValueError, OSError)

log = logging.getLogger("compressnas")


def bundled_model(name: str) -> Path:
    return Path(str(resources.files("compressnas") / "data" / name))


def _shape(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("input shape must be C,H,W")
    return tuple(parts)


def _load_graph(args) -> ModelGraph:
    if getattr(args, "preset", None):
        kwargs = {}
        if args.input:
            kwargs["input_shape"] = args.input
        if getattr(args, "no_projection_stem", False):
            kwargs["projection_stem"] = False
        return build_preset(args.preset, **kwargs)
    if not args.model:
        raise ValueError("give a model file or --preset")
    return load_model(args.model)


def _manifest(args, seed, graph: ModelGraph, started: float, artifacts: list[Path]) -> dict:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return {
        "command": args.command,
        "config": config,
        "seed": seed,
        "graph_fingerprint": fingerprint(graph),
        "tool_version": __version__,
        "wall_time_s": round(time.time() - started, 3),
        "artifacts": {str(p.name): hashlib.sha256(p.read_bytes()).hexdigest() for p in artifacts},
    }


# ---------------------------------------------------------------- describe

def describe_rows(graph: ModelGraph) -> list[dict]:
    rows = []
    for l in graph.layers:
        c, h, w = graph.shape(l.id)
        rows.append({
            "id": l.id, "kind": l.kind, "in": l.in_channels, "out": l.out_channels, "k": l.kernel_size,
            "stride": l.stride, "pad": l.padding, "output_shape": f"{c}x{h}x{w}", "params": l.param_count(),
        })
    return rows


def describe_summary(graph: ModelGraph) -> dict:
    return {
        "params": param_count(graph),
        "flash_bytes_1B": flash_bytes(graph, 1),
        "flash_bytes_4B": flash_bytes(graph, 4),
        "activation_peak_bytes": activation_peak(graph, 1),
        "fingerprint": fingerprint(graph),
    }


def cmd_describe(args) -> int:
    graph = _load_graph(args)
    rows, summary = describe_rows(graph), describe_summary(graph)
    if args.format == "json":
        print(json.dumps({"layers": rows, "summary": summary}, indent=2))
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        print(buf.getvalue(), end="")
    else:
        print(f"{'id':<28}{'kind':<16}{'in':>6}{'out':>6}{'k':>3}{'s':>3}{'p':>3}  {'output':<14}{'params':>10}")
        for r in rows:
            print(f"{r['id']:<28}{r['kind']:<16}{r['in']:>6}{r['out']:>6}{r['k']:>3}{r['stride']:>3}{r['pad']:>3}  "
                  f"{r['output_shape']:<14}{r['params']:>10}")
        print()
        print(f"params              {summary['params']} ({summary['params'] / 1e6:.2f} M)")
        print(f"flash @1B/param     {summary['flash_bytes_1B']}")
        print(f"flash @4B/param     {summary['flash_bytes_4B']}")
        print(f"activation peak @1B {summary['activation_peak_bytes']}")
    return EXIT_OK


# ---------------------------------------------------------------- search

def _budget(text: str, original: int) -> int:
    text = text.strip()
    if text.endswith("%"):
        return int(original * float(text[:-1]) / 100.0)
    return int(text)


def _calibration_inputs(paths) -> np.ndarray | None:
    if not paths:
        return None
    arrays = []
    for p in paths:
        a = cnt.load(p).astype(np.float64)
        arrays.append(a[None] if a.ndim == 3 else a)
    return np.concatenate(arrays)


def cmd_search(args) -> int:
    started = time.time()
    graph = _load_graph(args)
    original = param_count(graph)
    cfg = SearchConfig(
        flash_max=_budget(args.flash_max, original), rank_step=args.step, granularity=args.granularity,
        seed=args.seed, hooi_iters=args.hooi_iters, calib_batch=args.batch, raw_mse=args.raw_mse,
    )
    print(f"seed {cfg.seed}  budget {cfg.flash_max} params  original {original} params")
    calib = Calibration.build(graph, seed=cfg.seed, batch=cfg.calib_batch, inputs=_calibration_inputs(args.calib))
    table = build_lookup_table(graph, calib, cfg)
    sel = solve_mckp(table, cfg)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = [out / "lookup.csv", out / "selection.json"]
    artifacts[0].write_text(table.to_csv(), encoding="utf-8")
    artifacts[1].write_text(sel.to_json(), encoding="utf-8")
    if not sel.feasible:
        (out / "manifest.json").write_text(json.dumps(_manifest(args, cfg.seed, graph, started, artifacts), indent=2) + "\n")
        print(f"infeasible: budget {cfg.flash_max} params, shortfall {sel.shortfall} params", file=sys.stderr)
        return EXIT_INFEASIBLE

    compressed = apply_selection(graph, table, sel)
    artifacts += save_model(compressed, out / "compressed.json")
    (out / "manifest.json").write_text(json.dumps(_manifest(args, cfg.seed, graph, started, artifacts), indent=2) + "\n")
    print(f"original params     {original}")
    print(f"compressed params   {param_count(compressed)}")
    print(f"budget              {cfg.flash_max}")
    print(f"sum proxy loss      {-sel.total_delta_accuracy:.6g}")
    decomposed = {k: p.rank for k, p in sel.choices.items() if not p.keep}
    print(f"decomposed layers   {len(decomposed)}: " + ", ".join(f"{k}@{r}" for k, r in decomposed.items()))
    return EXIT_OK


# ---------------------------------------------------------------- rewrite

def cmd_rewrite(args) -> int:
    started = time.time()
    if args.projection_stem and args.preset and args.preset.startswith("stresnet"):
        # ST presets ship with the projection already in place; start from the plain stem
        args.no_projection_stem = True
    graph = _load_graph(args)
    if args.projection_stem:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            new = rewrite_projection_stem(graph)
    else:
        new = rewrite_neck_projection(graph, resolve_taps(args.neck_taps))
    for w in new.warnings:
        print(f"warning: {w}", file=sys.stderr)
    before_p, after_p = param_count(graph), param_count(new)
    before_a, after_a = activation_peak(graph), activation_peak(new)
    print(f"params          {before_p} -> {after_p} ({after_p - before_p:+d})")
    print(f"activation peak {before_a} -> {after_a} (ratio {before_a / after_a:.3f})")
    if args.projection_stem:
        sb = activation_peak(graph, layers=stem_layers(graph))
        sa = activation_peak(new, layers=stem_layers(new))
        print(f"stem peak       {sb} -> {sa} (ratio {sb / sa:.3f})")
    if args.output:
        files = save_model(new, args.output)
        man = Path(args.output).with_suffix(".manifest.json")
        man.write_text(json.dumps(_manifest(args, None, graph, started, files), indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- verify

def composition_check(graph: ModelGraph, layer_id: str, rank: int, seed: int = 0) -> float:
    """Max relative deviation between the decomposed triplet and a conv with
    the reconstructed kernel, on a seeded input."""
    layer = graph.layer(layer_id)
    factors = tucker2_decompose(layer_weights(layer), rank, 2, layer.stride, layer.padding)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, layer.in_channels, 12, 12))
    ref = conv2d(x, reconstruct(factors), layer.stride, layer.padding)
    y = x
    for l in factors_to_layers(factors, layer):
        y = conv2d(y, layer_weights(l), l.stride, l.padding)
    return float(np.abs(y - ref).max() / np.abs(ref).max())


def run_verification(graphs: dict[str, ModelGraph] | None = None) -> list[dict]:
    graphs = graphs or {name: build_preset(name) for name in PRESETS}
    results = []
    for name, g in graphs.items():
        ok, actual, reported, rel = check_param_count(g, name)
        results.append({"check": f"{name}: params", "passed": ok, "expected": reported, "actual": actual,
                        "detail": f"relative error {rel:+.4f}"})
        failures = check_structure(g, name)
        results.append({"check": f"{name}: structure", "passed": not failures, "expected": "table match",
                        "actual": "match" if not failures else failures[0], "detail": "; ".join(failures)})
        # identity does not depend on width; sample the cheaper layers
        sampled = [l for l in g.convs() if l.decomposable and l.in_channels * l.out_channels <= 128 * 128][::3]
        worst = 0.0
        for l in sampled:
            rank = min(8, l.in_channels, l.out_channels)
            worst = max(worst, composition_check(g, l.id, rank))
        results.append({"check": f"{name}: composition identity", "passed": worst < 1e-6, "expected": "< 1e-6",
                        "actual": worst, "detail": f"{len(sampled)} sampled layers"})
    return results


def cmd_verify(args) -> int:
    results = run_verification()
    if args.json:
        print(json.dumps(results, indent=2, default=float))
    else:
        for r in results:
            mark = "PASS" if r["passed"] else "FAIL"
            print(f"{mark}  {r['check']:<40} expected {r['expected']}  actual {r['actual']}  {r['detail']}")
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_VERIFY


def cmd_export(args) -> int:
    graph = _load_graph(args)
    save_model(graph, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compressnas", description="Tucker-2 rank search and STResNet model tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp):
        sp.add_argument("model", nargs="?", help="model JSON file")
        sp.add_argument("--preset", choices=PRESETS)
        sp.add_argument("--input", type=_shape, help="input shape C,H,W for presets")
        sp.add_argument("--no-projection-stem", action="store_true", help="ST presets without the stem projection")

    d = sub.add_parser("describe", help="layer table, params, flash and activation peak")
    model_args(d)
    d.add_argument("--format", choices=("text", "csv", "json"), default="text")
    d.set_defaults(func=cmd_describe)

    s = sub.add_parser("search", help="build lookup table, solve the rank selection, write compressed model")
    model_args(s)
    s.add_argument("--flash-max", required=True, help="parameter budget, absolute or percent of original (e.g. 50%%)")
    s.add_argument("--step", type=int, choices=(4, 8), default=8)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--calib", nargs="*", help="CNT1 calibration input tensors")
    s.add_argument("--batch", type=int, default=8, help="synthetic calibration batch size")
    s.add_argument("--granularity", type=int, default=256)
    s.add_argument("--hooi-iters", type=int, default=2)
    s.add_argument("--raw-mse", action="store_true", help="use raw MSE instead of relative MSE")
    s.add_argument("-o", "--output", default="search_out", help="output directory")
    s.set_defaults(func=cmd_search)

    r = sub.add_parser("rewrite", help="apply the projection-stem or neck-projection rewrite")
    model_args(r)
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--projection-stem", action="store_true")
    g.add_argument("--neck-taps", help="'yolox' or 'id:channels,...' (dark3/dark4/dark5 aliases allowed)")
    r.add_argument("-o", "--output", help="write the rewritten model JSON here")
    r.set_defaults(func=cmd_rewrite)

    v = sub.add_parser("verify", help="check presets against the architecture tables")
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("export", help="write a model (e.g. a preset) as JSON")
    model_args(e)
    e.add_argument("-o", "--output", required=True)
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
