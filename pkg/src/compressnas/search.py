"""Rank search: proposal generation, lookup tables and the budgeted
one-rank-per-layer selection, solved exactly as a multiple-choice knapsack.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .decompose import channel_bases, factors_to_layers, tucker2_decompose
from .estimators import Calibration, delta_flash, mse_proxy
from .graph import LayerSpec, ModelError, ModelGraph, fingerprint, layer_weights, param_count, replace_layer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankProposal:
    layer_id: str
    rank: int | None  # None is the KEEP choice
    delta_flash: int
    delta_accuracy: float
    feasible: bool = True

    @property
    def keep(self) -> bool:
        return self.rank is None

    @classmethod
    def keep_for(cls, layer_id: str) -> "RankProposal":
        return cls(layer_id, None, 0, 0.0)


@dataclass(frozen=True)
class SearchConfig:
    flash_max: int | None = None  # parameter-count budget on the resulting model
    rank_step: int = 8
    rank_start: int = 8
    granularity: int = 256
    seed: int = 42
    hooi_iters: int = 2
    calib_batch: int = 8
    raw_mse: bool = False
    threads: int | None = None

    def __post_init__(self):
        if self.rank_step not in (4, 8):
            raise ValueError(f"rank_step must be 4 or 8, got {self.rank_step}")
        if self.flash_max is not None and self.flash_max < 0:
            raise ValueError("flash_max must be non-negative")
        if self.granularity < 1 or self.rank_start < 1:
            raise ValueError("granularity and rank_start must be positive")


def generate_proposals(layer: LayerSpec, cfg: SearchConfig) -> list[int]:
    """Candidate ranks for one layer; only ranks that actually save space."""
    if layer.kind != "conv" or not layer.decomposable or layer.kernel_size < 3:
        return []
    n, m, k = layer.in_channels, layer.out_channels, layer.kernel_size
    return [r for r in range(cfg.rank_start, min(n, m) + 1, cfg.rank_step) if delta_flash(n, m, k, r) > 0]


@dataclass(frozen=True)
class LookupTable:
    fingerprint: str
    seed: int | None
    original_params: int
    hooi_iters: int
    entries: dict[str, tuple[RankProposal, ...]]

    def __post_init__(self):
        for lid, props in self.entries.items():
            if sum(p.keep for p in props) != 1 or not props[0].keep:
                raise ValueError(f"layer {lid!r}: table needs exactly one leading KEEP entry")
            ranked = props[1:]
            if any(a.rank >= b.rank or a.delta_flash <= b.delta_flash for a, b in zip(ranked, ranked[1:])):
                raise ValueError(f"layer {lid!r}: ranks must ascend with strictly decreasing delta_flash")
            if any(p.delta_flash <= 0 for p in ranked):
                raise ValueError(f"layer {lid!r}: proposals must have positive delta_flash")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# fingerprint={self.fingerprint} seed={self.seed} original_params={self.original_params} "
                  f"hooi_iters={self.hooi_iters}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "rank", "delta_flash", "delta_accuracy"])
        for lid, props in self.entries.items():
            for p in props:
                acc = repr(p.delta_accuracy) if p.feasible else "nan"
                w.writerow([lid, "KEEP" if p.keep else p.rank, p.delta_flash, acc])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LookupTable":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("lookup CSV must start with a '# fingerprint=...' comment")
        meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
        entries: dict[str, list[RankProposal]] = {}
        for row in csv.DictReader(lines[1:]):
            acc = float(row["delta_accuracy"])
            rank = None if row["rank"] == "KEEP" else int(row["rank"])
            entries.setdefault(row["layer_id"], []).append(
                RankProposal(row["layer_id"], rank, int(row["delta_flash"]), acc, feasible=not math.isnan(acc))
            )
        seed = None if meta["seed"] == "None" else int(meta["seed"])
        return cls(meta["fingerprint"], seed, int(meta["original_params"]), int(meta["hooi_iters"]),
                   {k: tuple(v) for k, v in entries.items()})


def _threads(cfg: SearchConfig) -> int:
    n = cfg.threads
    if n is None:
        n = int(os.environ.get("COMPRESSNAS_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


def _layer_entries(graph: ModelGraph, layer: LayerSpec, calib: Calibration, cfg: SearchConfig):
    props = [RankProposal.keep_for(layer.id)]
    ranks = generate_proposals(layer, cfg)
    if not ranks:
        return props
    kernel = layer_weights(layer)
    bases = channel_bases(kernel)
    n, m, k = layer.in_channels, layer.out_channels, layer.kernel_size
    for r in ranks:
        df = delta_flash(n, m, k, r)
        try:
            factors = tucker2_decompose(kernel, r, cfg.hooi_iters, layer.stride, layer.padding, bases=bases)
            score = mse_proxy(graph, layer.id, factors, calib, raw=cfg.raw_mse)
            props.append(RankProposal(layer.id, r, df, score.delta_accuracy))
        except (ValueError, ArithmeticError) as exc:
            log.warning("proposal %s@R=%d failed: %s", layer.id, r, exc)
            props.append(RankProposal(layer.id, r, df, float("nan"), feasible=False))
    return props


def build_lookup_table(graph: ModelGraph, calib: Calibration, cfg: SearchConfig) -> LookupTable:
    """Score every rank proposal of every decomposable conv.

    Layers are evaluated concurrently (``COMPRESSNAS_THREADS``, 0 = auto);
    the table is assembled in graph order regardless.
    """
    calib.check(graph)
    layers = [l for l in graph.convs() if l.decomposable]
    workers = min(_threads(cfg), max(len(layers), 1))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda l: _layer_entries(graph, l, calib, cfg), layers))
    else:
        results = [_layer_entries(graph, l, calib, cfg) for l in layers]
    entries = {l.id: tuple(props) for l, props in zip(layers, results)}
    return LookupTable(calib.fingerprint, calib.seed, param_count(graph), cfg.hooi_iters, entries)


@dataclass
class Selection:
    choices: dict[str, RankProposal]
    feasible: bool
    flash_max: int
    original_flash: int
    total_delta_flash: int = 0
    total_delta_accuracy: float = 0.0
    shortfall: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def resulting_flash(self) -> int:
        return self.original_flash - self.total_delta_flash

    def to_json(self) -> str:
        doc = {
            "feasible": self.feasible,
            "flash_max": self.flash_max,
            "original_flash": self.original_flash,
            "resulting_flash": self.resulting_flash,
            "total_delta_flash": self.total_delta_flash,
            "total_delta_accuracy": self.total_delta_accuracy,
            "shortfall": self.shortfall,
            "choices": {
                lid: {"rank": "KEEP" if p.keep else p.rank, "delta_flash": p.delta_flash, "delta_accuracy": p.delta_accuracy}
                for lid, p in self.choices.items()
            },
        }
        return json.dumps(doc, indent=2) + "\n"


def solve_mckp(table: LookupTable, cfg: SearchConfig) -> Selection:
    """Pick one entry per layer maximizing the summed accuracy proxy while
    keeping the resulting parameter count within ``cfg.flash_max``.

    Exact dynamic program over the remaining required savings, counted in
    units of ``cfg.granularity`` parameters. Savings are rounded down, so a
    quantized-feasible choice is always truly feasible. Ties prefer the
    larger total saving, then the lexicographically smallest choice list.
    """
    original = table.original_params
    budget = original if cfg.flash_max is None else cfg.flash_max
    required = max(original - budget, 0)
    g = cfg.granularity
    cap = -(-required // g)

    groups = [[p for p in props if p.feasible] for props in table.entries.values()]
    n_states = cap + 1
    states = np.arange(n_states)
    facc = np.full(n_states, -np.inf)
    fsav = np.full(n_states, -np.inf)
    facc[0] = fsav[0] = 0.0
    steps = []
    for opts in reversed(groups):
        acc = np.empty((len(opts), n_states))
        sav = np.empty((len(opts), n_states))
        nxt = np.empty((len(opts), n_states), dtype=np.int64)
        for j, p in enumerate(opts):
            nxt[j] = np.maximum(states - p.delta_flash // g, 0)
            acc[j] = p.delta_accuracy + facc[nxt[j]]
            sav[j] = p.delta_flash + fsav[nxt[j]]
        best = acc.max(axis=0)
        tie = acc == best
        sav_best = np.where(tie, sav, -np.inf).max(axis=0)
        choice = np.argmax(tie & (sav == sav_best), axis=0)
        facc, fsav = best, sav_best
        steps.append((opts, choice, nxt))
    steps.reverse()

    if not np.isfinite(facc[cap]):
        best_save = sum(max(p.delta_flash // g for p in opts) * g for opts in groups)
        shortfall = required - best_save
        return Selection({}, False, budget, original, shortfall=shortfall,
                         notes=[f"budget needs {required} params saved; at most {best_save} attainable"])

    choices = {}
    state = cap
    for lid, (opts, choice, nxt) in zip(table.entries, steps):
        j = choice[state]
        choices[lid] = opts[j]
        state = nxt[j, state]
    total_df = sum(p.delta_flash for p in choices.values())
    total_acc = float(sum(p.delta_accuracy for p in choices.values()))
    return Selection(choices, True, budget, original, total_df, total_acc)


def apply_selection(graph: ModelGraph, table: LookupTable, sel: Selection) -> ModelGraph:
    """Replace every non-KEEP choice by its decomposed triplet."""
    if fingerprint(graph) != table.fingerprint:
        raise ModelError("graph fingerprint does not match the lookup table")
    if not sel.feasible:
        raise ModelError("cannot apply an infeasible selection")
    out = graph
    for lid, p in sel.choices.items():
        if p.keep:
            continue
        layer = graph.layer(lid)
        factors = tucker2_decompose(layer_weights(layer), p.rank, table.hooi_iters, layer.stride, layer.padding)
        out = replace_layer(out, lid, factors_to_layers(factors, layer))
    expected = param_count(graph) - sel.total_delta_flash
    if param_count(out) != expected:
        raise ModelError(f"param accounting drifted: {param_count(out)} != {expected}")
    return out
