"""Model graph IR: layers, validation, JSON I/O, execution, accounting and
graph rewrites.

Graphs are immutable. Every constructor path validates the DAG, channel
compatibility and static shapes, so any :class:`ModelGraph` in hand is
known to be well formed.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import cnt
from .tensor import conv2d, conv_output_size

KINDS = ("input", "conv", "maxpool", "avgpool_global", "linear", "add", "downsample")
LAYER_KEYS = ("id", "kind", "in", "out", "k", "stride", "pad", "inputs", "bn", "bias", "decomposable", "weights")
TOP_KEYS = ("input_shape", "layers", "outputs")


class ModelError(ValueError):
    """Semantic problem with a graph; ``layer_id`` names the offending layer."""

    def __init__(self, message: str, layer_id: str | None = None):
        super().__init__(message if layer_id is None else f"layer {layer_id!r}: {message}")
        self.layer_id = layer_id


class ModelSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    in_channels: int
    out_channels: int
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    inputs: tuple[str, ...] = ()
    bn: bool = False
    bias: bool = False
    decomposable: bool = False
    # None (seed derived from id) | int seed | CNT1 path | ndarray
    weights: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))

    @property
    def weight_shape(self) -> tuple[int, ...] | None:
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        if self.kind == "linear":
            return (self.out_channels, self.in_channels)
        return None

    def param_count(self) -> int:
        n, m, k = self.in_channels, self.out_channels, self.kernel_size
        if self.kind == "conv":
            return m * n * k * k + (m if self.bias else 0) + (2 * m if self.bn else 0)
        if self.kind == "linear":
            return m * n + m + (2 * m if self.bn else 0)
        return 0


@dataclass(frozen=True)
class ModelGraph:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    outputs: tuple[str, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)
    _shapes: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        object.__setattr__(self, "_shapes", _validate(self))

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise ModelError("no such layer", layer_id)

    def index(self, layer_id: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.id == layer_id:
                return i
        raise ModelError("no such layer", layer_id)

    def shape(self, layer_id: str) -> tuple[int, int, int]:
        """Static output shape ``[C, H, W]`` of a layer."""
        return self._shapes[layer_id]

    def consumers(self, layer_id: str) -> list[str]:
        return [l.id for l in self.layers if layer_id in l.inputs]

    def convs(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]


def _validate(g: ModelGraph) -> dict:
    if len(g.input_shape) != 3 or any(s < 1 for s in g.input_shape):
        raise ModelError(f"input_shape must be three positive extents [C, H, W], got {list(g.input_shape)}")
    shapes: dict[str, tuple[int, int, int]] = {}
    n_inputs = 0
    for layer in g.layers:
        lid = layer.id
        if not isinstance(lid, str) or not lid:
            raise ModelError("layer id must be a non-empty string")
        if lid in shapes:
            raise ModelError("duplicate layer id", lid)
        if layer.kind not in KINDS:
            raise ModelError(f"unknown kind {layer.kind!r}", lid)
        if layer.in_channels < 1 or layer.out_channels < 1:
            raise ModelError("channel counts must be positive", lid)
        if layer.kernel_size < 1 or layer.stride < 1 or layer.padding < 0:
            raise ModelError("requires k >= 1, stride >= 1, pad >= 0", lid)
        for src in layer.inputs:
            if src not in shapes:
                raise ModelError(f"input {src!r} is undefined or does not precede this layer", lid)
        ins = [shapes[s] for s in layer.inputs]

        if layer.kind == "input":
            n_inputs += 1
            if ins:
                raise ModelError("input layer cannot have inputs", lid)
            c = g.input_shape[0]
            if layer.in_channels != c or layer.out_channels != c:
                raise ModelError(f"input channels must equal input_shape C={c}", lid)
            shapes[lid] = tuple(g.input_shape)
            continue

        if layer.kind == "add":
            if len(ins) < 2:
                raise ModelError("add needs at least two inputs", lid)
            if any(s != ins[0] for s in ins):
                raise ModelError(f"add inputs disagree in [C,H,W]: {[list(s) for s in ins]}", lid)
            if layer.in_channels != ins[0][0] or layer.out_channels != ins[0][0]:
                raise ModelError(f"channel axis: add declares {layer.in_channels}->{layer.out_channels}, inputs carry {ins[0][0]}", lid)
            shapes[lid] = ins[0]
            continue

        if len(ins) != 1:
            raise ModelError(f"{layer.kind} takes exactly one input, got {len(ins)}", lid)
        c, h, w = ins[0]
        if c != layer.in_channels:
            raise ModelError(
                f"channel axis mismatch: declares in={layer.in_channels} but producer {layer.inputs[0]!r} outputs {c}", lid
            )
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        if layer.kind in ("conv", "maxpool", "downsample"):
            if layer.kind == "maxpool" and layer.out_channels != c:
                raise ModelError("channel axis: maxpool must keep channel count", lid)
            if layer.kind == "downsample":
                if layer.out_channels < c or k != 1 or p != 0:
                    raise ModelError("downsample must widen channels with k=1, pad=0", lid)
            ho, wo = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
            if ho < 1 or wo < 1:
                raise ModelError(f"spatial axes collapse: [{h},{w}] -> [{ho},{wo}]", lid)
            shapes[lid] = (layer.out_channels, ho, wo)
        elif layer.kind == "avgpool_global":
            if layer.out_channels != c:
                raise ModelError("channel axis: avgpool_global must keep channel count", lid)
            shapes[lid] = (c, 1, 1)
        elif layer.kind == "linear":
            if h != 1 or w != 1:
                raise ModelError(f"linear expects a [C,1,1] input, got [{c},{h},{w}]", lid)
            shapes[lid] = (layer.out_channels, 1, 1)

        shape = layer.weight_shape
        if shape is not None and isinstance(layer.weights, np.ndarray) and layer.weights.shape != shape:
            raise ModelError(f"weight tensor shape {layer.weights.shape} != expected {shape}", lid)

    if n_inputs != 1:
        raise ModelError(f"graph needs exactly one input layer, found {n_inputs}")
    if not g.outputs:
        raise ModelError("graph declares no outputs")
    for out in g.outputs:
        if out not in shapes:
            raise ModelError("output refers to an unknown layer", out)
    return shapes


# ---------------------------------------------------------------- weights

def derived_seed(layer_id: str) -> int:
    return int.from_bytes(hashlib.sha256(layer_id.encode()).digest()[:8], "little")


def layer_weights(layer: LayerSpec, base_dir: Path | None = None) -> np.ndarray | None:
    """Materialize the weight tensor of a conv/linear layer as float64.

    Seeded weights are Gaussian with variance ``1 / fan_in``.
    """
    shape = layer.weight_shape
    if shape is None:
        return None
    w = layer.weights
    if isinstance(w, np.ndarray):
        return w.astype(np.float64, copy=False)
    if isinstance(w, str):
        path = Path(w) if base_dir is None else Path(base_dir) / w
        arr = cnt.load(path).astype(np.float64)
        if arr.shape != shape:
            raise ModelError(f"weight file {w} has shape {arr.shape}, expected {shape}", layer.id)
        return arr
    seed = derived_seed(layer.id) if w is None else int(w)
    rng = np.random.default_rng(seed)
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) / np.sqrt(fan_in)


# ---------------------------------------------------------------- JSON

def _syntax_position(text: str, key_hint: str) -> tuple[int, int]:
    idx = text.find(key_hint)
    if idx < 0:
        return 1, 1
    line = text.count("\n", 0, idx) + 1
    return line, idx - (text.rfind("\n", 0, idx) + 1) + 1


def parse_model(text: str, base_dir=None) -> ModelGraph:
    """Parse and validate a JSON model document.

    Omitted fields default sensibly: a missing ``input`` layer is inserted
    with id ``"input"``, ``inputs`` defaults to the preceding layer, and
    pooling/add layers inherit channel counts from their producer. Weight
    file references are resolved against ``base_dir`` and loaded eagerly.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise ModelSyntaxError("top level must be a JSON object", 1, 1)
    unknown = set(doc) - set(TOP_KEYS)
    if unknown:
        key = sorted(unknown)[0]
        raise ModelSyntaxError(f"unknown top-level key {key!r}", *_syntax_position(text, f'"{key}"'))
    for key in ("input_shape", "layers"):
        if key not in doc:
            raise ModelError(f"missing required key {key!r}")
    input_shape = doc["input_shape"]
    if not (isinstance(input_shape, list) and len(input_shape) == 3 and all(isinstance(v, int) for v in input_shape)):
        raise ModelError(f"input_shape must be [C, H, W] integers, got {input_shape!r}")
    raw_layers = doc["layers"]
    if not isinstance(raw_layers, list):
        raise ModelError("layers must be a list")

    if not any(isinstance(r, dict) and r.get("kind") == "input" for r in raw_layers):
        raw_layers = [{"id": "input", "kind": "input"}] + raw_layers

    layers: list[LayerSpec] = []
    out_ch: dict[str, int] = {}
    for pos, raw in enumerate(raw_layers):
        if not isinstance(raw, dict):
            raise ModelError(f"layer #{pos} must be an object")
        lid = raw.get("id")
        if not isinstance(lid, str):
            raise ModelError(f"layer #{pos} lacks a string id")
        unknown = set(raw) - set(LAYER_KEYS)
        if unknown:
            raise ModelError(f"unknown key {sorted(unknown)[0]!r}", lid)
        kind = raw.get("kind")
        if kind not in KINDS:
            raise ModelError(f"unknown kind {kind!r}", lid)
        if "inputs" in raw:
            inputs = raw["inputs"]
            if not (isinstance(inputs, list) and all(isinstance(i, str) for i in inputs)):
                raise ModelError("inputs must be a list of layer ids", lid)
        else:
            inputs = [] if kind == "input" or not layers else [layers[-1].id]

        def _int(key, default):
            v = raw.get(key, default)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ModelError(f"{key!r} must be an integer, got {v!r}", lid)
            return v

        def _bool(key):
            v = raw.get(key, False)
            if not isinstance(v, bool):
                raise ModelError(f"{key!r} must be a boolean", lid)
            return v

        if kind == "input":
            n_default = input_shape[0]
        elif inputs and inputs[0] in out_ch:
            n_default = out_ch[inputs[0]]
        else:
            n_default = None
        if kind in ("conv", "linear"):
            for key in ("in", "out"):
                if key not in raw:
                    raise ModelError(f"{kind} requires {key!r}", lid)
        n = _int("in", n_default)
        m = _int("out", n if kind != "downsample" else None)
        if n is None or m is None:
            raise ModelError("cannot infer channel counts; give 'in' and 'out'", lid)

        weights = raw.get("weights")
        if isinstance(weights, dict):
            if set(weights) != {"seed"} or not isinstance(weights["seed"], int) or weights["seed"] < 0:
                raise ModelError("weights object must be {\"seed\": <u64>}", lid)
            weights = weights["seed"]
        elif isinstance(weights, str):
            path = Path(weights) if base_dir is None else Path(base_dir) / weights
            try:
                weights = cnt.load(path).astype(np.float64)
            except (OSError, ValueError) as exc:
                raise ModelError(f"cannot load weights {raw['weights']!r}: {exc}", lid) from None
        elif weights is not None:
            raise ModelError("weights must be a file name or {\"seed\": n}", lid)

        layers.append(LayerSpec(
            id=lid, kind=kind, in_channels=n, out_channels=m,
            kernel_size=_int("k", 1), stride=_int("stride", 1), padding=_int("pad", 0),
            inputs=tuple(inputs), bn=_bool("bn"), bias=_bool("bias"),
            decomposable=_bool("decomposable"), weights=weights,
        ))
        out_ch[lid] = m

    outputs = doc.get("outputs", [layers[-1].id] if layers else [])
    if not (isinstance(outputs, list) and all(isinstance(o, str) for o in outputs)):
        raise ModelError("outputs must be a list of layer ids")
    return ModelGraph(tuple(input_shape), tuple(layers), tuple(outputs))


def load_model(path) -> ModelGraph:
    path = Path(path)
    return parse_model(path.read_text(encoding="utf-8"), base_dir=path.parent)


def _layer_dict(layer: LayerSpec, weight_ref) -> dict:
    d = {
        "id": layer.id, "kind": layer.kind, "in": layer.in_channels, "out": layer.out_channels,
        "k": layer.kernel_size, "stride": layer.stride, "pad": layer.padding,
        "inputs": list(layer.inputs), "bn": layer.bn,
    }
    if layer.bias:
        d["bias"] = True
    d["decomposable"] = layer.decomposable
    ref = weight_ref(layer)
    if ref is not None:
        d["weights"] = ref
    return d


def to_dict(graph: ModelGraph, weight_ref=None) -> dict:
    """Plain-data form of the graph. ``weight_ref(layer)`` maps in-memory
    weight arrays to a serializable reference; seeds pass through."""

    def default_ref(layer):
        w = layer.weights
        if w is None:
            return None
        if isinstance(w, np.ndarray):
            if weight_ref is None:
                raise ModelError("in-memory weights need a weight_ref to serialize", layer.id)
            return weight_ref(layer)
        if isinstance(w, str):
            return w
        return {"seed": int(w)}

    return {
        "input_shape": list(graph.input_shape),
        "layers": [_layer_dict(l, default_ref) for l in graph.layers],
        "outputs": list(graph.outputs),
    }


def dumps_model(graph: ModelGraph, weight_ref=None) -> str:
    return json.dumps(to_dict(graph, weight_ref), indent=2) + "\n"


def save_model(graph: ModelGraph, path) -> list[Path]:
    """Write the model JSON; in-memory weights go to ``<stem>.weights/``
    as CNT1 files referenced by relative path. Returns all files written."""
    path = Path(path)
    written = []
    wdir = path.parent / f"{path.stem}.weights"

    def ref(layer):
        wdir.mkdir(parents=True, exist_ok=True)
        fname = wdir / f"{layer.id}.cnt"
        cnt.save(fname, layer.weights)
        written.append(fname)
        return f"{wdir.name}/{fname.name}"

    text = dumps_model(graph, ref)
    path.write_text(text, encoding="utf-8")
    return [path] + written


def fingerprint(graph: ModelGraph) -> str:
    """SHA-256 over the canonical serialized model, weight arrays by content."""

    def ref(layer):
        data = np.ascontiguousarray(layer.weights, dtype="<f8").tobytes()
        return "sha256:" + hashlib.sha256(data).hexdigest()

    doc = to_dict(graph, ref)
    doc["layers"] = [
        {**l, "weights": {"seed": derived_seed(l["id"])}} if "weights" not in l and l["kind"] in ("conv", "linear") else l
        for l in doc["layers"]
    ]
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- accounting

def param_count(graph: ModelGraph) -> int:
    return sum(layer.param_count() for layer in graph.layers)


def flash_bytes(graph: ModelGraph, bytes_per_param: int = 1) -> int:
    if bytes_per_param < 1:
        raise ValueError("bytes_per_param must be positive")
    return param_count(graph) * bytes_per_param


def activation_profile(graph: ModelGraph, bytes_per_elem: int = 1) -> list[tuple[str, int]]:
    """Bytes live during each execution step, in document order.

    A step holds every tensor still awaiting a consumer (or kept as a graph
    output) plus the tensor being produced; one buffer per tensor, nothing
    in place.
    """
    size = {lid: int(np.prod(s)) * bytes_per_elem for lid, s in graph._shapes.items()}
    remaining = {l.id: 0 for l in graph.layers}
    for layer in graph.layers:
        for src in set(layer.inputs):
            remaining[src] += 1
    keep = set(graph.outputs)
    live: dict[str, int] = {}
    profile = []
    for layer in graph.layers:
        profile.append((layer.id, sum(live.values()) + size[layer.id]))
        live[layer.id] = size[layer.id]
        for src in set(layer.inputs):
            remaining[src] -= 1
            if remaining[src] == 0 and src not in keep:
                del live[src]
        if remaining[layer.id] == 0 and layer.id not in keep:
            del live[layer.id]
    return profile


def activation_peak(graph: ModelGraph, bytes_per_elem: int = 1, layers: Iterable[str] | None = None) -> int:
    """Peak activation bytes, optionally restricted to the steps of ``layers``."""
    profile = activation_profile(graph, bytes_per_elem)
    if layers is not None:
        wanted = set(layers)
        profile = [p for p in profile if p[0] in wanted]
    return max((b for _, b in profile), default=0)


# ---------------------------------------------------------------- execution

def _maxpool(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def forward(graph: ModelGraph, x: np.ndarray, capture: Iterable[str] = (), base_dir=None):
    """Run a batch ``[B, C, H, W]`` through the graph.

    Returns ``(outputs, captured)`` where ``captured`` maps each requested
    layer id to the tensor fed into it. There are no nonlinearities; BN
    tags and bias flags are identity at inference time.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != graph.input_shape:
        raise ModelError(f"input batch shape {x.shape[1:]} != graph input_shape {graph.input_shape}")
    capture = set(capture)
    remaining = {l.id: 0 for l in graph.layers}
    for layer in graph.layers:
        for src in set(layer.inputs):
            remaining[src] += 1
    keep = set(graph.outputs)
    values: dict[str, np.ndarray] = {}
    captured: dict[str, np.ndarray] = {}
    for layer in graph.layers:
        ins = [values[s] for s in layer.inputs]
        if layer.id in capture:
            captured[layer.id] = ins[0] if len(ins) == 1 else ins
        if layer.kind == "input":
            y = x
        elif layer.kind == "conv":
            y = conv2d(ins[0], layer_weights(layer, base_dir), layer.stride, layer.padding)
        elif layer.kind == "maxpool":
            y = _maxpool(ins[0], layer.kernel_size, layer.stride, layer.padding)
        elif layer.kind == "avgpool_global":
            y = ins[0].mean(axis=(2, 3), keepdims=True)
        elif layer.kind == "linear":
            w = layer_weights(layer, base_dir)
            y = (ins[0].reshape(len(ins[0]), -1) @ w.T)[:, :, None, None]
        elif layer.kind == "add":
            y = np.sum(ins, axis=0)
        elif layer.kind == "downsample":
            sub = ins[0][:, :, :: layer.stride, :: layer.stride]
            y = np.zeros((sub.shape[0], layer.out_channels) + sub.shape[2:])
            y[:, : layer.in_channels] = sub
        values[layer.id] = y
        for src in set(layer.inputs):
            remaining[src] -= 1
            if remaining[src] == 0 and src not in keep:
                del values[src]
    return {o: values[o] for o in graph.outputs}, captured


# ---------------------------------------------------------------- rewrites

def _rename_inputs(layer: LayerSpec, old: str, new: str) -> LayerSpec:
    if old not in layer.inputs:
        return layer
    return replace(layer, inputs=tuple(new if i == old else i for i in layer.inputs))


def replace_layer(graph: ModelGraph, layer_id: str, replacement: Sequence[LayerSpec]) -> ModelGraph:
    """Swap one conv for a chain of layers; consumers are rewired to the
    chain's last layer. The chain's own ``inputs`` are rewritten in order."""
    target = graph.layer(layer_id)
    chain = list(replacement)
    if target.kind != "conv":
        raise ModelError("only conv layers can be replaced", layer_id)
    if not chain:
        raise ModelError("replacement chain is empty", layer_id)
    if chain[0].in_channels != target.in_channels:
        raise ModelError(f"channel axis: chain starts with N={chain[0].in_channels}, layer has N={target.in_channels}", layer_id)
    if chain[-1].out_channels != target.out_channels:
        raise ModelError(f"channel axis: chain ends with M={chain[-1].out_channels}, layer has M={target.out_channels}", layer_id)
    strided = [l for l in chain if l.stride != 1]
    if target.stride == 1 and strided:
        raise ModelError(f"replacement introduces stride {strided[0].stride} on {strided[0].id!r}", layer_id)
    if target.stride != 1 and (len(strided) != 1 or strided[0].stride != target.stride):
        raise ModelError(f"stride {target.stride} must appear exactly once in the replacement chain", layer_id)
    existing = {l.id for l in graph.layers} - {layer_id}
    for l in chain:
        if l.id in existing:
            raise ModelError("replacement id collides with an existing layer", l.id)

    wired = []
    prev_inputs = target.inputs
    for l in chain:
        wired.append(replace(l, inputs=tuple(prev_inputs)))
        prev_inputs = (l.id,)
    last = chain[-1].id

    layers = []
    for l in graph.layers:
        if l.id == layer_id:
            layers.extend(wired)
        else:
            layers.append(_rename_inputs(l, layer_id, last))
    outputs = tuple(last if o == layer_id else o for o in graph.outputs)
    return ModelGraph(graph.input_shape, tuple(layers), outputs)


def _stem_pattern(graph: ModelGraph, reduced: int):
    pools = [l for l in graph.layers if l.kind == "maxpool"]
    if not pools:
        return None
    pool = pools[0]
    conv = graph.layer(pool.inputs[0])
    if conv.kind != "conv" or conv.out_channels <= reduced or graph.consumers(conv.id) != [pool.id]:
        return None
    if conv.id in graph.outputs:
        return None
    return conv, pool


def rewrite_projection_stem(graph: ModelGraph, reduced: int = 32, proj_id: str | None = None) -> ModelGraph:
    """Narrow the stem's last conv to ``reduced`` channels and restore the
    width with a 1x1 projection placed after the stem max-pool, so the wide
    map only exists at the pooled resolution.

    When the pattern is absent the graph comes back unchanged with a note
    in ``warnings``.
    """
    found = _stem_pattern(graph, reduced)
    if found is None:
        msg = "projection-stem pattern not found; graph unchanged"
        warnings.warn(msg, stacklevel=2)
        return ModelGraph(graph.input_shape, graph.layers, graph.outputs, warnings=graph.warnings + (msg,))
    conv, pool = found
    width = conv.out_channels
    if proj_id is None:
        prefix = pool.id.rsplit(".", 1)[0] if "." in pool.id else pool.id
        proj_id = f"{prefix}.proj"
    if any(l.id == proj_id for l in graph.layers):
        raise ModelError("projection id already in use", proj_id)

    w = conv.weights
    narrow = replace(conv, out_channels=reduced, weights=w[:reduced] if isinstance(w, np.ndarray) else w)
    pool2 = replace(pool, in_channels=reduced, out_channels=reduced)
    proj = LayerSpec(proj_id, "conv", reduced, width, 1, 1, 0, (pool.id,), bn=conv.bn)
    layers = []
    for l in graph.layers:
        if l.id == conv.id:
            layers.append(narrow)
        elif l.id == pool.id:
            layers += [pool2, proj]
        else:
            layers.append(_rename_inputs(l, pool.id, proj_id))
    outputs = tuple(proj_id if o == pool.id else o for o in graph.outputs)
    return ModelGraph(graph.input_shape, tuple(layers), outputs, warnings=graph.warnings)


def projection_stem_delta(conv: LayerSpec, reduced: int = 32) -> int:
    """Analytic param change of :func:`rewrite_projection_stem` on ``conv``."""
    per_filter = conv.in_channels * conv.kernel_size ** 2 + (1 if conv.bias else 0) + (2 if conv.bn else 0)
    proj = reduced * conv.out_channels + (2 * conv.out_channels if conv.bn else 0)
    return proj - (conv.out_channels - reduced) * per_filter


def rewrite_neck_projection(graph: ModelGraph, taps: Sequence[tuple[str, int]]) -> ModelGraph:
    """Attach a 1x1 conv (no BN) at each tap and register it as an output."""
    if not taps:
        return graph
    layers = list(graph.layers)
    outputs = list(graph.outputs)
    for tap, target in taps:
        src = graph.layer(tap)
        channels = graph.shape(tap)[0]
        if not 1 <= target <= channels:
            raise ModelError(f"neck target {target} must be in [1, {channels}]", tap)
        new_id = f"{tap}.neck"
        layers.append(LayerSpec(new_id, "conv", channels, target, 1, 1, 0, (src.id,)))
        outputs.append(new_id)
    return ModelGraph(graph.input_shape, tuple(layers), tuple(outputs), warnings=graph.warnings)
