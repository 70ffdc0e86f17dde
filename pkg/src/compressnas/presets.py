"""Built-in architectures: ResNet-18 and the STResNet family.

``build_preset`` constructs graphs from compact per-block rank lists, while
``ARCH_TABLES`` keeps the architecture tables as written (block rows of
``KxK/in->out`` entries). ``check_structure`` parses the latter and
compares it to a graph, so the two routes stay independent.
"""
from __future__ import annotations

import re

from .graph import LayerSpec, ModelError, ModelGraph, param_count

PRESETS = ("resnet18", "stresnet-tiny", "stresnet-micro", "stresnet-nano", "stresnet-pico")
STAGE_CHANNELS = (64, 128, 256, 512)
DEFAULT_INPUT = (3, 224, 224)

# (conv1, conv2) rank for each of the 8 basic blocks; None = plain 3x3 conv
_ST_BLOCKS = {
    "stresnet-tiny": (16, [(None, None), (None, None), (None, 96), (None, 80),
                           (None, 192), (None, 96), (208, 88), (192, 112)]),
    "stresnet-micro": (8, [(64, 64), (64, 64), (40, 32), (88, 32),
                           (88, 72), (80, 32), (80, 8), (72, 64)]),
    "stresnet-nano": (8, [(32, 16), (40, 8), (32, 8), (64, 16),
                          (48, 16), (48, 8), (32, 8), (48, 8)]),
    "stresnet-pico": (8, [(24, 16), (24, 8), (24, 8), (8, 8),
                          (8, 8), (8, 8), (8, 8), (8, 8)]),
}

# reported parameter counts and the tolerance each is checked at
REPORTED_PARAMS = {
    "resnet18": (11.68e6, 0.005),
    "stresnet-tiny": (3.99e6, 0.10),
    "stresnet-micro": (1.50e6, 0.10),
    "stresnet-nano": (0.95e6, 0.10),
    "stresnet-pico": (0.62e6, 0.10),
}

# backbone feature taps feeding a YOLOX-style neck, with projected widths
DARK_TAPS = {"dark3": ("layer2.1.add", 64), "dark4": ("layer3.1.add", 128), "dark5": ("layer4.1.add", 256)}

ARCH_TABLES = {
    "resnet18": {
        "stem": "7x7 s2/3→64",
        "layer1": ["3x3/64, 3x3/64", "3x3/64, 3x3/64"],
        "layer2": ["3x3/64 s2, 3x3/128", "3x3/128, 3x3/128"],
        "layer3": ["3x3/128 s2, 3x3/256", "3x3/256, 3x3/256"],
        "layer4": ["3x3/256 s2, 3x3/512", "3x3/512, 3x3/512"],
    },
    "stresnet-tiny": {
        "stem": "1x1/3→3, 7x7 s2/3→16, 1x1/16→32, 1x1/32→64",
        "layer1": ["3x3/64→64, 3x3/64→64", "3x3/64→64, 3x3/64→64"],
        "layer2": ["3x3 s2/64→128; 1x1/128→96, 3x3/96, 1x1/96→128",
                   "3x3/128→128; 1x1/128→80, 3x3/80, 1x1/80→128"],
        "layer3": ["3x3 s2/128→256; 1x1/256→192, 3x3/192, 1x1/192→256",
                   "3x3/256→256; 1x1/256→96, 3x3/96, 1x1/96→256"],
        "layer4": ["1x1/256→208, 3x3 s2/208→208, 1x1/208→512; 1x1/512→88, 3x3/88, 1x1/88→512",
                   "1x1/512→192, 3x3/192, 1x1/192→512; 1x1/512→112, 3x3/112, 1x1/112→512"],
    },
    "stresnet-micro": {
        "stem": "1x1/3→3, 7x7 s2/3→8, 1x1/8→32, 1x1/32→64",
        "layer1": ["1x1/64→64, 3x3/64, 1x1/64→64; 1x1/64→64, 3x3/64, 1x1/64→64",
                   "1x1/64→64, 3x3/64, 1x1/64→64; 1x1/64→64, 3x3/64, 1x1/64→64"],
        "layer2": ["1x1/64→40, 3x3/40 s2, 1x1/40→128; 1x1/128→32, 3x3/32, 1x1/32→128",
                   "1x1/128→88, 3x3/88, 1x1/88→128; 1x1/128→32, 3x3/32, 1x1/32→128"],
        "layer3": ["1x1/128→88, 3x3/88 s2, 1x1/88→256; 1x1/256→72, 3x3/72, 1x1/72→256",
                   "1x1/256→80, 3x3/80, 1x1/80→256; 1x1/256→32, 3x3/32, 1x1/32→256"],
        "layer4": ["1x1/256→80, 3x3/80 s2, 1x1/80→512; 1x1/512→8, 3x3/8, 1x1/8→512",
                   "1x1/512→72, 3x3/72, 1x1/72→512; 1x1/512→64, 3x3/64, 1x1/64→512"],
    },
    "stresnet-nano": {
        "stem": "1x1/3→3, 7x7 s2/3→8, 1x1/8→32, 1x1/32→64",
        "layer1": ["1x1/64→32, 3x3/32, 1x1/32→64; 1x1/64→16, 3x3/16, 1x1/16→64",
                   "1x1/64→40, 3x3/40, 1x1/40→64; 1x1/64→8, 3x3/8, 1x1/8→64"],
        "layer2": ["1x1/64→32, 3x3/32 s2, 1x1/32→128; 1x1/128→8, 3x3/8, 1x1/8→128",
                   "1x1/128→64, 3x3/64, 1x1/64→128; 1x1/128→16, 3x3/16, 1x1/16→128"],
        "layer3": ["1x1/128→48, 3x3/48 s2, 1x1/48→256; 1x1/256→16, 3x3/16, 1x1/16→256",
                   "1x1/256→48, 3x3/48, 1x1/48→256; 1x1/256→8, 3x3/8, 1x1/8→256"],
        "layer4": ["1x1/256→32, 3x3/32 s2, 1x1/32→512; 1x1/512→8, 3x3/8, 1x1/8→512",
                   "1x1/512→48, 3x3/48, 1x1/48→512; 1x1/512→8, 3x3/8, 1x1/8→512"],
    },
    "stresnet-pico": {
        "stem": "1x1/3→3, 7x7 s2/3→8, 1x1/8→32, 1x1/32→64",
        "layer1": ["1x1/64→24, 3x3/24, 1x1/24→64; 1x1/64→16, 3x3/16, 1x1/16→64",
                   "1x1/64→24, 3x3/24, 1x1/24→64; 1x1/64→8, 3x3/8, 1x1/8→64"],
        "layer2": ["1x1/64→24, 3x3/24 s2, 1x1/24→128; 1x1/128→8, 3x3/8, 1x1/8→128",
                   "1x1/128→8, 3x3/8, 1x1/8→128; 1x1/128→8, 3x3/8, 1x1/8→128"],
        "layer3": ["1x1/128→8, 3x3/8 s2, 1x1/8→256; 1x1/256→8, 3x3/8, 1x1/8→256",
                   "1x1/256→8, 3x3/8, 1x1/8→256; 1x1/256→8, 3x3/8, 1x1/8→256"],
        "layer4": ["1x1/256→8, 3x3/8 s2, 1x1/8→512; 1x1/512→8, 3x3/8, 1x1/8→512",
                   "1x1/512→8, 3x3/8, 1x1/8→512; 1x1/512→8, 3x3/8, 1x1/8→512"],
    },
}


class _Builder:
    def __init__(self):
        self.layers: list[LayerSpec] = []

    def add(self, lid, kind, n, m, k=1, stride=1, pad=0, inputs=None, bn=False, decomposable=False):
        if inputs is None:
            inputs = (self.layers[-1].id,)
        self.layers.append(LayerSpec(lid, kind, n, m, k, stride, pad, tuple(inputs), bn=bn, decomposable=decomposable))
        return lid

    def conv(self, lid, n, m, k, stride=1, inputs=None, decomposable=False):
        return self.add(lid, "conv", n, m, k, stride, k // 2, inputs, bn=True, decomposable=decomposable)

    def conv_unit(self, prefix, n, m, stride, rank, inputs):
        """A 3x3 conv, or its reduce/core/expand triplet when ``rank`` is set."""
        if rank is None:
            return self.conv(prefix, n, m, 3, stride, inputs, decomposable=True)
        self.conv(f"{prefix}.reduce", n, rank, 1, inputs=inputs)
        self.conv(f"{prefix}.core", rank, rank, 3, stride, decomposable=True)
        return self.conv(f"{prefix}.expand", rank, m, 1)


def _build(blocks, stem, shortcut: str, input_shape) -> ModelGraph:
    b = _Builder()
    x = b.add("input", "input", input_shape[0], input_shape[0], inputs=())
    x = stem(b)
    cin = 64
    for i, ranks in enumerate(blocks):
        stage, block = i // 2 + 1, i % 2
        cout = STAGE_CHANNELS[stage - 1]
        stride = 2 if stage > 1 and block == 0 else 1
        pfx = f"layer{stage}.{block}"
        y = b.conv_unit(f"{pfx}.conv1", cin, cout, stride, ranks[0], (x,))
        y = b.conv_unit(f"{pfx}.conv2", cout, cout, 1, ranks[1], (y,))
        skip = x
        if stride != 1 or cin != cout:
            if shortcut == "projection":
                skip = b.conv(f"{pfx}.shortcut", cin, cout, 1, stride, (x,))
            else:
                skip = b.add(f"{pfx}.shortcut", "downsample", cin, cout, 1, stride, 0, (x,))
        x = b.add(f"{pfx}.add", "add", cout, cout, inputs=(y, skip))
        cin = cout
    b.add("pool", "avgpool_global", 512, 512)
    b.add("fc", "linear", 512, 1000)
    return ModelGraph(tuple(input_shape), tuple(b.layers), ("fc",))


def build_preset(name: str, input_shape=DEFAULT_INPUT, projection_stem: bool = True, shortcut: str | None = None) -> ModelGraph:
    """Build a named architecture.

    ST variants default to parameter-free ``downsample`` shortcuts and to
    the projection stem; ``projection_stem=False`` gives the stem as it was
    before the RAM rewrite (last stem conv emitting 64 channels directly).
    """
    if name == "resnet18":
        def stem(b):
            b.conv("stem.conv", input_shape[0], 64, 7, 2, decomposable=False)
            return b.add("stem.pool", "maxpool", 64, 64, 3, 2, 1)
        return _build([(None, None)] * 8, stem, shortcut or "projection", input_shape)

    if name not in _ST_BLOCKS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    mid, blocks = _ST_BLOCKS[name]

    def st_stem(b):
        b.conv("stem.conv1", input_shape[0], 3, 1)
        b.conv("stem.conv2", 3, mid, 7, 2)
        if projection_stem:
            b.conv("stem.conv3", mid, 32, 1)
            b.add("stem.pool", "maxpool", 32, 32, 3, 2, 1)
            return b.conv("stem.proj", 32, 64, 1)
        b.conv("stem.conv3", mid, 64, 1)
        return b.add("stem.pool", "maxpool", 64, 64, 3, 2, 1)

    return _build(blocks, st_stem, shortcut or "downsample", input_shape)


def stem_layers(graph: ModelGraph) -> list[str]:
    return [l.id for l in graph.layers if l.id == "input" or l.id.startswith("stem.")]


# ---------------------------------------------------------------- verification

_ENTRY = re.compile(r"(\d+)x(\d+)(?:\s*s(\d+))?\s*/\s*(\d+)(?:\s*→\s*(\d+))?(?:\s*s(\d+))?")


def parse_table_row(text: str, stage_out: int) -> list[tuple[int, int, int, int]]:
    """Expand a table cell into ``(k, in, out, stride)`` per conv.

    ``;`` separates conv units. Inside a unit, a bare ``KxK/C`` entry is an
    R->R core when it follows a 1x1 reduce, otherwise a C->stage_out conv.
    """
    convs = []
    for unit in text.split(";"):
        prev_reduce = False
        for item in unit.split(","):
            item = item.strip()
            mt = _ENTRY.fullmatch(item)
            if mt is None:
                raise ValueError(f"cannot parse table entry {item!r}")
            k = int(mt.group(1))
            n = int(mt.group(4))
            stride = int(mt.group(3) or mt.group(6) or 1)
            if mt.group(5) is not None:
                m = int(mt.group(5))
            else:
                m = n if prev_reduce else stage_out
            convs.append((k, n, m, stride))
            prev_reduce = k == 1 and mt.group(5) is not None
    return convs


def _sig(layer: LayerSpec):
    return (layer.kernel_size, layer.in_channels, layer.out_channels, layer.stride)


def check_structure(graph: ModelGraph, name: str) -> list[str]:
    """Compare a graph against the architecture table for ``name``.

    Returns human-readable failures (empty when everything matches); each
    names the first offending layer.
    """
    table = ARCH_TABLES[name]
    failures = []
    ids = {l.id for l in graph.layers}

    def compare(label, expected, actual_layers):
        actual = [_sig(l) for l in actual_layers]
        for i, exp in enumerate(expected):
            if i >= len(actual):
                failures.append(f"{label}: missing conv #{i} (expected k={exp[0]} {exp[1]}->{exp[2]} s{exp[3]})")
                return
            if actual[i] != exp:
                failures.append(
                    f"{label}: layer {actual_layers[i].id!r} is k={actual[i][0]} {actual[i][1]}->{actual[i][2]} s{actual[i][3]}, "
                    f"expected k={exp[0]} {exp[1]}->{exp[2]} s{exp[3]}"
                )
                return
        if len(actual) > len(expected):
            failures.append(f"{label}: unexpected extra layer {actual_layers[len(expected)].id!r}")

    stem = [l for l in graph.layers if l.id.startswith("stem.") and l.kind == "conv"]
    compare("stem", parse_table_row(table["stem"], 64), stem)

    for s in range(1, 5):
        stage_out = STAGE_CHANNELS[s - 1]
        for blk, row in enumerate(table[f"layer{s}"]):
            pfx = f"layer{s}.{blk}."
            convs = [l for l in graph.layers if l.kind == "conv" and l.id.startswith(pfx) and ".shortcut" not in l.id]
            compare(f"layer{s} block{blk + 1}", parse_table_row(row, stage_out), convs)
        first = f"layer{s}.0.conv1"
        first = first if first in ids else f"{first}.reduce"
        last = f"layer{s}.1.add"
        if first in ids and last in ids:
            sig = (graph.layer(first).in_channels, graph.shape(last)[0])
            want = (64 if s == 1 else STAGE_CHANNELS[s - 2], stage_out)
            if sig != want:
                failures.append(f"layer{s}: stage channels {sig[0]}->{sig[1]}, expected {want[0]}->{want[1]}")
        else:
            failures.append(f"layer{s}: stage boundary layers missing")
    return failures


def check_param_count(graph: ModelGraph, name: str) -> tuple[bool, int, float, float]:
    """``(ok, actual, reported, relative_error)`` against the reported count."""
    reported, tol = REPORTED_PARAMS[name]
    actual = param_count(graph)
    rel = (actual - reported) / reported
    return abs(rel) <= tol, actual, reported, rel


def resolve_taps(spec: str) -> list[tuple[str, int]]:
    """Parse ``"dark3:64,layer3.1.add:128"`` or the shorthand ``"yolox"``."""
    if spec.strip() == "yolox":
        return list(DARK_TAPS.values())
    taps = []
    for part in filter(None, (p.strip() for p in spec.split(","))):
        if ":" in part:
            lid, ch = part.rsplit(":", 1)
            lid = DARK_TAPS.get(lid, (lid,))[0]
            taps.append((lid, int(ch)))
        elif part in DARK_TAPS:
            taps.append(DARK_TAPS[part])
        else:
            raise ModelError(f"neck tap {part!r} needs a ':channels' suffix")
    return taps
