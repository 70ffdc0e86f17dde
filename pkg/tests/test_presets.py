import pytest

from compressnas.graph import param_count
from compressnas.presets import ARCH_TABLES, REPORTED_PARAMS, PRESETS, build_preset, check_param_count, check_structure, parse_table_row

from conftest import tamper_rank


@pytest.mark.parametrize("name", PRESETS)
def test_param_count_within_tolerance(name):
    ok, actual, reported, rel = check_param_count(build_preset(name), name)
    assert ok, f"{name}: {actual} vs {reported} ({rel:+.3%})"


def test_resnet18_tolerance_is_tight():
    assert REPORTED_PARAMS["resnet18"] == (11.68e6, 0.005)


@pytest.mark.parametrize("name", PRESETS)
def test_structure_matches_table(name):
    assert check_structure(build_preset(name), name) == []


@pytest.mark.parametrize("name", PRESETS)
def test_stage_signatures(name):
    g = build_preset(name)
    for s, (n, m) in enumerate([(64, 64), (64, 128), (128, 256), (256, 512)], start=1):
        assert g.shape(f"layer{s}.1.add")[0] == m
        first = next(l for l in g.layers if l.id.startswith(f"layer{s}.0.conv1"))
        assert first.in_channels == n


def test_resnet18_layer2_block1():
    g = build_preset("resnet18")
    c1, c2 = g.layer("layer2.0.conv1"), g.layer("layer2.0.conv2")
    assert (c1.kernel_size, c1.out_channels, c1.stride) == (3, 128, 2)
    assert (c2.kernel_size, c2.out_channels, c2.stride) == (3, 128, 1)
    assert parse_table_row(ARCH_TABLES["resnet18"]["layer2"][0], 128)[0] == (3, 64, 128, 2)


def test_nano_first_triplet():
    g = build_preset("stresnet-nano")
    sig = [(g.layer(f"layer1.0.conv1.{p}").kernel_size, g.layer(f"layer1.0.conv1.{p}").in_channels,
            g.layer(f"layer1.0.conv1.{p}").out_channels) for p in ("reduce", "core", "expand")]
    assert sig == [(1, 64, 32), (3, 32, 32), (1, 32, 64)]


def test_nano_stride_on_core():
    g = build_preset("stresnet-nano")
    assert g.layer("layer2.0.conv1.core").stride == 2
    assert g.layer("layer2.0.conv1.reduce").stride == g.layer("layer2.0.conv1.expand").stride == 1


def test_pico_layer4_rank8():
    g = build_preset("stresnet-pico")
    cores = [l for l in g.layers if l.id.startswith("layer4.") and l.id.endswith(".core")]
    assert len(cores) == 4 and all(l.in_channels == l.out_channels == 8 for l in cores)


def test_st_stem():
    g = build_preset("stresnet-micro")
    sig = [(l.kernel_size, l.in_channels, l.out_channels, l.stride) for l in g.layers if l.id.startswith("stem.") and l.kind == "conv"]
    assert sig == [(1, 3, 3, 1), (7, 3, 8, 2), (1, 8, 32, 1), (1, 32, 64, 1)]


def test_tampered_rank_fails_naming_layer():
    g = build_preset("stresnet-nano")
    tampered = tamper_rank(g, "layer3.1.conv2")
    failures = check_structure(tampered, "stresnet-nano")
    assert failures and any("layer3.1.conv2" in f for f in failures)
    assert param_count(tampered) != param_count(g)


def test_unknown_preset():
    with pytest.raises(ValueError):
        build_preset("stresnet-milli")
