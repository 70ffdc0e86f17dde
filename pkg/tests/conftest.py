import numpy as np
import pytest

from compressnas.graph import LayerSpec, ModelGraph


def nested_loop_conv(x, w, stride, pad):
    """Direct convolution, written without any vectorization."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for a in range(k):
                        for b in range(k):
                            acc += xp[c, i * stride + a, j * stride + b] * w[o, c, a, b]
                out[o, i, j] = acc
    return out


def chain(input_shape, convs):
    """Graph of sequential convs given as (id, n, m, k, stride)."""
    layers = [LayerSpec("input", "input", input_shape[0], input_shape[0])]
    prev = "input"
    for lid, n, m, k, s in convs:
        layers.append(LayerSpec(lid, "conv", n, m, k, s, k // 2, (prev,), decomposable=True))
        prev = lid
    return ModelGraph(input_shape, layers, (prev,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tamper_rank(graph, prefix, delta=8):
    """Widen the core of the ``prefix`` triplet by ``delta`` channels."""
    from dataclasses import replace

    layers = []
    for l in graph.layers:
        if l.id == f"{prefix}.core":
            l = replace(l, in_channels=l.in_channels + delta, out_channels=l.out_channels + delta)
        elif l.id == f"{prefix}.reduce":
            l = replace(l, out_channels=l.out_channels + delta)
        elif l.id == f"{prefix}.expand":
            l = replace(l, in_channels=l.in_channels + delta)
        layers.append(l)
    return ModelGraph(graph.input_shape, layers, graph.outputs)


ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
