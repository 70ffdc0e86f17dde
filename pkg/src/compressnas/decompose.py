"""Tucker-2 decomposition of conv kernels and its 1x1 -> kxk -> 1x1 realization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import LayerSpec, ModelError
from .tensor import svd_truncated, unfold


@dataclass(frozen=True)
class TuckerFactors:
    input_factor: np.ndarray  # N x R
    output_factor: np.ndarray  # M x R
    core: np.ndarray  # R x R x k x k
    stride: int = 1
    padding: int = 0

    @property
    def rank(self) -> int:
        return self.core.shape[0]

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        k = self.core.shape[2]
        return (self.output_factor.shape[0], self.input_factor.shape[0], k, k)


def channel_bases(kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full leading singular bases of the output- and input-mode unfoldings.

    Truncating these to ``R`` columns gives the HOSVD initialization for any
    rank, so one call serves every rank proposal of a layer.
    """
    k_out = unfold(kernel, "output")
    k_in = unfold(kernel, "input")
    u_out = svd_truncated(k_out, min(k_out.shape)).left_vectors
    u_in = svd_truncated(k_in, min(k_in.shape)).left_vectors
    return u_out, u_in


def _check(kernel: np.ndarray, rank: int):
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"expected a [M, N, k, k] kernel, got shape {kernel.shape}")
    m, n = kernel.shape[:2]
    if not 1 <= rank <= min(m, n):
        raise ValueError(f"rank {rank} out of range [1, {min(m, n)}] for kernel {kernel.shape}")
    if not np.all(np.isfinite(kernel)):
        raise ValueError("kernel contains non-finite values")


def tucker2_decompose(kernel, rank: int, hooi_iters: int = 2, stride: int = 1, padding: int = 0,
                      bases: tuple[np.ndarray, np.ndarray] | None = None) -> TuckerFactors:
    """Tucker-2 with a shared rank on both channel modes.

    HOSVD initialization followed by ``hooi_iters`` alternating (HOOI)
    sweeps, each re-fitting the output factor and then the input factor.
    ``bases`` may carry precomputed :func:`channel_bases`.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    _check(kernel, rank)
    if hooi_iters < 0:
        raise ValueError("hooi_iters must be non-negative")
    if bases is None:
        u_out = svd_truncated(unfold(kernel, "output"), rank).left_vectors
        u_in = svd_truncated(unfold(kernel, "input"), rank).left_vectors
    else:
        u_out, u_in = bases[0][:, :rank], bases[1][:, :rank]

    for _ in range(hooi_iters):
        y = np.einsum("mnab,nr->mrab", kernel, u_in, optimize=True)
        u_out = svd_truncated(unfold(y, "output"), rank).left_vectors
        y = np.einsum("mnab,mr->rnab", kernel, u_out, optimize=True)
        u_in = svd_truncated(unfold(y, "input"), rank).left_vectors

    core = np.einsum("mnab,mr,ns->rsab", kernel, u_out, u_in, optimize=True)
    return TuckerFactors(u_in.copy(), u_out.copy(), core, stride, padding)


def reconstruct(factors: TuckerFactors) -> np.ndarray:
    return np.einsum("rsab,mr,ns->mnab", factors.core, factors.output_factor, factors.input_factor, optimize=True)


def relative_error(kernel: np.ndarray, factors: TuckerFactors) -> float:
    return float(np.linalg.norm(kernel - reconstruct(factors)) / np.linalg.norm(kernel))


def factors_to_layers(factors: TuckerFactors, base: LayerSpec) -> list[LayerSpec]:
    """Reduce (1x1, N->R), core (kxk, R->R, carries stride/padding) and
    expand (1x1, R->M) layers with weights attached.

    The base layer's BN tag and bias move to the expand layer, so the
    triplet saves exactly ``N*M*k^2 - (N*R + R^2*k^2 + R*M)`` parameters.
    """
    if base.kind != "conv" or not base.decomposable:
        raise ModelError("layer is not a decomposable conv", base.id)
    if factors.kernel_shape != base.weight_shape:
        raise ModelError(f"factors describe kernel {factors.kernel_shape}, layer has {base.weight_shape}", base.id)
    n, m, r, k = base.in_channels, base.out_channels, factors.rank, base.kernel_size
    reduce_w = factors.input_factor.T[:, :, None, None]
    expand_w = factors.output_factor[:, :, None, None]
    return [
        LayerSpec(f"{base.id}.reduce", "conv", n, r, 1, 1, 0, base.inputs, weights=np.ascontiguousarray(reduce_w)),
        LayerSpec(f"{base.id}.core", "conv", r, r, k, base.stride, base.padding, (f"{base.id}.reduce",),
                  decomposable=True, weights=np.ascontiguousarray(factors.core)),
        LayerSpec(f"{base.id}.expand", "conv", r, m, 1, 1, 0, (f"{base.id}.core",), bn=base.bn, bias=base.bias,
                  weights=np.ascontiguousarray(expand_w)),
    ]
