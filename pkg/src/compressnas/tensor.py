"""Dense tensor numerics: convolution, channel-mode unfolding, truncated SVD.

Tensors are plain ``numpy.ndarray`` objects in float64. Storage on disk uses
the CNT1 container (see :mod:`compressnas.cnt`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("output", "input")


@dataclass(frozen=True)
class SvdResult:
    left_vectors: np.ndarray  # rows x r
    singular_values: np.ndarray  # r, non-increasing
    right_vectors: np.ndarray  # cols x r

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def as_tensor(data, shape=None) -> np.ndarray:
    t = np.asarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if t.size != int(np.prod(shape)):
            raise ValueError(f"data length {t.size} does not match shape {shape}")
        t = t.reshape(shape)
    if t.ndim > 4:
        raise ValueError(f"tensors have at most 4 axes, got {t.ndim}")
    if any(s < 1 for s in t.shape):
        raise ValueError(f"all extents must be >= 1, got {t.shape}")
    return t


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation without bias and with zero padding.

    ``x`` is ``[C, H, W]`` or a batch ``[B, C, H, W]``; ``kernel`` is
    ``[C_out, C_in, k, k]``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ValueError(f"kernel must have 4 axes [C_out, C_in, k, k], got shape {kernel.shape}")
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise ValueError(f"input must be [C, H, W] or [B, C, H, W], got shape {x.shape}")
        x = x[None]
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw:
        raise ValueError(f"kernel axes 2/3 must be square, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ValueError(f"channel axis mismatch: input has C_in={x.shape[1]}, kernel expects C_in={c_in}")
    b, _, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"spatial axes too small: H={h}, W={w} give output {ho}x{wo} for k={kh}")

    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == 1:
        xs = x[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        out = np.tensordot(kernel[:, :, 0, 0], xs, axes=([1], [1]))  # [O, B, Ho, Wo]
        out = out.transpose(1, 0, 2, 3)
    else:
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # [B, Ho, Wo, O]
        out = out.transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out if batched else out[0]


def unfold(kernel: np.ndarray, mode: str) -> np.ndarray:
    """Matricize a ``[M, N, k, k]`` kernel along its output or input channel axis."""
    kernel = np.asarray(kernel)
    if kernel.ndim != 4:
        raise ValueError(f"unfold expects a 4-axis kernel, got {kernel.ndim} axes")
    if mode == "output":
        return kernel.reshape(kernel.shape[0], -1)
    if mode == "input":
        return kernel.transpose(1, 0, 2, 3).reshape(kernel.shape[1], -1)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def fold(matrix: np.ndarray, mode: str, shape) -> np.ndarray:
    m, n, kh, kw = shape
    matrix = np.asarray(matrix)
    if mode == "output":
        return matrix.reshape(m, n, kh, kw)
    if mode == "input":
        return matrix.reshape(n, m, kh, kw).transpose(1, 0, 2, 3)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _round_robin(n: int) -> list[np.ndarray]:
    # tournament ordering over an even count: every index pair meets exactly
    # once per sweep and the pairs of one round are disjoint
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        flat = []
        for i in range(n // 2):
            p, q = players[i], players[n - 1 - i]
            flat += [min(p, q), max(p, q)]
        rounds.append(np.array(flat))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _rotate_pairs(x: np.ndarray, c: np.ndarray, s: np.ndarray, axis: int) -> None:
    # x viewed with axis split as (h, 2); rotate each (p, q) pair in place
    if axis == 0:
        xp, xq = x[:, 0].copy(), x[:, 1]
        x[:, 0] = c[:, None] * xp - s[:, None] * xq
        x[:, 1] = s[:, None] * xp + c[:, None] * xq
    else:
        xp, xq = x[..., 0].copy(), x[..., 1]
        x[..., 0] = c * xp - s * xq
        x[..., 1] = s * xp + c * xq


def jacobi_eigh(gram: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` unsorted. Sweeps run in parallel
    (tournament) ordering; iteration stops once the off-diagonal Frobenius
    mass falls below ``tol * ||gram||_F``.
    """
    g = np.asarray(gram, dtype=np.float64)
    n = g.shape[0]
    if n == 1:
        return g.diagonal().copy(), np.eye(1)
    scale = np.linalg.norm(g)
    if scale == 0.0:
        return np.zeros(n), np.eye(n)
    m = n + (n % 2)
    a = np.zeros((m, m))
    a[:n, :n] = g
    v = np.eye(m)
    h = m // 2
    rounds = _round_robin(m)
    pos = np.arange(m)  # pos[i]: current slot of original index i
    for _ in range(max_sweeps):
        off = a.copy()
        np.fill_diagonal(off, 0.0)
        if np.linalg.norm(off) <= tol * scale:
            break
        for flat in rounds:
            perm = pos[flat]
            a = a[np.ix_(perm, perm)]
            v = v[:, perm]
            pos[flat] = np.arange(m)
            d = a.diagonal()
            app, aqq = d[0::2], d[1::2]
            apq = a[np.arange(0, m, 2), np.arange(1, m, 2)]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            safe = np.where(active, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            c = np.where(active, 1.0 / np.sqrt(t * t + 1.0), 1.0)
            s = np.where(active, t * c, 0.0)
            a4 = a.reshape(h, 2, h, 2)
            _rotate_pairs(a4, c, s, axis=-1)
            _rotate_pairs(a4.transpose(2, 3, 0, 1), c, s, axis=-1)
            _rotate_pairs(v.reshape(m, h, 2), c, s, axis=-1)
    a = a[np.ix_(pos, pos)]
    v = v[:, pos]
    return a.diagonal()[:n].copy(), v[:n, :n]


def _orthonormal_columns(w: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt; columns flagged invalid (or that collapse) are
    replaced by a completion from the standard basis."""
    rows, r = w.shape
    out = np.zeros_like(w)
    basis = iter(range(rows))
    for j in range(r):
        vec = w[:, j].copy() if valid[j] else None
        while True:
            if vec is not None:
                for _ in range(2):
                    vec -= out[:, :j] @ (out[:, :j].T @ vec)
                norm = np.linalg.norm(vec)
                if norm > 1e-6:
                    out[:, j] = vec / norm
                    break
            vec = np.zeros(rows)
            vec[next(basis)] = 1.0
    return out


def svd_truncated(matrix: np.ndarray, r: int) -> SvdResult:
    """Top-``r`` singular triplets via Jacobi eigen-decomposition of the
    smaller Gram matrix.

    Signs are fixed so that each left vector's largest-magnitude entry is
    non-negative (lowest index wins ties).
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd_truncated expects a matrix, got {a.ndim} axes")
    rows, cols = a.shape
    if not 1 <= r <= min(rows, cols):
        raise ValueError(f"rank r={r} out of range [1, {min(rows, cols)}]")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")

    wide = rows <= cols
    gram = a @ a.T if wide else a.T @ a
    evals, evecs = jacobi_eigh(gram)
    order = np.argsort(-evals, kind="stable")[:r]
    direct = evecs[:, order]
    # sigma from the projection norm, not sqrt(eigenvalue): the latter turns
    # eps-level Gram noise into sqrt(eps)-level singular values
    proj = (a.T if wide else a) @ direct
    sigma = np.linalg.norm(proj, axis=0)
    resort = np.argsort(-sigma, kind="stable")
    sigma, direct, proj = sigma[resort], direct[:, resort], proj[:, resort]

    # the side recovered by division is trusted only for non-negligible sigma
    valid = sigma > 1e-7 * max(sigma[0], 1e-300)
    derived = _orthonormal_columns(proj / np.where(valid, sigma, 1.0), valid)
    u, v = (direct, derived) if wide else (derived, direct)

    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(r)] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdResult(u, sigma, v)
