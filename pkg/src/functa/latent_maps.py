"""Latent -> modulation maps and spatial interpolation.

Every supported map is affine in the latent and can be written as
``m = lift(z) @ W + b`` where ``lift`` rearranges the latent into rows of a
matrix (one row per latent cell; a 3x3 im2col for ``conv3x3``). Per-coordinate
modulations are then ``P @ m`` with ``P`` the ``(N, s*s)`` interpolation
matrix. Keeping both steps as explicit linear operators makes their adjoints
(and thus the latent gradients) one line each.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LatentMap",
    "init_latent_map",
    "latent_side",
    "lift",
    "lift_adjoint",
    "latent_to_modulation",
    "interpolation_weights",
    "interpolation_matrix",
    "interpolate_modulation",
    "modulations_for_grid",
]

MAP_KINDS = ("dense", "conv1x1", "conv3x3")
INTERPOLATIONS = ("nearest", "bilinear")


@dataclass
class LatentMap:
    kind: str
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kind not in MAP_KINDS:
            raise ValueError(f"unknown latent map kind {self.kind!r}")

    @property
    def out_dim(self) -> int:
        return self.bias.shape[0]

    def matrix(self) -> np.ndarray:
        """Weight as a ``(rows, C)`` matrix matching :func:`lift`."""
        return self.weight.reshape(-1, self.weight.shape[-1])

    def copy(self) -> "LatentMap":
        return LatentMap(self.kind, self.weight.copy(), self.bias.copy())

    def astype(self, dtype) -> "LatentMap":
        return LatentMap(self.kind, self.weight.astype(dtype), self.bias.astype(dtype))


def latent_side(latent_shape) -> int:
    return 1 if len(latent_shape) == 1 else latent_shape[0]


def init_latent_map(kind: str, latent_shape, mod_dim: int, seed: int = 0, dtype=np.float32) -> LatentMap:
    rng = np.random.default_rng(seed)
    latent_shape = tuple(latent_shape)
    if kind == "dense":
        if len(latent_shape) != 1:
            raise ValueError("dense map needs a vector latent")
        shape = (latent_shape[0], mod_dim)
    else:
        if len(latent_shape) != 3 or latent_shape[0] != latent_shape[1]:
            raise ValueError(f"{kind} map needs an (s, s, c) latent, got {latent_shape}")
        c = latent_shape[2]
        shape = (c, mod_dim) if kind == "conv1x1" else (3, 3, c, mod_dim)
    fan_in = int(np.prod(shape[:-1]))
    weight = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(dtype)
    return LatentMap(kind, weight, np.zeros(mod_dim, dtype=dtype))


def _check_latent(kind: str, z: np.ndarray, batched: bool):
    core = z.shape[1:] if batched else z.shape
    if kind == "dense":
        if len(core) != 1:
            raise ValueError(f"dense map expects a vector latent, got shape {core}")
    elif len(core) != 3 or core[0] != core[1]:
        raise ValueError(f"{kind} map expects an (s, s, c) latent, got shape {core}")


def lift(kind: str, z: np.ndarray) -> np.ndarray:
    """Batched latent ``(B, *latent_shape)`` -> ``(B, cells, rows)``."""
    b = z.shape[0]
    if kind == "dense":
        return z.reshape(b, 1, -1)
    s, c = z.shape[1], z.shape[3]
    if kind == "conv1x1":
        return z.reshape(b, s * s, c)
    zp = np.pad(z, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [zp[:, di:di + s, dj:dj + s, :] for di in range(3) for dj in range(3)]
    return np.stack(cols, axis=3).reshape(b, s * s, 9 * c)


def lift_adjoint(kind: str, g: np.ndarray, latent_shape) -> np.ndarray:
    """Adjoint of :func:`lift`: ``(B, cells, rows)`` -> ``(B, *latent_shape)``."""
    b = g.shape[0]
    if kind != "conv3x3":
        return g.reshape(b, *latent_shape)
    s, _, c = latent_shape
    g = g.reshape(b, s, s, 9, c)
    out = np.zeros((b, s + 2, s + 2, c), dtype=g.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            out[:, di:di + s, dj:dj + s, :] += g[:, :, :, k, :]
            k += 1
    return out[:, 1:-1, 1:-1, :]


def latent_to_modulation(lmap: LatentMap, z) -> np.ndarray:
    """Map one latent to its modulation grid.

    Returns ``(C,)`` for a vector latent and ``(s, s, C)`` for a spatial one.
    """
    z = np.asarray(z)
    _check_latent(lmap.kind, z, batched=False)
    rows = lift(lmap.kind, z[None])[0]
    w = lmap.matrix()
    if rows.shape[-1] != w.shape[0]:
        raise ValueError(f"latent feature size {rows.shape[-1]} does not match map input {w.shape[0]}")
    m = rows @ w + lmap.bias
    if lmap.kind == "dense":
        return m[0]
    s = z.shape[0]
    return m.reshape(s, s, -1)


def interpolation_weights(positions: np.ndarray, s: int, scheme: str):
    """Cell indices and weights ``(N, k)`` for positions in ``[0, 1]^2``.

    ``nearest`` picks cell ``floor(pos * s)``. ``bilinear`` treats cell
    centres as sitting at ``(i + 0.5) / s`` and clamps to the border cells
    outside the outermost centres. Out-of-range positions are clamped.
    """
    if scheme not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {scheme!r}")
    pos = np.clip(np.asarray(positions, dtype=np.float64).reshape(-1, 2), 0.0, 1.0)
    if scheme == "nearest":
        ij = np.minimum(np.floor(pos * s).astype(np.int64), s - 1)
        return (ij[:, 0] * s + ij[:, 1])[:, None], np.ones((pos.shape[0], 1))
    u = pos * s - 0.5
    i0 = np.clip(np.floor(u).astype(np.int64), 0, s - 1)
    f = np.clip(u - i0, 0.0, 1.0)
    f[i0 == s - 1] = 0.0
    i1 = np.minimum(i0 + 1, s - 1)
    (r0, c0), (r1, c1), (fr, fc) = i0.T, i1.T, f.T
    idx = np.stack([r0 * s + c0, r0 * s + c1, r1 * s + c0, r1 * s + c1], axis=1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return idx, w


def interpolation_matrix(positions: np.ndarray, s: int, scheme: str, dtype=np.float32) -> np.ndarray:
    idx, w = interpolation_weights(positions, s, scheme)
    n = idx.shape[0]
    p = np.zeros((n, s * s), dtype=np.float64)
    np.add.at(p, (np.repeat(np.arange(n), idx.shape[1]), idx.ravel()), w.ravel())
    return p.astype(dtype)


def interpolate_modulation(grid, coord, scheme: str = "nearest") -> np.ndarray:
    """Modulation vector at one position of an ``(s, s, C)`` grid."""
    grid = np.asarray(grid)
    s = grid.shape[0]
    idx, w = interpolation_weights(np.asarray(coord, dtype=np.float64), s, scheme)
    flat = grid.reshape(s * s, -1)
    out = w[0, 0].astype(grid.dtype) * flat[idx[0, 0]]
    for k in range(1, idx.shape[1]):
        out = out + w[0, k].astype(grid.dtype) * flat[idx[0, k]]
    return out


def modulations_for_grid(lmap: LatentMap, z, coords, scheme: str = "nearest") -> np.ndarray:
    """Per-coordinate modulations ``(N, C)`` for a whole :class:`CoordGrid`."""
    m = latent_to_modulation(lmap, z)
    n = coords.positions.shape[0]
    if m.ndim == 1:
        return np.broadcast_to(m, (n, m.shape[0])).copy()
    s = m.shape[0]
    idx, w = interpolation_weights(coords.positions, s, scheme)
    flat = m.reshape(s * s, -1)
    w = w.astype(m.dtype)
    out = w[:, :1] * flat[idx[:, 0]]
    for k in range(1, idx.shape[1]):
        out = out + w[:, k:k + 1] * flat[idx[:, k]]
    return out
