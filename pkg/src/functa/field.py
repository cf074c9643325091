"""Shift-modulated SIREN with hand-written gradients.

Layer ``i < depth - 1`` computes ``sin(omega0 * (h @ W_i + b_i + s_i))`` where
``s_i`` is the i-th ``width``-sized slice of the modulation vector. The last
layer is affine and unmodulated.

The batched kernels (``forward``, ``backward``, ``backward_tangent``) work on
modulations of shape ``(B, N, C)`` against one shared coordinate array of
shape ``(N, in_dim)``. ``backward_tangent`` is the forward-mode derivative of
``backward`` along a modulation direction, i.e. a Hessian-vector product of
the MSE loss, which is what the meta-learner needs to differentiate through
its inner SGD steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SirenConfig",
    "FieldParams",
    "CoordGrid",
    "siren_init",
    "field_forward",
    "field_backward",
    "make_coord_grid",
    "forward",
    "backward",
    "backward_tangent",
]

COORD_SCHEMES = ("global_unit", "per_patch", "binary")


@dataclass(frozen=True)
class SirenConfig:
    in_dim: int = 2
    out_dim: int = 3
    width: int = 64
    depth: int = 4
    omega0: float = 30.0

    def __post_init__(self):
        if self.width < 1 or self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("in_dim, out_dim and width must be >= 1")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if not self.omega0 > 0:
            raise ValueError("omega0 must be positive")

    @property
    def mod_dim(self) -> int:
        """Length C of the shift modulation (one slice per sine layer)."""
        return self.width * (self.depth - 1)

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class FieldParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "FieldParams":
        return FieldParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(
            [w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases]
        )

    def check(self, config: SirenConfig) -> None:
        shapes = config.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError(f"expected {len(shapes)} layers, got {len(self.weights)}")
        for i, (w, b, (fi, fo)) in enumerate(zip(self.weights, self.biases, shapes)):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ValueError(
                    f"layer {i}: weight {w.shape} / bias {b.shape}, expected ({fi}, {fo}) / ({fo},)"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite entries")


@dataclass(frozen=True)
class CoordGrid:
    """Pixel-centre coordinates of a ``d x d`` image in row-major order.

    ``inputs`` is what the network sees (depends on ``scheme``); ``positions``
    are always the global pixel centres in ``[0, 1]^2`` and drive modulation
    interpolation.
    """

    inputs: np.ndarray
    positions: np.ndarray
    scheme: str
    resolution: int
    latent_side: int = 1
    pixels: np.ndarray = field(repr=False, default=None)

    @property
    def num_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def in_dim(self) -> int:
        return self.inputs.shape[1]


def siren_init(config: SirenConfig, seed: int = 0, dtype=np.float32) -> FieldParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(config.layer_shapes()):
        if i == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / config.omega0
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return FieldParams(weights, biases)


def forward(params: FieldParams, config: SirenConfig, x: np.ndarray, mods: np.ndarray):
    """Evaluate the field at ``x`` (N, in_dim) under ``mods`` (B, N, C).

    Returns the output ``(B, N, out_dim)`` and a cache for the backward kernels.
    """
    w_ = config.width
    n_sine = config.depth - 1
    if mods.shape[-1] != config.mod_dim:
        raise ValueError(f"modulation length {mods.shape[-1]} != {config.mod_dim}")
    if x.shape[-1] != config.in_dim:
        raise ValueError(f"coordinate dim {x.shape[-1]} != {config.in_dim}")
    om = config.omega0
    hs = [x]
    coss = []
    h = x
    for i in range(n_sine):
        pre = h @ params.weights[i] + params.biases[i] + mods[..., i * w_:(i + 1) * w_]
        phase = om * pre
        h = np.sin(phase)
        coss.append(np.cos(phase))
        hs.append(h)
    y = h @ params.weights[-1] + params.biases[-1]
    return y, {"hs": hs, "coss": coss}


def _sum_outer(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """sum over all leading axes of h^T g; h may lack the batch axis."""
    if h.ndim < g.ndim:
        g = g.reshape(-1, *g.shape[-2:]).sum(axis=0)
    return h.reshape(-1, h.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def _sum_rows(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def backward(params: FieldParams, config: SirenConfig, cache, g_y: np.ndarray):
    """Pull ``g_y = dL/dy`` back to parameter and modulation gradients.

    Parameter gradients are summed over the batch; modulation gradients keep
    the ``(B, N, C)`` layout.
    """
    om = config.omega0
    hs, coss = cache["hs"], cache["coss"]
    n_sine = config.depth - 1
    gws = [None] * config.depth
    gbs = [None] * config.depth
    gws[-1] = _sum_outer(hs[-1], g_y)
    gbs[-1] = _sum_rows(g_y)
    g_h = g_y @ params.weights[-1].T
    g_mods = []
    for i in reversed(range(n_sine)):
        g_a = g_h * (om * coss[i])
        gws[i] = _sum_outer(hs[i], g_a)
        gbs[i] = _sum_rows(g_a)
        g_mods.append(g_a)
        if i > 0:
            g_h = g_a @ params.weights[i].T
    g_mods = np.concatenate(g_mods[::-1], axis=-1)
    return FieldParams(gws, gbs), g_mods


def backward_tangent(
    params: FieldParams,
    config: SirenConfig,
    cache,
    g_y: np.ndarray,
    mods_dot: np.ndarray,
    scale,
):
    """Directional derivative of ``backward`` for the MSE loss.

    ``mods_dot`` (B, N, C) is the modulation tangent; parameters and targets
    are held fixed. For a loss with ``g_y = scale * (y - target)`` the output
    tangent is ``scale * y_dot``. ``scale`` broadcasts against (B, 1, 1).

    Returns the tangents of the parameter gradients and of the modulation
    gradient, i.e. the Hessian applied to ``(0, mods_dot)``.
    """
    om = config.omega0
    w_ = config.width
    hs, coss = cache["hs"], cache["coss"]
    n_sine = config.depth - 1

    # forward tangent
    h_dots = [None]
    a_dots = []
    h_dot = None
    for i in range(n_sine):
        a_dot = mods_dot[..., i * w_:(i + 1) * w_]
        if h_dot is not None:
            a_dot = a_dot + h_dot @ params.weights[i]
        a_dots.append(a_dot)
        h_dot = (om * coss[i]) * a_dot
        h_dots.append(h_dot)
    y_dot = h_dot @ params.weights[-1]
    gy_dot = scale * y_dot

    # backward tangent
    gws = [None] * config.depth
    gbs = [None] * config.depth
    gws[-1] = _sum_outer(hs[-1], gy_dot) + _sum_outer(h_dots[-1], g_y)
    gbs[-1] = _sum_rows(gy_dot)
    g_h = g_y @ params.weights[-1].T
    g_h_dot = gy_dot @ params.weights[-1].T
    g_mods_dot = []
    for i in reversed(range(n_sine)):
        sin_i = hs[i + 1]
        g_a = g_h * (om * coss[i])
        g_a_dot = g_h_dot * (om * coss[i]) - g_h * ((om * om) * sin_i * a_dots[i])
        gws[i] = _sum_outer(hs[i], g_a_dot)
        if i > 0:
            gws[i] = gws[i] + _sum_outer(h_dots[i], g_a)
        gbs[i] = _sum_rows(g_a_dot)
        g_mods_dot.append(g_a_dot)
        if i > 0:
            g_h = g_a @ params.weights[i].T
            g_h_dot = g_a_dot @ params.weights[i].T
    g_mods_dot = np.concatenate(g_mods_dot[::-1], axis=-1)
    return FieldParams(gws, gbs), g_mods_dot


def field_forward(params: FieldParams, config: SirenConfig, mod, coord) -> np.ndarray:
    """Evaluate the field at one coordinate under one modulation vector."""
    mod = np.asarray(mod)
    coord = np.asarray(coord)
    if mod.shape != (config.mod_dim,):
        raise ValueError(f"modulation shape {mod.shape}, expected ({config.mod_dim},)")
    if coord.shape != (config.in_dim,):
        raise ValueError(f"coordinate shape {coord.shape}, expected ({config.in_dim},)")
    y, _ = forward(params, config, coord[None, :], mod[None, None, :])
    return y[0, 0]


def field_backward(params: FieldParams, config: SirenConfig, mod, coords, target):
    """MSE reconstruction loss over all coordinates and its exact gradients.

    ``coords`` is a :class:`CoordGrid` or an ``(N, in_dim)`` array; ``mod`` is
    either one modulation vector shared by all coordinates or an ``(N, C)``
    per-coordinate array. Returns ``(loss, grad_params, grad_mod)`` with
    ``grad_mod`` shaped like ``mod``.
    """
    x = coords.inputs if isinstance(coords, CoordGrid) else np.asarray(coords)
    mod = np.asarray(mod)
    target = np.asarray(target)
    n = x.shape[0]
    if target.shape != (n, config.out_dim):
        raise ValueError(f"target shape {target.shape}, expected ({n}, {config.out_dim})")
    shared = mod.ndim == 1
    mods = np.broadcast_to(mod, (n, config.mod_dim)) if shared else mod
    if mods.shape != (n, config.mod_dim):
        raise ValueError(f"modulation shape {mod.shape} incompatible with {n} coordinates")
    y, cache = forward(params, config, x, mods[None])
    resid = y[0] - target
    loss = float(np.mean(resid**2))
    g_y = (2.0 / resid.size) * resid
    grads, g_mods = backward(params, config, cache, g_y[None])
    g_mods = g_mods[0]
    return loss, grads, (g_mods.sum(axis=0) if shared else g_mods)


def _binary_code(idx: np.ndarray, bits: int) -> np.ndarray:
    shifts = np.arange(bits - 1, -1, -1)
    return (idx[:, None] >> shifts) & 1


def make_coord_grid(d: int, s: int = 1, scheme: str = "global_unit", dtype=np.float32) -> CoordGrid:
    """Coordinates for a ``d x d`` image whose latent grid has side ``s``."""
    if scheme not in COORD_SCHEMES:
        raise ValueError(f"unknown coordinate scheme {scheme!r}")
    if d < 1 or s < 1:
        raise ValueError("resolution and latent side must be >= 1")
    rows, cols = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    positions = np.stack([(rows + 0.5) / d, (cols + 0.5) / d], axis=1)
    if scheme == "global_unit":
        inputs = positions
    elif scheme == "per_patch":
        if d % s:
            raise ValueError(f"resolution {d} not divisible by latent side {s}")
        p = d // s
        inputs = np.stack([(rows % p + 0.5) / p, (cols % p + 0.5) / p], axis=1)
    else:
        m = d.bit_length() - 1
        if d != 1 << m:
            raise ValueError(f"binary coordinates need a power-of-two resolution, got {d}")
        inputs = np.concatenate([_binary_code(rows, m), _binary_code(cols, m)], axis=1)
    return CoordGrid(
        inputs=inputs.astype(dtype),
        positions=positions.astype(np.float64),
        scheme=scheme,
        resolution=d,
        latent_side=s,
        pixels=np.stack([rows, cols], axis=1),
    )
