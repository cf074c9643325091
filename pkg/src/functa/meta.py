"""Meta-learning of the shared field and latent map, and functaset encoding.

Each datum is encoded by ``K`` SGD steps on its latent, starting from zero,
with learned per-dimension step sizes (meta-SGD). The shared parameters
(SIREN weights, latent map, step sizes) are trained with Adam on the loss
after the last inner step. Exact outer gradients reverse through the inner
steps using Hessian-vector products of the reconstruction loss.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ._io import atomic_open
from .field import FieldParams, SirenConfig, backward, backward_tangent, forward, make_coord_grid, siren_init
from .functaset import Functaset
from .latent_maps import LatentMap, init_latent_map, interpolation_matrix, latent_side, lift, lift_adjoint

__all__ = [
    "DivergenceError",
    "MetaConfig",
    "MetaState",
    "AdamState",
    "init_meta_state",
    "inner_fit",
    "encode_batch",
    "decode",
    "meta_gradients",
    "outer_step",
    "meta_train",
    "build_functaset",
    "psnr_from_mse",
    "save_state",
    "load_state",
]

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Loss or gradients became non-finite."""


@dataclass(frozen=True)
class MetaConfig:
    inner_steps: int = 3
    outer_lr: float = 3e-5
    batch_size: int = 16
    iterations: int = 1000
    first_order: bool = False
    seed: int = 0
    log_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.step)


class _Geometry:
    def __init__(self, coords, p: np.ndarray, dtype):
        self.coords = coords
        self.inputs = coords.inputs.astype(dtype)
        self.p = p.astype(dtype)
        self.pt = np.ascontiguousarray(self.p.T)


@dataclass
class MetaState:
    siren: SirenConfig
    params: FieldParams
    latent_map: LatentMap
    inner_lrs: np.ndarray
    latent_shape: tuple
    interpolation: str
    coord_scheme: str
    resolution: int
    inner_steps: int = 3
    opt: AdamState | None = None
    _geometry: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dtype(self):
        return self.params.weights[0].dtype

    @property
    def step(self) -> int:
        return 0 if self.opt is None else self.opt.step

    def geometry(self, d: int | None = None) -> _Geometry:
        d = self.resolution if d is None else d
        if d not in self._geometry:
            s = latent_side(self.latent_shape)
            coords = make_coord_grid(d, s, self.coord_scheme)
            if self.interpolation == "none":
                p = np.ones((coords.num_points, 1))
            else:
                p = interpolation_matrix(coords.positions, s, self.interpolation, dtype=np.float64)
            self._geometry[d] = _Geometry(coords, p, self.dtype)
        return self._geometry[d]

    def shared(self) -> dict:
        """All meta-learned arrays keyed by name (views, not copies)."""
        out = {}
        for i, (w, b) in enumerate(zip(self.params.weights, self.params.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        out["map_w"] = self.latent_map.weight
        out["map_b"] = self.latent_map.bias
        out["inner_lrs"] = self.inner_lrs
        return out

    def with_shared(self, shared: dict) -> "MetaState":
        n = self.siren.depth
        params = FieldParams([shared[f"w{i}"] for i in range(n)], [shared[f"b{i}"] for i in range(n)])
        lmap = LatentMap(self.latent_map.kind, shared["map_w"], shared["map_b"])
        return replace(self, params=params, latent_map=lmap, inner_lrs=shared["inner_lrs"], _geometry=self._geometry)

    def copy(self) -> "MetaState":
        out = self.with_shared({k: v.copy() for k, v in self.shared().items()})
        out.opt = None if self.opt is None else self.opt.copy()
        return out

    def astype(self, dtype) -> "MetaState":
        out = self.with_shared({k: v.astype(dtype) for k, v in self.shared().items()})
        out._geometry = {}
        if out.opt is not None:
            out.opt = AdamState(
                {k: a.astype(dtype) for k, a in out.opt.m.items()},
                {k: a.astype(dtype) for k, a in out.opt.v.items()},
                out.opt.step,
            )
        return out


def init_meta_state(
    siren: SirenConfig,
    latent_shape,
    *,
    map_kind: str | None = None,
    interpolation: str = "nearest",
    coord_scheme: str = "per_patch",
    resolution: int = 16,
    inner_steps: int = 3,
    inner_lr: float = 1e-2,
    seed: int = 0,
    dtype=np.float32,
) -> MetaState:
    latent_shape = tuple(int(d) for d in latent_shape)
    if len(latent_shape) == 1:
        map_kind = map_kind or "dense"
        interpolation = "none"
    else:
        map_kind = map_kind or "conv1x1"
        if interpolation not in ("nearest", "bilinear"):
            raise ValueError(f"spatial latents need nearest or bilinear interpolation, got {interpolation!r}")
    params = siren_init(siren, seed, dtype=dtype)
    lmap = init_latent_map(map_kind, latent_shape, siren.mod_dim, seed=seed + 1, dtype=dtype)
    state = MetaState(
        siren=siren,
        params=params,
        latent_map=lmap,
        inner_lrs=np.full(latent_shape, inner_lr, dtype=dtype),
        latent_shape=latent_shape,
        interpolation=interpolation,
        coord_scheme=coord_scheme,
        resolution=resolution,
        inner_steps=inner_steps,
    )
    state.opt = AdamState.zeros_like(state.shared())
    return state


# -- loss, gradients and Hessian-vector products -------------------------------


@dataclass
class _Eval:
    losses: np.ndarray
    g_z: np.ndarray | None = None
    g_shared: dict | None = None
    ctx: tuple | None = None


def _targets(state: MetaState, signals: np.ndarray, geom: _Geometry) -> np.ndarray:
    signals = np.asarray(signals)
    d = geom.coords.resolution
    if signals.shape[1:] != (d, d, state.siren.out_dim):
        raise ValueError(f"signals of shape {signals.shape[1:]}, expected {(d, d, state.siren.out_dim)}")
    return signals.reshape(len(signals), d * d, -1).astype(state.dtype)


def _mods(state: MetaState, geom: _Geometry, z: np.ndarray):
    a = lift(state.latent_map.kind, z)
    m = a @ state.latent_map.matrix() + state.latent_map.bias
    return a, geom.p @ m


def _evaluate(state: MetaState, geom: _Geometry, z: np.ndarray, targets: np.ndarray, grads: bool = True) -> _Eval:
    kind = state.latent_map.kind
    w = state.latent_map.matrix()
    a, mods = _mods(state, geom, z)
    with np.errstate(all="ignore"):
        y, cache = forward(state.params, state.siren, geom.inputs, mods)
        resid = y - targets
        losses = np.mean(resid * resid, axis=(1, 2))
        if not grads:
            return _Eval(losses)
        scale = 2.0 / (resid.shape[1] * resid.shape[2])
        g_y = scale * resid
        gp, g_mods = backward(state.params, state.siren, cache, g_y)
        g_m = geom.pt @ g_mods
        g_z = lift_adjoint(kind, g_m @ w.T, state.latent_shape)
        g_shared = _shared_dict(gp)
        g_shared["map_w"] = (a.reshape(-1, a.shape[-1]).T @ g_m.reshape(-1, g_m.shape[-1])).reshape(
            state.latent_map.weight.shape
        )
        g_shared["map_b"] = g_m.sum(axis=(0, 1))
    return _Eval(losses, g_z, g_shared, (cache, a, g_m, g_y, scale))


def _hvp(state: MetaState, geom: _Geometry, ctx, u: np.ndarray):
    """Hessian of the summed per-datum losses applied to latent direction ``u``.

    Returns the latent block (per datum) and the shared-parameter block
    (summed over the batch).
    """
    cache, a, g_m, g_y, scale = ctx
    kind = state.latent_map.kind
    w = state.latent_map.matrix()
    a_dot = lift(kind, u)
    mods_dot = geom.p @ (a_dot @ w)
    with np.errstate(all="ignore"):
        dp, g_mods_dot = backward_tangent(state.params, state.siren, cache, g_y, mods_dot, scale)
        g_m_dot = geom.pt @ g_mods_dot
        h_z = lift_adjoint(kind, g_m_dot @ w.T, state.latent_shape)
        h = _shared_dict(dp)
        r = a.shape[-1]
        h["map_w"] = (
            a_dot.reshape(-1, r).T @ g_m.reshape(-1, g_m.shape[-1])
            + a.reshape(-1, r).T @ g_m_dot.reshape(-1, g_m_dot.shape[-1])
        ).reshape(state.latent_map.weight.shape)
        h["map_b"] = g_m_dot.sum(axis=(0, 1))
    return h_z, h


def _shared_dict(gp: FieldParams) -> dict:
    out = {}
    for i, (w, b) in enumerate(zip(gp.weights, gp.biases)):
        out[f"w{i}"] = w
        out[f"b{i}"] = b
    return out


def _all_finite(arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


# -- encoding --------------------------------------------------------------------


def encode_batch(state: MetaState, signals: np.ndarray, inner_steps: int | None = None, check: bool = True):
    """Run the inner loop on a batch. Returns ``(latents, losses)``.

    With ``check`` a non-finite loss raises :class:`DivergenceError`;
    otherwise non-finite losses are returned as-is.
    """
    geom = state.geometry()
    targets = _targets(state, signals, geom)
    k_steps = state.inner_steps if inner_steps is None else inner_steps
    z = np.zeros((len(targets), *state.latent_shape), dtype=state.dtype)
    with np.errstate(all="ignore"):
        for _ in range(k_steps):
            ev = _evaluate(state, geom, z, targets)
            z = z - state.inner_lrs * ev.g_z
        losses = _evaluate(state, geom, z, targets, grads=False).losses
    if check and not np.all(np.isfinite(losses)):
        raise DivergenceError("inner loop diverged (non-finite reconstruction loss)")
    return z, losses


def inner_fit(state: MetaState, signal: np.ndarray, inner_steps: int | None = None):
    """Encode one ``(d, d, out_dim)`` signal. Returns ``(latent, loss)``."""
    z, losses = encode_batch(state, np.asarray(signal)[None], inner_steps)
    return z[0], float(losses[0])


def decode(state: MetaState, z: np.ndarray, d: int | None = None) -> np.ndarray:
    """Field outputs for a batch of latents on the ``d x d`` pixel grid (unclamped)."""
    geom = state.geometry(d)
    z = np.asarray(z, dtype=state.dtype)
    if z.shape[1:] != state.latent_shape:
        raise ValueError(f"latent shape {z.shape[1:]}, expected {state.latent_shape}")
    _, mods = _mods(state, geom, z)
    y, _ = forward(state.params, state.siren, geom.inputs, mods)
    res = geom.coords.resolution
    return y.reshape(len(z), res, res, -1)


def psnr_from_mse(mse, max_value: float = 1.0):
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return 20 * np.log10(max_value) - 10 * np.log10(mse)


# -- outer loop --------------------------------------------------------------------


def meta_gradients(state: MetaState, signals: np.ndarray, first_order: bool = False, inner_steps: int | None = None):
    """Outer loss (mean over the batch) and its gradient w.r.t. all shared arrays.

    Returns ``(per_datum_losses, grads)`` with ``grads`` keyed like
    :meth:`MetaState.shared`.
    """
    geom = state.geometry()
    targets = _targets(state, signals, geom)
    b = len(targets)
    k_steps = state.inner_steps if inner_steps is None else inner_steps
    lrs = state.inner_lrs
    z = np.zeros((b, *state.latent_shape), dtype=state.dtype)
    evals = []
    # non-finite values are left to the caller to detect
    with np.errstate(all="ignore"):
        for _ in range(k_steps):
            ev = _evaluate(state, geom, z, targets)
            evals.append(ev)
            z = z - lrs * ev.g_z
        final = _evaluate(state, geom, z, targets)
        grads = {k: v / b for k, v in final.g_shared.items()}
        adj = final.g_z / b
        g_lrs = np.zeros_like(lrs)
        for ev in reversed(evals):
            g_lrs -= (adj * ev.g_z).sum(axis=0)
            if not first_order:
                h_z, h = _hvp(state, geom, ev.ctx, lrs * adj)
                adj = adj - h_z
                for k, v in h.items():
                    grads[k] = grads[k] - v
    grads["inner_lrs"] = g_lrs
    return final.losses, grads


def outer_step(state: MetaState, signals: np.ndarray, config: MetaConfig):
    """One Adam step on the shared arrays. Returns ``(new_state, metrics)``.

    The input state is not modified. Non-finite losses or gradients raise
    :class:`DivergenceError`.
    """
    if len(signals) == 0:
        raise ValueError("empty batch")
    losses, grads = meta_gradients(state, signals, config.first_order, config.inner_steps)
    if not (np.all(np.isfinite(losses)) and _all_finite(grads.values())):
        raise DivergenceError(f"non-finite outer loss or gradient at step {state.step}")
    shared = state.shared()
    opt = state.opt if state.opt is not None else AdamState.zeros_like(shared)
    t = opt.step + 1
    b1, b2 = config.beta1, config.beta2
    new_shared, new_m, new_v = {}, {}, {}
    lr_t = config.outer_lr * np.sqrt(1 - b2**t) / (1 - b1**t)
    for k, p in shared.items():
        g = grads[k].astype(p.dtype)
        m = b1 * opt.m[k] + (1 - b1) * g
        v = b2 * opt.v[k] + (1 - b2) * g * g
        new_m[k], new_v[k] = m, v
        new_shared[k] = (p - lr_t * m / (np.sqrt(v) + config.eps * np.sqrt(1 - b2**t))).astype(p.dtype)
    new_shared["inner_lrs"] = np.maximum(new_shared["inner_lrs"], 0)
    new_state = state.with_shared(new_shared)
    new_state.opt = AdamState(new_m, new_v, t)
    mse = losses.astype(np.float64)
    metrics = {
        "iteration": t,
        "outer_loss": float(mse.mean()),
        "mean_psnr": float(psnr_from_mse(mse).mean()),
    }
    return new_state, metrics


def meta_train(
    dataset: np.ndarray,
    config: MetaConfig,
    state: MetaState,
    metrics_path=None,
    callback=None,
) -> MetaState:
    """Run ``config.iterations`` outer steps over seeded shuffled mini-batches.

    ``callback(state, metrics)`` is called after every step; returning True
    stops training early. Every ``log_every`` steps, and at the final step, a
    row is appended to the metrics CSV (iteration, outer_loss, mean_psnr) when ``metrics_path`` is set.
    """
    dataset = np.asarray(dataset)
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, len(dataset))
    order = rng.permutation(len(dataset))
    cursor = 0
    rows = []
    for it in range(config.iterations):
        if cursor + bs > len(order):
            order = rng.permutation(len(dataset))
            cursor = 0
        batch = dataset[order[cursor:cursor + bs]]
        cursor += bs
        state, metrics = outer_step(state, batch, config)
        stop = callback is not None and bool(callback(state, metrics))
        last = stop or it + 1 == config.iterations
        if config.log_every and ((it + 1) % config.log_every == 0 or last):
            rows.append(metrics)
            log.info("step %d loss %.3e psnr %.2f", metrics["iteration"], metrics["outer_loss"], metrics["mean_psnr"])
        if stop:
            break
    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows)
    return state


def write_metrics_csv(path, rows, fields=("iteration", "outer_loss", "mean_psnr")) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([repr(row[f]) if isinstance(row[f], float) else row[f] for f in fields])
    with atomic_open(path, "w") as fh:
        fh.write(buf.getvalue())


def build_functaset(state: MetaState, dataset: np.ndarray, labels=None, batch_size: int = 64) -> Functaset:
    """Encode every datum with the frozen shared parameters.

    Data whose inner loop diverges get a zero latent and NaN PSNR.
    """
    dataset = np.asarray(dataset)
    n = len(dataset)
    latents = np.zeros((n, *state.latent_shape), dtype=np.float32)
    psnr = np.zeros(n, dtype=np.float32)
    for start in range(0, n, batch_size):
        z, losses = encode_batch(state, dataset[start:start + batch_size], check=False)
        ok = np.isfinite(losses) & np.all(np.isfinite(z.reshape(len(z), -1)), axis=1)
        z[~ok] = 0
        latents[start:start + len(z)] = z
        psnr[start:start + len(z)] = np.where(ok, psnr_from_mse(losses), np.nan)
    if n and not np.all(np.isfinite(psnr)):
        log.warning("%d of %d encodings diverged", int(np.sum(~np.isfinite(psnr))), n)
    return Functaset(
        latent_shape=state.latent_shape,
        latents=latents,
        interpolation=state.interpolation,
        resolution=state.resolution,
        labels=None if labels is None else np.asarray(labels),
        psnr=psnr,
    )


# -- checkpoints -------------------------------------------------------------------


def save_state(state: MetaState, path) -> None:
    meta = {
        "siren": vars(state.siren),
        "map_kind": state.latent_map.kind,
        "latent_shape": list(state.latent_shape),
        "interpolation": state.interpolation,
        "coord_scheme": state.coord_scheme,
        "resolution": state.resolution,
        "inner_steps": state.inner_steps,
        "step": state.step,
    }
    arrays = {k: v for k, v in state.shared().items()}
    if state.opt is not None:
        arrays.update({f"adam_m/{k}": v for k, v in state.opt.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in state.opt.v.items()})
    with atomic_open(path) as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_state(path) -> MetaState:
    with np.load(path) as data:
        meta = json.loads(data["__meta__"].tobytes().decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    siren = SirenConfig(**meta["siren"])
    n = siren.depth
    shared = {k: v for k, v in arrays.items() if "/" not in k}
    params = FieldParams([shared[f"w{i}"] for i in range(n)], [shared[f"b{i}"] for i in range(n)])
    params.check(siren)
    state = MetaState(
        siren=siren,
        params=params,
        latent_map=LatentMap(meta["map_kind"], shared["map_w"], shared["map_b"]),
        inner_lrs=shared["inner_lrs"],
        latent_shape=tuple(meta["latent_shape"]),
        interpolation=meta["interpolation"],
        coord_scheme=meta["coord_scheme"],
        resolution=meta["resolution"],
        inner_steps=meta["inner_steps"],
    )
    if any(k.startswith("adam_m/") for k in arrays):
        state.opt = AdamState(
            {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
            {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")},
            meta["step"],
        )
    return state
