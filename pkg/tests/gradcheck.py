"""Central finite-difference checks shared by the unit and acceptance tests."""

import numpy as np

from functa.field import SirenConfig, field_backward
from functa.meta import init_meta_state, meta_gradients


def max_relative_error(analytic, numeric):
    """Largest absolute deviation relative to the largest numeric entry."""
    scale = np.abs(numeric).max()
    if scale == 0:
        return float(np.abs(analytic).max())
    return float(np.abs(analytic - numeric).max() / scale)


def field_gradient_error(cfg, params, mod, x, target, h=1e-4):
    _, grads, g_mod = field_backward(params, cfg, mod, x, target)

    def loss():
        return field_backward(params, cfg, mod, x, target)[0]

    worst = 0.0
    pairs = list(zip(params.weights, grads.weights)) + list(zip(params.biases, grads.biases)) + [(mod, g_mod)]
    for arr, g in pairs:
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss()
            arr[idx] = old - h
            lm = loss()
            arr[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        worst = max(worst, max_relative_error(g, fd))
    return worst


def meta_gradient_errors(state, signals, h=1e-5, first_order=False):
    """Per-array relative error of ``meta_gradients`` against finite differences.

    The reference is a Richardson-extrapolated central difference (error
    O(h^4)); plain central differences at h=1e-5 leave truncation errors
    above 1e-3 on sharp high-frequency configurations.
    """
    _, grads = meta_gradients(state, signals, first_order=first_order)

    def central(arr, idx, step):
        old = arr[idx]
        arr[idx] = old + step
        lp = meta_gradients(state, signals)[0].mean()
        arr[idx] = old - step
        lm = meta_gradients(state, signals)[0].mean()
        arr[idx] = old
        return (lp - lm) / (2 * step)

    errors = {}
    for key, arr in state.shared().items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            fd[idx] = (4 * central(arr, idx, h / 2) - central(arr, idx, h)) / 3
        errors[key] = max_relative_error(grads[key], fd)
    return errors


def random_mini_state(rng, *, width, depth, s, c, d, map_kind=None, interpolation="nearest", inner_steps=3, omega0=None):
    """Float64 meta state with perturbed biases, map bias and inner step sizes."""
    omega0 = float(rng.uniform(2, 30)) if omega0 is None else omega0
    siren = SirenConfig(2, 3, width, depth, omega0)
    shape = (c,) if s == 0 else (s, s, c)
    state = init_meta_state(
        siren,
        shape,
        map_kind=map_kind,
        interpolation=interpolation,
        coord_scheme="global_unit",
        resolution=d,
        inner_steps=inner_steps,
        inner_lr=0.05,
        seed=int(rng.integers(1 << 30)),
        dtype=np.float64,
    )
    for b in state.params.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    state.latent_map.bias[:] = rng.normal(0, 0.05, state.latent_map.bias.shape)
    state.inner_lrs[:] = rng.uniform(0.01, 0.2, state.inner_lrs.shape)
    return state
