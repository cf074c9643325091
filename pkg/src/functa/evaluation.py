"""Reconstruction quality, latent perturbation analyses and memorization audits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_open
from .meta import MetaState, decode

__all__ = [
    "reconstruct",
    "psnr",
    "PerturbReport",
    "perturb_vector",
    "rank_latent_dimensions",
    "perturb_spatial",
    "AuditReport",
    "expected_unique",
    "unique_std",
    "memorization_audit",
    "write_csv",
]


def reconstruct(state: MetaState, z, d: int | None = None, clamp: bool = True) -> np.ndarray:
    """Decode one latent (or a batch) to a ``d x d`` image."""
    z = np.asarray(z)
    single = z.shape == tuple(state.latent_shape)
    img = decode(state, z[None] if single else z, d)
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return img[0] if single else img


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 20 * math.log10(max_value) - 10 * math.log10(mse)


@dataclass
class PerturbReport:
    """Pixel-space effect of shifting one latent dimension.

    ``mae_maps`` / ``rmse_maps`` are ``(len(strengths), d, d)`` per-pixel
    errors (absolute / root-mean-square over channels). ``patch_rmse`` is the
    RMSE within each latent tile averaged over tiles, per strength.
    """

    dim: int
    strengths: np.ndarray
    mae_maps: np.ndarray
    rmse_maps: np.ndarray
    mae: np.ndarray
    rmse: np.ndarray
    patch_rmse: np.ndarray | None = None
    diffs: np.ndarray = field(default=None, repr=False)


def _as_strengths(strength) -> np.ndarray:
    s = np.atleast_1d(np.asarray(strength, dtype=np.float64))
    if np.any(np.diff(s) < 0):
        raise ValueError("strengths must be sorted")
    return s


def _report(dim, strengths, base, perturbed, tile=None) -> PerturbReport:
    diffs = perturbed.astype(np.float64) - base.astype(np.float64)[None]
    mae_maps = np.abs(diffs).mean(axis=-1)
    rmse_maps = np.sqrt((diffs**2).mean(axis=-1))
    patch = None
    if tile is not None:
        k, d = diffs.shape[0], diffs.shape[1]
        t = d // tile
        sq = (diffs**2).reshape(k, t, tile, t, tile, -1).mean(axis=(2, 4, 5))
        patch = np.sqrt(sq).mean(axis=(1, 2))
    return PerturbReport(
        dim=dim,
        strengths=strengths,
        mae_maps=mae_maps,
        rmse_maps=rmse_maps,
        mae=np.abs(diffs).mean(axis=(1, 2, 3)),
        rmse=np.sqrt((diffs**2).mean(axis=(1, 2, 3))),
        patch_rmse=patch,
        diffs=diffs,
    )


def perturb_vector(state: MetaState, z, dim: int, strength, d: int | None = None, clamp: bool = True) -> PerturbReport:
    """Shift flat-latent entry ``dim`` by each strength and measure the change."""
    z = np.asarray(z)
    if z.ndim != 1:
        raise ValueError("perturb_vector expects a flat latent")
    if not 0 <= dim < z.shape[0]:
        raise IndexError(f"latent dimension {dim} out of range for size {z.shape[0]}")
    strengths = _as_strengths(strength)
    batch = np.repeat(z[None], len(strengths), axis=0).astype(np.float64)
    batch[:, dim] += strengths
    base = reconstruct(state, z, d, clamp)
    pert = reconstruct(state, batch, d, clamp)
    return _report(dim, strengths, base, pert)


def rank_latent_dimensions(state: MetaState, z, strength: float, d: int | None = None) -> np.ndarray:
    """Latent dimensions ordered by decreasing image MAE under a fixed shift."""
    z = np.asarray(z)
    batch = np.repeat(z[None], z.shape[0], axis=0).astype(np.float64)
    batch[np.arange(z.shape[0]), np.arange(z.shape[0])] += strength
    base = reconstruct(state, z, d)
    pert = reconstruct(state, batch, d)
    mae = np.abs(pert - base[None]).mean(axis=(1, 2, 3))
    return np.argsort(-mae, kind="stable")


def perturb_spatial(
    state: MetaState, z, feature_dim: int, strength, d: int | None = None, clamp: bool = True
) -> PerturbReport:
    """Add each strength to channel ``feature_dim`` at every cell of a spatial latent."""
    z = np.asarray(z)
    if z.ndim != 3:
        raise ValueError("perturb_spatial expects an (s, s, c) latent")
    if not 0 <= feature_dim < z.shape[2]:
        raise IndexError(f"feature dimension {feature_dim} out of range for c={z.shape[2]}")
    strengths = _as_strengths(strength)
    batch = np.repeat(z[None], len(strengths), axis=0).astype(np.float64)
    batch[..., feature_dim] += strengths[:, None, None]
    base = reconstruct(state, z, d, clamp)
    pert = reconstruct(state, batch, d, clamp)
    res = base.shape[0]
    s = z.shape[0]
    return _report(feature_dim, strengths, base, pert, tile=res // s if res % s == 0 else None)


# -- memorization -----------------------------------------------------------------


def expected_unique(n: int, k: int) -> float:
    """Expected number of distinct items in ``k`` uniform draws from ``n``."""
    return n * (1.0 - (1.0 - 1.0 / n) ** k)


def unique_std(n: int, k: int, method: str = "binomial") -> float:
    """Standard deviation of the distinct count in ``k`` draws from ``n``.

    ``"exact"`` is the occupancy-problem variance, which accounts for the
    negative correlation between items being drawn. ``"binomial"`` treats
    each item's inclusion as independent, ``sqrt(n p (1 - p))``; it is the
    larger, more conservative figure (about 34 for n = k = 5000, against
    about 22 exactly).
    """
    q1 = (1.0 - 1.0 / n) ** k
    if method == "binomial":
        return math.sqrt(n * q1 * (1.0 - q1))
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")
    q2 = (1.0 - 2.0 / n) ** k
    var = n * (n - 1) * q2 + n * q1 - (n * q1) ** 2
    return math.sqrt(max(var, 0.0))


@dataclass
class AuditReport:
    neighbors: np.ndarray
    distances: np.ndarray
    unique_count: int
    expected: float
    std: float
    std_exact: float

    @property
    def z_score(self) -> float:
        """How many standard deviations the distinct count is below expectation."""
        if self.std == 0:
            return 0.0 if self.unique_count == self.expected else math.inf
        return (self.expected - self.unique_count) / self.std


def memorization_audit(samples, trainset, chunk: int = 256) -> AuditReport:
    """Exact nearest training neighbour (pixel-space L2) for every sample.

    The expected distinct count assumes each sample is an i.i.d. uniform draw
    from the training set; ``std`` uses the binomial approximation and
    ``std_exact`` the occupancy variance.
    """
    samples = np.asarray(samples, dtype=np.float64)
    trainset = np.asarray(trainset, dtype=np.float64)
    if len(samples) == 0 or len(trainset) == 0:
        raise ValueError("memorization audit needs non-empty sample and training sets")
    a = samples.reshape(len(samples), -1)
    b = trainset.reshape(len(trainset), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError("samples and training images differ in size")
    b_sq = (b * b).sum(axis=1)
    ids = np.empty(len(a), dtype=np.int64)
    dist = np.empty(len(a))
    for start in range(0, len(a), chunk):
        block = a[start:start + chunk]
        d2 = (block * block).sum(axis=1)[:, None] - 2 * block @ b.T + b_sq[None]
        j = np.argmin(d2, axis=1)
        ids[start:start + chunk] = j
        # exact distance to the chosen neighbour, free of cancellation error
        dist[start:start + chunk] = np.sqrt(((block - b[j]) ** 2).sum(axis=1))
    n, k = len(b), len(a)
    return AuditReport(
        ids,
        dist,
        int(len(np.unique(ids))),
        expected_unique(n, k),
        unique_std(n, k, "binomial"),
        unique_std(n, k, "exact"),
    )


def write_csv(path, header, rows) -> None:
    with atomic_open(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
