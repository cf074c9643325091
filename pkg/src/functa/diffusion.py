"""Discrete-time DDPM on normalized functa latents.

Timesteps run over ``1..T``; index 0 of every schedule table is the clean
signal (``beta_0 = 0``, ``alpha_bar_0 = 1``). The denoiser predicts the
injected noise. Conditional models reserve one extra class id (``num_classes``)
as the dummy label that trains the unconditional branch used by
classifier-free guidance.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ._ema import ema_update
from ._io import atomic_open
from .evaluation import memorization_audit
from .functaset import Functaset, NormStats, compute_norm_stats, denormalize, normalize

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "q_sample",
    "TimestepDist",
    "sample_timesteps",
    "DenoiserConfig",
    "DiffusionConfig",
    "ResidualDenoiser",
    "DiffusionModel",
    "ddpm_train_step",
    "guided_noise",
    "ddpm_sample",
    "diffuse_train",
    "sample_latents",
    "GenerationReport",
    "evaluate_generation",
    "save_diffusion",
    "load_diffusion",
]


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


def make_schedule(kind: str = "cosine", T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Tabulate ``beta_t`` and ``alpha_bar_t`` for ``t = 0..T``.

    ``linear`` spans 1e-4..0.02 at T=1000 and is rescaled by ``1000 / T``
    otherwise; ``cosine`` uses ``alpha_bar(t) = f(t) / f(0)`` with
    ``f(t) = cos^2(((t / T) + s) / (1 + s) * pi / 2)`` and betas clipped at
    ``max_beta``.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T, dtype=np.float64) if T > 1 else np.array([scale * 1e-4])
        betas = np.minimum(betas, max_beta)
    elif kind == "cosine":
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.minimum(1 - ab[1:] / ab[:-1], max_beta)
    else:
        raise ValueError(f"unknown schedule {kind!r}")
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    return NoiseSchedule(kind, int(T), betas, alphas, np.cumprod(alphas))


def q_sample(z0, t, eps, schedule: NoiseSchedule):
    """``sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`` with per-row ``t``."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ValueError(f"timestep outside [0, {schedule.T}]")
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
    return np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps


@dataclass(frozen=True)
class TimestepDist:
    """Training density over ``t = 1..T`` falling linearly from ``ratio`` to 1."""

    T: int
    ratio: float = 1.0

    def __post_init__(self):
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @property
    def probs(self) -> np.ndarray:
        if self.T == 1:
            return np.ones(1)
        w = self.ratio + (1.0 - self.ratio) * np.arange(self.T) / (self.T - 1)
        return w / w.sum()


def sample_timesteps(dist: TimestepDist, count: int, seed=None) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.choice(dist.T, size=count, p=dist.probs) + 1


# -- denoiser ------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    width: int = 256
    blocks: int = 3
    time_dim: int = 64
    class_dim: int = 64
    num_classes: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.width, self.blocks, self.time_dim, self.class_dim) < 1 or self.num_classes < 0:
            raise ValueError("denoiser dimensions must be positive")


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    schedule: str = "cosine"
    timestep_ratio: float = 3.0
    dummy_prop: float = 0.2
    lr: float = 1e-4
    batch_size: int = 256
    iterations: int = 10000
    norm_kind: str = "vector"
    gamma: float = 2.5
    ema_decay: float = 0.9999
    seed: int = 0


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class ResidualDenoiser(nn.Module):
    """Residual MLP predicting the noise in a flattened latent."""

    def __init__(self, dim: int, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.inp = nn.Linear(dim, w)
        self.time = nn.Sequential(nn.Linear(cfg.time_dim, w), nn.SiLU(), nn.Linear(w, w))
        self.label = nn.Sequential(nn.Embedding(cfg.num_classes + 1, cfg.class_dim), nn.Linear(cfg.class_dim, w))
        self.norms = nn.ModuleList(nn.LayerNorm(w) for _ in range(cfg.blocks))
        self.cond = nn.ModuleList(nn.Linear(w, w) for _ in range(cfg.blocks))
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(w, 2 * w), nn.SiLU(), nn.Dropout(cfg.dropout), nn.Linear(2 * w, w))
            for _ in range(cfg.blocks)
        )
        self.out = nn.Sequential(nn.LayerNorm(w), nn.SiLU(), nn.Linear(w, dim))
        nn.init.zeros_(self.out[-1].weight)
        nn.init.zeros_(self.out[-1].bias)

    @property
    def dummy_label(self) -> int:
        return self.cfg.num_classes

    def forward(self, x, t, y):
        emb = self.time(timestep_embedding(t, self.cfg.time_dim)) + self.label(y)
        emb = torch.nn.functional.silu(emb)
        h = self.inp(x)
        for norm, cond, mlp in zip(self.norms, self.cond, self.mlps):
            h = h + mlp(norm(h) + cond(emb))
        return self.out(h)


def ddpm_train_step(
    model,
    optimizer,
    z_tilde,
    labels,
    schedule: NoiseSchedule,
    dist: TimestepDist,
    dummy_prop: float,
    rng: np.random.Generator,
    dummy_label: int | None = None,
) -> float:
    """One optimizer step on the simplified (noise-MSE) DDPM loss.

    ``labels`` may be None for unconditional training. Each label is swapped
    for the dummy class with probability ``dummy_prop``.
    """
    z_tilde = np.asarray(z_tilde, dtype=np.float64).reshape(len(z_tilde), -1)
    b = len(z_tilde)
    dummy = model.dummy_label if dummy_label is None else dummy_label
    t = sample_timesteps(dist, b, rng)
    eps = rng.standard_normal(z_tilde.shape)
    if labels is None:
        y = np.full(b, dummy)
    else:
        y = np.where(rng.random(b) < dummy_prop, dummy, np.asarray(labels))
    zt = q_sample(z_tilde, t, eps, schedule)
    pred = model(
        torch.as_tensor(zt, dtype=torch.float32),
        torch.as_tensor(t, dtype=torch.long),
        torch.as_tensor(y, dtype=torch.long),
    )
    loss = torch.mean((torch.as_tensor(eps, dtype=torch.float32) - pred) ** 2)
    if not torch.isfinite(loss):
        from .meta import DivergenceError

        raise DivergenceError("non-finite diffusion loss")
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def guided_noise(model, x, t: int, label, guidance: float, dummy_label: int):
    """Return ``(eps_hat, eps_uncond, eps_cond)`` for a batch at timestep ``t``.

    ``eps_hat = (1 - g) * eps_uncond + g * eps_cond``, the usual
    ``eps_u + g (eps_c - eps_u)`` written so that g = 0 and g = 1 give the
    two branches bit-exactly. With ``label=None`` only the unconditional
    branch is evaluated.
    """
    n = x.shape[0]
    tt = torch.full((n,), t, dtype=torch.long)
    xt = torch.as_tensor(x, dtype=torch.float32) if not torch.is_tensor(x) else x
    with torch.no_grad():
        if label is None:
            eps_u = model(xt, tt, torch.full((n,), dummy_label, dtype=torch.long))
            eps_u = eps_u.numpy() if torch.is_tensor(eps_u) else np.asarray(eps_u)
            return eps_u.astype(np.float64), eps_u.astype(np.float64), None
        y = torch.as_tensor(np.broadcast_to(np.asarray(label), (n,)).copy(), dtype=torch.long)
        out = model(
            torch.cat([xt, xt]),
            torch.cat([tt, tt]),
            torch.cat([torch.full((n,), dummy_label, dtype=torch.long), y]),
        )
    out = (out.numpy() if torch.is_tensor(out) else np.asarray(out)).astype(np.float64)
    eps_u, eps_c = out[:n], out[n:]
    return (1.0 - guidance) * eps_u + guidance * eps_c, eps_u, eps_c


def ddpm_sample(
    model,
    schedule: NoiseSchedule,
    n: int,
    dim: int,
    label=None,
    guidance: float = 1.0,
    seed: int = 0,
    x_T=None,
    dummy_label: int | None = None,
    model_dtype=torch.float32,
    clip_denoised: float | None = None,
) -> np.ndarray:
    """Ancestral sampling from ``t = T`` to 0 with the ``beta_t`` posterior variance.

    With ``clip_denoised`` set, each step forms the clean-sample estimate
    ``x0_hat``, clips it to ``[-clip_denoised, clip_denoised]`` and takes the
    posterior mean from it. This bounds the error amplification of the
    near-singular last steps of a cosine schedule (``beta`` close to 1).
    """
    if clip_denoised is not None and not clip_denoised > 0:
        raise ValueError("clip_denoised must be positive")
    rng = np.random.default_rng(seed)
    dummy = model.dummy_label if dummy_label is None else dummy_label
    x = rng.standard_normal((n, dim)) if x_T is None else np.array(x_T, dtype=np.float64)
    for t in range(schedule.T, 0, -1):
        eps, _, _ = guided_noise(model, torch.as_tensor(x, dtype=model_dtype), t, label, guidance, dummy)
        beta, alpha, ab = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
        if clip_denoised is None:
            x = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
        else:
            ab_prev = schedule.alpha_bars[t - 1]
            x0 = np.clip((x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -clip_denoised, clip_denoised)
            x = (np.sqrt(ab_prev) * beta * x0 + np.sqrt(alpha) * (1.0 - ab_prev) * x) / (1.0 - ab)
        if t > 1:
            x = x + np.sqrt(beta) * rng.standard_normal(x.shape)
    return x


# -- end-to-end training and sampling ------------------------------------------------


@dataclass
class DiffusionModel:
    denoiser_config: DenoiserConfig
    config: DiffusionConfig
    latent_shape: tuple
    norm: NormStats
    model: ResidualDenoiser
    history: list = field(default_factory=list)
    interpolation: str = "nearest"
    resolution: int = 0

    @property
    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.config.schedule, self.config.T)


def diffuse_train(fs: Functaset, denoiser_cfg: DenoiserConfig, cfg: DiffusionConfig, callback=None) -> DiffusionModel:
    """Fit a denoiser to ``fs``, normalizing with its stored stats or fresh ones.

    The returned model holds the EMA weights when ``cfg.ema_decay > 0``.
    """
    if fs.quant is not None:
        raise ValueError("dequantize the functaset first")
    valid = fs.subset(fs.valid)
    norm = valid.norm if valid.norm is not None else compute_norm_stats(valid, cfg.norm_kind, cfg.gamma)
    data = normalize(valid.latents, norm).reshape(len(valid), -1).astype(np.float64)
    labels = valid.labels if denoiser_cfg.num_classes > 0 else None
    if labels is not None and (labels.min() < 0 or labels.max() >= denoiser_cfg.num_classes):
        raise ValueError("labels outside the configured number of classes")
    torch.manual_seed(cfg.seed)
    model = ResidualDenoiser(data.shape[1], denoiser_cfg)
    ema = copy.deepcopy(model).requires_grad_(False) if cfg.ema_decay > 0 else model
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    schedule = make_schedule(cfg.schedule, cfg.T)
    dist = TimestepDist(cfg.T, cfg.timestep_ratio)
    rng = np.random.default_rng(cfg.seed)
    history = []
    model.train()
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        loss = ddpm_train_step(
            model, opt, data[idx], None if labels is None else labels[idx], schedule, dist, cfg.dummy_prop, rng
        )
        if ema is not model:
            ema_update(ema, model, cfg.ema_decay, it + 1)
        history.append({"step": it + 1, "loss": loss})
        if callback is not None and callback(it + 1, loss):
            break
    ema.eval()
    return DiffusionModel(denoiser_cfg, cfg, tuple(fs.latent_shape), norm, ema, history, fs.interpolation, fs.resolution)


def sample_latents(
    dm: DiffusionModel, n: int, label=None, guidance: float = 1.0, seed: int = 0, clip_denoised: float | None = None
) -> np.ndarray:
    """Draw ``n`` latents (denormalized, in the functaset's latent shape)."""
    dm.model.eval()
    dim = int(np.prod(dm.latent_shape))
    x = ddpm_sample(dm.model, dm.schedule, n, dim, label, guidance, seed, clip_denoised=clip_denoised)
    return denormalize(x.reshape(n, *dm.latent_shape), dm.norm)


@dataclass
class GenerationReport:
    mean_shift: np.ndarray
    mean_distance: float
    cov_trace_sample: float
    cov_trace_reference: float
    cov_rel_frobenius: float
    audit: object = None

    @property
    def cov_trace_ratio(self) -> float:
        return self.cov_trace_sample / self.cov_trace_reference


def evaluate_generation(samples, reference, sample_images=None, train_images=None) -> GenerationReport:
    """Compare first and second moments of sampled vs reference latents.

    When decoded ``sample_images`` and ``train_images`` are given, a pixel-space
    memorization audit is attached.
    """
    if isinstance(reference, Functaset):
        reference = reference.latents
    a = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    b = np.asarray(reference, dtype=np.float64).reshape(len(reference), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("need non-empty sample and reference sets")
    shift = a.mean(axis=0) - b.mean(axis=0)
    ca = np.atleast_2d(np.cov(a, rowvar=False, bias=True))
    cb = np.atleast_2d(np.cov(b, rowvar=False, bias=True))
    denom = np.linalg.norm(cb)
    audit = None
    if sample_images is not None and train_images is not None:
        audit = memorization_audit(sample_images, train_images)
    return GenerationReport(
        mean_shift=shift,
        mean_distance=float(np.linalg.norm(shift)),
        cov_trace_sample=float(np.trace(ca)),
        cov_trace_reference=float(np.trace(cb)),
        cov_rel_frobenius=float(np.linalg.norm(ca - cb) / denom) if denom > 0 else float(np.linalg.norm(ca)),
        audit=audit,
    )


def save_diffusion(dm: DiffusionModel, path) -> None:
    blob = {
        "denoiser_config": asdict(dm.denoiser_config),
        "config": asdict(dm.config),
        "latent_shape": list(dm.latent_shape),
        "norm": {"kind": dm.norm.kind, "mean": dm.norm.mean, "std": dm.norm.std, "gamma": dm.norm.gamma},
        "model": dm.model.state_dict(),
        "history": dm.history,
        "interpolation": dm.interpolation,
        "resolution": dm.resolution,
    }
    with atomic_open(path) as fh:
        torch.save(blob, fh)


def load_diffusion(path) -> DiffusionModel:
    blob = torch.load(path, weights_only=False)
    dcfg = DenoiserConfig(**blob["denoiser_config"])
    cfg = DiffusionConfig(**blob["config"])
    shape = tuple(blob["latent_shape"])
    model = ResidualDenoiser(int(np.prod(shape)), dcfg)
    model.load_state_dict(blob["model"])
    model.eval()
    return DiffusionModel(
        dcfg, cfg, shape, NormStats(**blob["norm"]), model, blob["history"], blob["interpolation"], blob["resolution"]
    )
