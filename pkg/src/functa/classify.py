"""Classifiers on functasets: a pre-LN token transformer and a residual MLP."""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._ema import ema_update
from ._io import atomic_open
from .functaset import Functaset

__all__ = [
    "ClassifierConfig",
    "Classifier",
    "smooth_labels",
    "tokenize",
    "TokenTransformer",
    "ResidualMLP",
    "build_model",
    "classify_train",
    "classify_eval",
    "predict_logits",
    "save_classifier",
    "load_classifier",
]


@dataclass(frozen=True)
class ClassifierConfig:
    arch: str = "token_transformer"
    num_classes: int = 10
    width: int = 64
    ffw_width: int = 128
    blocks: int = 2
    heads: int = 4
    dropout: float = 0.0
    label_smoothing: float = 0.1
    weight_decay: float = 0.1
    norm_scale: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    ema_decay: float = 0.9999
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("token_transformer", "residual_mlp"):
            raise ValueError(f"unknown classifier arch {self.arch!r}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label smoothing must be in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.arch == "token_transformer" and self.width % self.heads:
            raise ValueError("heads must divide width")
        if self.num_classes < 1:
            raise ValueError("need at least one class")


def smooth_labels(onehot, l: float, n: int | None = None) -> np.ndarray:
    """``onehot * (1 - l) + l / n`` for one or a batch of one-hot rows."""
    onehot = np.asarray(onehot, dtype=np.float64)
    n = onehot.shape[-1] if n is None else n
    if onehot.shape[-1] != n:
        raise ValueError(f"one-hot width {onehot.shape[-1]} != {n}")
    if not 0 <= l < 1:
        raise ValueError("label smoothing must be in [0, 1)")
    return onehot * (1.0 - l) + l / n


def tokenize(z, norm_scale: float = 1.0) -> np.ndarray:
    """Spatial latent(s) ``(..., s, s, c)`` -> row-major token sequence ``(..., s*s, c)``."""
    z = np.asarray(z)
    if z.ndim < 3:
        raise ValueError("token classifiers need spatial (s, s, c) latents")
    s, s2, c = z.shape[-3:]
    if s != s2:
        raise ValueError(f"non-square latent grid {z.shape[-3:]}")
    return z.reshape(*z.shape[:-3], s * s, c) * norm_scale


class _Block(nn.Module):
    def __init__(self, width, ffw_width, heads):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.ffw = nn.Sequential(nn.Linear(width, ffw_width), nn.GELU(), nn.Linear(ffw_width, width))

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ffw(self.ln2(x))


class TokenTransformer(nn.Module):
    """Pre-LN transformer over latent cells, mean-pooled into a linear head."""

    def __init__(self, seq_len, token_dim, cfg: ClassifierConfig):
        super().__init__()
        self.embed = nn.Linear(token_dim, cfg.width)
        self.pos = nn.Parameter(torch.randn(seq_len, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(_Block(cfg.width, cfg.ffw_width, cfg.heads) for _ in range(cfg.blocks))
        self.ln = nn.LayerNorm(cfg.width)
        self.drop = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(cfg.width, cfg.num_classes)

    def forward(self, tokens):
        x = self.embed(tokens) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.drop(self.ln(x).mean(dim=1)))


class ResidualMLP(nn.Module):
    def __init__(self, in_dim, cfg: ClassifierConfig):
        super().__init__()
        self.inp = nn.Linear(in_dim, cfg.width)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.LayerNorm(cfg.width), nn.Linear(cfg.width, cfg.ffw_width), nn.SiLU(), nn.Linear(cfg.ffw_width, cfg.width))
            for _ in range(cfg.blocks)
        )
        self.drop = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(cfg.width, cfg.num_classes)

    def forward(self, x):
        h = self.inp(x.flatten(1))
        for blk in self.blocks:
            h = h + blk(h)
        return self.head(self.drop(F.silu(h)))


def build_model(cfg: ClassifierConfig, latent_shape) -> nn.Module:
    torch.manual_seed(cfg.seed)
    if cfg.arch == "token_transformer":
        if len(latent_shape) != 3:
            raise ValueError("token_transformer needs spatial latents")
        s, _, c = latent_shape
        return TokenTransformer(s * s, c, cfg)
    return ResidualMLP(int(np.prod(latent_shape)), cfg)


def _inputs(cfg: ClassifierConfig, latents: np.ndarray) -> torch.Tensor:
    x = tokenize(latents, cfg.norm_scale) if cfg.arch == "token_transformer" else latents * cfg.norm_scale
    return torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32)


@dataclass
class Classifier:
    config: ClassifierConfig
    latent_shape: tuple
    model: nn.Module
    ema: nn.Module
    history: list = field(default_factory=list)

    def logits(self, latents, use_ema: bool = True) -> np.ndarray:
        return predict_logits(self.ema if use_ema else self.model, self.config, latents)


def predict_logits(model: nn.Module, cfg: ClassifierConfig, latents, batch_size: int = 512) -> np.ndarray:
    model.eval()
    latents = np.asarray(latents, dtype=np.float32)
    out = []
    with torch.no_grad():
        for start in range(0, len(latents), batch_size):
            out.append(model(_inputs(cfg, latents[start:start + batch_size])).numpy())
    if not out:
        return np.zeros((0, cfg.num_classes), dtype=np.float32)
    return np.concatenate(out)


def classify_train(fs: Functaset, cfg: ClassifierConfig, train_index=None) -> Classifier:
    """Train on ``fs`` (restricted to ``train_index`` if given).

    Cross-entropy against smoothed labels, AdamW, and an EMA shadow of the
    weights updated after every optimizer step.
    """
    if fs.labels is None:
        raise ValueError("functaset has no labels")
    if fs.quant is not None:
        raise ValueError("dequantize the functaset first")
    idx = np.arange(len(fs)) if train_index is None else np.asarray(train_index)
    idx = idx[fs.valid[idx]]
    labels = fs.labels[idx]
    if len(labels) and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        raise ValueError(f"labels outside [0, {cfg.num_classes}) for a {cfg.num_classes}-class config")
    latents = fs.latents[idx].astype(np.float32)
    model = build_model(cfg, fs.latent_shape)
    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    targets = torch.as_tensor(smooth_labels(np.eye(cfg.num_classes)[labels], cfg.label_smoothing), dtype=torch.float32)
    x_all = _inputs(cfg, latents)
    rng = np.random.default_rng(cfg.seed)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(idx))
        model.train()
        for start in range(0, len(order), cfg.batch_size):
            b = torch.as_tensor(order[start:start + cfg.batch_size])
            logits = model(x_all[b])
            loss = F.cross_entropy(logits, targets[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            ema_update(ema, model, cfg.ema_decay, step)
            history.append({"step": step, "epoch": epoch, "loss": float(loss.detach())})
    return Classifier(cfg, tuple(fs.latent_shape), model, ema, history)


def classify_eval(model, fs: Functaset, index=None, use_ema: bool = True) -> float:
    """Top-1 accuracy; ties go to the lowest class index.

    ``model`` is a :class:`Classifier` or any callable mapping a latent batch
    to logits.
    """
    if fs.labels is None:
        raise ValueError("functaset has no labels")
    idx = np.arange(len(fs)) if index is None else np.asarray(index)
    if len(idx) == 0:
        return float("nan")
    latents = fs.latents[idx]
    if isinstance(model, Classifier):
        logits = model.logits(latents, use_ema=use_ema)
    else:
        logits = np.asarray(model(latents))
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == fs.labels[idx]))


def history_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "epoch", "loss"])
    for row in history:
        writer.writerow([row["step"], row["epoch"], repr(row["loss"])])
    return buf.getvalue()


def save_classifier(clf: Classifier, path) -> None:
    blob = {
        "config": asdict(clf.config),
        "latent_shape": list(clf.latent_shape),
        "model": clf.model.state_dict(),
        "ema": clf.ema.state_dict(),
        "history": clf.history,
    }
    with atomic_open(path) as fh:
        torch.save(blob, fh)


def load_classifier(path) -> Classifier:
    blob = torch.load(path, weights_only=False)
    cfg = ClassifierConfig(**blob["config"])
    shape = tuple(blob["latent_shape"])
    model = build_model(cfg, shape)
    ema = build_model(cfg, shape)
    model.load_state_dict(blob["model"])
    ema.load_state_dict(blob["ema"])
    return Classifier(cfg, shape, model, ema, blob["history"])
