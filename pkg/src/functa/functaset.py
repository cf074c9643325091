"""Functasets: storage, normalization and uniform quantization of latents.

On-disk layout (little-endian)::

    "SFTA" | version u32 | rank u8 | dims u32*rank | interpolation u8
    | resolution u32 | count u64 | norm kind u8 | gamma f32 | mean f32* | std f32*
    | flags u8 | [bits u8 | min f32*D | max f32*D]   (if quantized)
    | latents f32*N*D  (u8*N*D if quantized)
    | [labels u16*N]   (flag bit 0)
    | [psnr f32*N]     (flag bit 2)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ._io import atomic_open

__all__ = [
    "Functaset",
    "NormStats",
    "QuantSpec",
    "FunctasetFormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedFileError",
    "ZeroVarianceError",
    "compute_norm_stats",
    "normalize",
    "denormalize",
    "quantize",
    "dequantize",
    "save",
    "load",
]

MAGIC = b"SFTA"
VERSION = 1
INTERP_CODES = {"nearest": 0, "bilinear": 1, "none": 2}
NORM_CODES = {None: 0, "scalar": 1, "vector": 2, "array": 3}
FLAG_LABELS = 1
FLAG_QUANTIZED = 2
FLAG_PSNR = 4


class FunctasetFormatError(ValueError):
    """A functaset file could not be parsed."""


class BadMagicError(FunctasetFormatError):
    pass


class VersionMismatchError(FunctasetFormatError):
    pass


class TruncatedFileError(FunctasetFormatError):
    pass


class ZeroVarianceError(ValueError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"zero variance in latent dimension {index}")


def _stats_shape(kind: str, latent_shape) -> tuple:
    if kind == "scalar":
        return (1,)
    if kind == "vector":
        return (latent_shape[-1],)
    if kind == "array":
        return tuple(latent_shape)
    raise ValueError(f"unknown normalization kind {kind!r}")


@dataclass
class NormStats:
    kind: str
    mean: np.ndarray
    std: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("scalar", "vector", "array"):
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        self.gamma = float(np.float32(self.gamma))
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std shapes differ")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if np.any(self.std <= 0):
            raise ValueError("std entries must be positive")


@dataclass
class QuantSpec:
    bits: int
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if not 1 <= int(self.bits) <= 8:
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")
        self.bits = int(self.bits)
        self.lo = np.asarray(self.lo, dtype=np.float32)
        self.hi = np.asarray(self.hi, dtype=np.float32)
        if np.any(self.lo > self.hi):
            raise ValueError("quantization range has min > max")

    @property
    def levels(self) -> int:
        return 1 << self.bits


@dataclass
class Functaset:
    """Latents of ``N`` encoded signals plus the metadata needed to use them.

    ``latents`` is ``(N, *latent_shape)`` float32, or uint8 bin codes when
    ``quant`` is set. A NaN entry in ``psnr`` marks a datum whose encoding
    diverged (its latent is zero-filled).
    """

    latent_shape: tuple
    latents: np.ndarray
    interpolation: str = "nearest"
    resolution: int = 0
    labels: np.ndarray | None = None
    psnr: np.ndarray | None = None
    norm: NormStats | None = None
    quant: QuantSpec | None = None
    version: int = field(default=VERSION)

    def __post_init__(self):
        self.latent_shape = tuple(int(d) for d in self.latent_shape)
        if len(self.latent_shape) not in (1, 3):
            raise ValueError(f"latent shape must be (D,) or (s, s, c), got {self.latent_shape}")
        if len(self.latent_shape) == 3 and self.latent_shape[0] != self.latent_shape[1]:
            raise ValueError(f"spatial latents must be square, got {self.latent_shape}")
        if self.interpolation not in INTERP_CODES:
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        dtype = np.uint8 if self.quant is not None else np.float32
        self.latents = np.asarray(self.latents, dtype=dtype).reshape(-1, *self.latent_shape)
        n = len(self.latents)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError(f"{len(self.labels)} labels for {n} latents")
        if self.psnr is not None:
            self.psnr = np.asarray(self.psnr, dtype=np.float32)
            if self.psnr.shape != (n,):
                raise ValueError(f"{len(self.psnr)} psnr values for {n} latents")
        if self.norm is not None and self.norm.mean.shape != _stats_shape(self.norm.kind, self.latent_shape):
            raise ValueError("normalization stats do not match the latent shape")

    def __len__(self) -> int:
        return len(self.latents)

    @property
    def valid(self) -> np.ndarray:
        if self.psnr is None:
            return np.ones(len(self), dtype=bool)
        return np.isfinite(self.psnr)

    def subset(self, index) -> "Functaset":
        return replace(
            self,
            latents=self.latents[index],
            labels=None if self.labels is None else self.labels[index],
            psnr=None if self.psnr is None else self.psnr[index],
        )


def compute_norm_stats(fs: Functaset, kind: str = "vector", gamma: float = 1.0) -> NormStats:
    if fs.quant is not None:
        raise ValueError("dequantize before computing normalization stats")
    if len(fs) < 2:
        raise ValueError("need at least two latents to compute normalization stats")
    z = fs.latents.astype(np.float64)
    if kind == "scalar":
        axes = tuple(range(z.ndim))
    elif kind == "vector":
        axes = tuple(range(z.ndim - 1))
    elif kind == "array":
        axes = (0,)
    else:
        raise ValueError(f"unknown normalization kind {kind!r}")
    mean = z.mean(axis=axes)
    std = z.std(axis=axes)
    mean, std = np.atleast_1d(mean), np.atleast_1d(std)
    bad = np.argwhere(~(std.astype(np.float32) > 0))
    if len(bad):
        index = tuple(int(i) for i in bad[0])
        raise ZeroVarianceError(index[0] if len(index) == 1 else index)
    return NormStats(kind, mean, std, gamma)


def _check_norm_shape(z: np.ndarray, stats: NormStats):
    k = stats.mean.ndim
    if stats.kind != "scalar" and z.shape[-k:] != stats.mean.shape:
        raise ValueError(f"latent shape {z.shape} incompatible with {stats.kind} stats {stats.mean.shape}")


def normalize(z, stats: NormStats) -> np.ndarray:
    """``(z - mean) / (gamma * std)`` elementwise; works on one latent or a batch."""
    z = np.asarray(z)
    _check_norm_shape(z, stats)
    dt = np.result_type(z.dtype, np.float32)
    return (z - stats.mean.astype(dt)) / (dt.type(stats.gamma) * stats.std.astype(dt))


def denormalize(z_tilde, stats: NormStats) -> np.ndarray:
    z_tilde = np.asarray(z_tilde)
    _check_norm_shape(z_tilde, stats)
    dt = np.result_type(z_tilde.dtype, np.float32)
    return z_tilde * (dt.type(stats.gamma) * stats.std.astype(dt)) + stats.mean.astype(dt)


def quantize(fs: Functaset, bits: int, spec: QuantSpec | None = None):
    """Bin every latent dimension into ``2**bits`` uniform bins.

    The range per dimension comes from ``spec`` when given (e.g. the training
    split's), otherwise from ``fs`` itself. Values outside it clamp.
    """
    if fs.quant is not None:
        raise ValueError("functaset is already quantized")
    if spec is None:
        if not 1 <= bits <= 8:
            raise ValueError(f"bits must be in [1, 8], got {bits}")
        if len(fs) == 0:
            raise ValueError("cannot derive a quantization range from an empty functaset")
        spec = QuantSpec(bits, fs.latents.min(axis=0), fs.latents.max(axis=0))
    elif spec.bits != bits:
        raise ValueError(f"spec has {spec.bits} bits, asked for {bits}")
    lo = spec.lo.astype(np.float64)
    width = (spec.hi.astype(np.float64) - lo) / spec.levels
    safe = np.where(width > 0, width, 1.0)
    codes = np.floor((fs.latents.astype(np.float64) - lo) / safe)
    codes = np.clip(codes, 0, spec.levels - 1)
    codes = np.where(width > 0, codes, 0).astype(np.uint8)
    return replace(fs, latents=codes, quant=spec), spec


def dequantize(q: Functaset, spec: QuantSpec | None = None) -> Functaset:
    """Replace bin codes by bin centres."""
    spec = spec if spec is not None else q.quant
    if spec is None:
        raise ValueError("functaset is not quantized")
    lo = spec.lo.astype(np.float64)
    width = (spec.hi.astype(np.float64) - lo) / spec.levels
    values = lo + (q.latents.astype(np.float64) + 0.5) * width
    return replace(q, latents=values.astype(np.float32), quant=None)


# -- file format -------------------------------------------------------------


def save(fs: Functaset, path) -> None:
    out = [MAGIC, struct.pack("<IB", VERSION, len(fs.latent_shape))]
    out.append(struct.pack(f"<{len(fs.latent_shape)}I", *fs.latent_shape))
    out.append(struct.pack("<BIQ", INTERP_CODES[fs.interpolation], fs.resolution, len(fs)))
    norm = fs.norm
    out.append(struct.pack("<Bf", NORM_CODES[norm.kind if norm else None], norm.gamma if norm else 1.0))
    if norm is not None:
        out.append(norm.mean.astype("<f4").tobytes())
        out.append(norm.std.astype("<f4").tobytes())
    flags = (
        (FLAG_LABELS if fs.labels is not None else 0)
        | (FLAG_QUANTIZED if fs.quant is not None else 0)
        | (FLAG_PSNR if fs.psnr is not None else 0)
    )
    out.append(struct.pack("<B", flags))
    if fs.quant is not None:
        out.append(struct.pack("<B", fs.quant.bits))
        out.append(fs.quant.lo.astype("<f4").tobytes())
        out.append(fs.quant.hi.astype("<f4").tobytes())
        out.append(fs.latents.astype(np.uint8).tobytes())
    else:
        out.append(fs.latents.astype("<f4").tobytes())
    if fs.labels is not None:
        if len(fs.labels) and (fs.labels.min() < 0 or fs.labels.max() > 0xFFFF):
            raise ValueError("labels must fit in u16")
        out.append(fs.labels.astype("<u2").tobytes())
    if fs.psnr is not None:
        out.append(fs.psnr.astype("<f4").tobytes())
    with atomic_open(path) as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int, shape) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def load(path) -> Functaset:
    with open(path, "rb") as fh:
        buf = fh.read()
    return loads(buf)


def loads(buf: bytes) -> Functaset:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    r.take(4)
    version, rank = r.unpack("<IB")
    if version != VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {VERSION}")
    if rank not in (1, 3):
        raise FunctasetFormatError(f"latent rank {rank} not in (1, 3)")
    shape = r.unpack(f"<{rank}I")
    if rank == 3 and shape[0] != shape[1]:
        raise FunctasetFormatError(f"non-square spatial latent {shape}")
    interp_code, resolution, count = r.unpack("<BIQ")
    interps = {v: k for k, v in INTERP_CODES.items()}
    if interp_code not in interps:
        raise FunctasetFormatError(f"unknown interpolation code {interp_code}")
    norm_code, gamma = r.unpack("<Bf")
    kinds = {v: k for k, v in NORM_CODES.items()}
    if norm_code not in kinds:
        raise FunctasetFormatError(f"unknown normalization code {norm_code}")
    norm = None
    if kinds[norm_code] is not None:
        kind = kinds[norm_code]
        sshape = _stats_shape(kind, shape)
        size = int(np.prod(sshape))
        mean = r.array("<f4", size, sshape)
        std = r.array("<f4", size, sshape)
        try:
            norm = NormStats(kind, mean, std, gamma)
        except ValueError as exc:
            raise FunctasetFormatError(f"invalid normalization block: {exc}") from None
    (flags,) = r.unpack("<B")
    if flags & ~(FLAG_LABELS | FLAG_QUANTIZED | FLAG_PSNR):
        raise FunctasetFormatError(f"unknown flag bits {flags:#x}")
    dim = int(np.prod(shape))
    quant = None
    if flags & FLAG_QUANTIZED:
        (bits,) = r.unpack("<B")
        lo = r.array("<f4", dim, shape)
        hi = r.array("<f4", dim, shape)
        try:
            quant = QuantSpec(bits, lo, hi)
        except ValueError as exc:
            raise FunctasetFormatError(f"invalid quantization block: {exc}") from None
        latents = r.array("u1", count * dim, (count, *shape))
        if np.any(latents >= quant.levels):
            raise FunctasetFormatError("bin code exceeds the number of levels")
    else:
        latents = r.array("<f4", count * dim, (count, *shape))
    labels = r.array("<u2", count, (count,)) if flags & FLAG_LABELS else None
    psnr = r.array("<f4", count, (count,)) if flags & FLAG_PSNR else None
    if r.pos != len(buf):
        raise FunctasetFormatError(f"{len(buf) - r.pos} trailing bytes")
    return Functaset(
        latent_shape=shape,
        latents=latents,
        interpolation=interps[interp_code],
        resolution=resolution,
        labels=labels,
        psnr=psnr,
        norm=norm,
        quant=quant,
    )
