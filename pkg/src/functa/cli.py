"""``functa`` command line: one subcommand per pipeline stage.

Hyperparameters and input paths live in an INI config (``--config``) with
``--set section.key=value`` overrides; the per-command flags below are
shorthands for such overrides. Every run writes its outputs plus a resolved
config snapshot (``<command>.ini``) into ``run.out_dir``.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from ._io import atomic_open
from .config import ConfigError, RunConfig, parse_tuple

log = logging.getLogger("functa")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_DIVERGED = 5
EXIT_OUTPUT_EXISTS = 6


class MissingArtifactError(FileNotFoundError):
    pass


class OutputExistsError(FileExistsError):
    pass


# per-command flag -> config key it overrides
FLAGS = {
    "meta-train": {
        "data-dir": "meta.data_dir",
        "labels": "meta.labels",
        "synthetic": "meta.synthetic",
        "iterations": "meta.iterations",
    },
    "encode": {
        "checkpoint": "encode.checkpoint",
        "data-dir": "encode.data_dir",
        "labels": "encode.labels",
        "synthetic": "encode.synthetic",
    },
    "decode": {"checkpoint": "eval.checkpoint", "functaset": "eval.functaset", "count": "eval.count"},
    "psnr": {"a": "eval.a", "b": "eval.b"},
    "quantize": {"functaset": "quantize.functaset", "bits": "quantize.bits"},
    "perturb": {
        "checkpoint": "eval.checkpoint",
        "functaset": "eval.functaset",
        "index": "eval.index",
        "dim": "eval.dim",
        "strengths": "eval.strengths",
    },
    "classify": {"functaset": "classify.functaset", "arch": "classify.arch", "epochs": "classify.epochs"},
    "diffuse-train": {"functaset": "diffuse.functaset", "iterations": "diffuse.iterations"},
    "sample": {
        "checkpoint": "diffuse.checkpoint",
        "meta-checkpoint": "eval.checkpoint",
        "num-samples": "diffuse.num_samples",
        "label": "diffuse.label",
        "guidance": "diffuse.guidance",
    },
    "audit": {"functaset": "eval.functaset", "trainset": "eval.trainset", "checkpoint": "eval.checkpoint"},
}


# -- helpers ---------------------------------------------------------------------


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"{what} {p} does not exist")
    return p


class _Run:
    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg["run"]["out_dir"])
        self.inputs: set[Path] = set()

    def input(self, path: str, what: str) -> Path:
        p = _require(path, what)
        self.inputs.add(p.resolve())
        return p

    def output(self, name: str) -> Path:
        p = self.out / name
        if p.resolve() in self.inputs:
            raise OutputExistsError(f"refusing to overwrite input {p}")
        if p.exists() and not self.cfg["run"]["overwrite"]:
            raise OutputExistsError(f"{p} exists (set run.overwrite=true to replace it)")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def _dataset(run: _Run, section: str):
    from .data import load_image_dir, synthetic_images

    sec = run.cfg[section]
    if sec["synthetic"] > 0:
        d = run.cfg["meta"]["resolution"]
        return synthetic_images(sec["synthetic"], d, seed=sec["synthetic_seed"]), None
    directory = run.input(sec["data_dir"], "image directory")
    labels = run.input(sec["labels"], "labels CSV") if sec["labels"] else None
    images, _, lab = load_image_dir(directory, labels)
    return images, lab


def _load_fs(run: _Run, path: str, what: str = "functaset"):
    from .functaset import dequantize, load

    fs = load(run.input(path, what))
    return dequantize(fs) if fs.quant is not None else fs


def _load_state(run: _Run, path: str):
    from .meta import load_state

    return load_state(run.input(path, "meta checkpoint"))


def _strength_list(text: str) -> np.ndarray:
    return np.array(parse_tuple(text, float))


# -- subcommands -----------------------------------------------------------------


def cmd_meta_train(run: _Run):
    from .field import SirenConfig
    from .meta import MetaConfig, init_meta_state, meta_train, save_state

    m = run.cfg["meta"]
    seed = run.cfg["run"]["seed"]
    images, _ = _dataset(run, "meta")
    ckpt = run.output("checkpoint.npz")
    metrics = run.output("meta_metrics.csv")
    siren = SirenConfig(2, images.shape[-1], m["width"], m["depth"], m["omega0"])
    state = init_meta_state(
        siren,
        parse_tuple(m["latent_shape"]),
        map_kind=m["map_kind"] or None,
        interpolation=m["interpolation"],
        coord_scheme=m["coord_scheme"],
        resolution=images.shape[1],
        inner_steps=m["inner_steps"],
        inner_lr=m["inner_lr"],
        seed=seed,
    )
    config = MetaConfig(
        inner_steps=m["inner_steps"],
        outer_lr=m["outer_lr"],
        batch_size=m["batch_size"],
        iterations=m["iterations"],
        first_order=m["first_order"],
        seed=seed,
        log_every=m["log_every"],
    )
    target = m["target_psnr"]
    stop = (lambda _s, metrics: metrics["mean_psnr"] >= target) if target > 0 else None
    state = meta_train(images, config, state, metrics_path=metrics, callback=stop)
    save_state(state, ckpt)
    print(f"trained {state.step} steps -> {ckpt}")


def cmd_encode(run: _Run):
    from .evaluation import write_csv
    from .functaset import compute_norm_stats, save
    from .meta import build_functaset

    e = run.cfg["encode"]
    state = _load_state(run, e["checkpoint"])
    images, labels = _dataset(run, "encode")
    out = run.output("functaset.fset")
    table = run.output("encode_psnr.csv")
    fs = build_functaset(state, images, labels, batch_size=e["batch_size"])
    kind = run.cfg["normalize"]["kind"]
    if kind != "none":
        fs.norm = compute_norm_stats(fs.subset(fs.valid), kind, run.cfg["normalize"]["gamma"])
    save(fs, out)
    write_csv(table, ["index", "psnr"], [[i, repr(float(p))] for i, p in enumerate(fs.psnr)])
    print(f"encoded {len(fs)} signals, mean PSNR {np.nanmean(fs.psnr):.2f} dB -> {out}")


def cmd_decode(run: _Run):
    from .data import save_png
    from .evaluation import reconstruct

    ev = run.cfg["eval"]
    state = _load_state(run, ev["checkpoint"])
    fs = _load_fs(run, ev["functaset"])
    n = len(fs) if ev["count"] <= 0 else min(ev["count"], len(fs))
    d = ev["resolution"] or None
    images = reconstruct(state, fs.latents[:n], d, clamp=True)
    for i, img in enumerate(images):
        save_png(run.output(f"decoded/{i:05d}.png"), img)
    print(f"decoded {n} images -> {run.out / 'decoded'}")


def cmd_psnr(run: _Run):
    from .data import load_png
    from .evaluation import psnr

    ev = run.cfg["eval"]
    value = psnr(load_png(run.input(ev["a"], "image")), load_png(run.input(ev["b"], "image")))
    print("inf" if math.isinf(value) else f"{value:.4f}")


def cmd_quantize(run: _Run):
    from .evaluation import write_csv
    from .functaset import dequantize, load, quantize, save

    q = run.cfg["quantize"]
    fs = load(run.input(q["functaset"], "functaset"))
    out = run.output("quantized.fset")
    table = run.output("quantize.csv")
    qfs, spec = quantize(fs, q["bits"])
    err = np.abs(dequantize(qfs).latents.astype(np.float64) - fs.latents)
    save(qfs, out)
    write_csv(table, ["bits", "max_abs_error", "mean_abs_error"], [[q["bits"], repr(float(err.max())), repr(float(err.mean()))]])
    print(f"quantized to {q['bits']} bits -> {out}")


def cmd_perturb(run: _Run):
    from .data import save_image_grid
    from .evaluation import perturb_spatial, perturb_vector, reconstruct, write_csv

    ev = run.cfg["eval"]
    state = _load_state(run, ev["checkpoint"])
    fs = _load_fs(run, ev["functaset"])
    if not 0 <= ev["index"] < len(fs):
        raise ConfigError(f"eval.index {ev['index']} out of range for {len(fs)} latents")
    z = fs.latents[ev["index"]]
    strengths = _strength_list(ev["strengths"])
    d = ev["resolution"] or None
    fn = perturb_spatial if z.ndim == 3 else perturb_vector
    rep = fn(state, z, ev["dim"], strengths, d, clamp=ev["clamp"])
    table = run.output("perturb.csv")
    grid = run.output("perturb.png")
    patch = rep.patch_rmse if rep.patch_rmse is not None else np.full(len(strengths), np.nan)
    write_csv(
        table,
        ["strength", "mae", "rmse", "patch_rmse"],
        [[repr(float(s)), repr(float(a)), repr(float(r)), repr(float(p))] for s, a, r, p in zip(strengths, rep.mae, rep.rmse, patch)],
    )
    base = reconstruct(state, z, d, clamp=False)
    save_image_grid(grid, np.clip(base[None] + rep.diffs, 0, 1), cols=len(strengths))
    print(f"perturbed dim {ev['dim']} at {len(strengths)} strengths -> {table}")


def cmd_classify(run: _Run):
    from .classify import ClassifierConfig, classify_eval, classify_train, history_csv, save_classifier
    from .evaluation import write_csv

    c = dict(run.cfg["classify"])
    fs = _load_fs(run, c.pop("functaset"))
    frac = c.pop("test_fraction")
    cfg = ClassifierConfig(seed=run.cfg["run"]["seed"], **c)
    rng = np.random.default_rng(run.cfg["run"]["seed"])
    order = rng.permutation(len(fs))
    n_test = int(round(frac * len(fs)))
    test, train = np.sort(order[:n_test]), np.sort(order[n_test:])
    ckpt = run.output("classifier.pt")
    hist = run.output("classify_history.csv")
    table = run.output("classify_metrics.csv")
    clf = classify_train(fs, cfg, train)
    rows = [
        ["train", "ema", repr(classify_eval(clf, fs, train))],
        ["test", "ema", repr(classify_eval(clf, fs, test))],
        ["train", "raw", repr(classify_eval(clf, fs, train, use_ema=False))],
        ["test", "raw", repr(classify_eval(clf, fs, test, use_ema=False))],
    ]
    save_classifier(clf, ckpt)
    with atomic_open(hist, "w") as fh:
        fh.write(history_csv(clf.history))
    write_csv(table, ["split", "weights", "accuracy"], rows)
    print(f"EMA accuracy train {float(rows[0][2]):.4f} test {float(rows[1][2]):.4f}")


def _diffusion_configs(run: _Run):
    from .diffusion import DenoiserConfig, DiffusionConfig

    d = run.cfg["diffuse"]
    den = DenoiserConfig(d["width"], d["blocks"], d["time_dim"], d["class_dim"], d["num_classes"], d["dropout"])
    cfg = DiffusionConfig(
        T=d["T"],
        schedule=d["schedule"],
        timestep_ratio=d["timestep_ratio"],
        dummy_prop=d["dummy_prop"],
        lr=d["lr"],
        batch_size=d["batch_size"],
        iterations=d["iterations"],
        norm_kind=d["norm_kind"],
        gamma=d["gamma"],
        ema_decay=d["ema_decay"],
        seed=run.cfg["run"]["seed"],
    )
    return den, cfg


def cmd_diffuse_train(run: _Run):
    from .diffusion import diffuse_train, save_diffusion
    from .evaluation import write_csv

    fs = _load_fs(run, run.cfg["diffuse"]["functaset"])
    ckpt = run.output("diffusion.pt")
    hist = run.output("diffusion_history.csv")
    den, cfg = _diffusion_configs(run)
    dm = diffuse_train(fs, den, cfg)
    save_diffusion(dm, ckpt)
    write_csv(hist, ["step", "loss"], [[h["step"], repr(h["loss"])] for h in dm.history])
    print(f"trained denoiser for {len(dm.history)} steps -> {ckpt}")


def cmd_sample(run: _Run):
    from .data import save_image_grid
    from .diffusion import load_diffusion, sample_latents
    from .evaluation import reconstruct
    from .functaset import Functaset, save

    d = run.cfg["diffuse"]
    dm = load_diffusion(run.input(d["checkpoint"], "diffusion checkpoint"))
    out = run.output("samples.fset")
    label = None if d["label"] < 0 else d["label"]
    if label is not None and not 0 <= label < dm.denoiser_config.num_classes:
        raise ConfigError(f"diffuse.label {label} is not a class of this model")
    clip = d["clip_denoised"] if d["clip_denoised"] > 0 else None
    z = sample_latents(dm, d["num_samples"], label, d["guidance"], seed=run.cfg["run"]["seed"], clip_denoised=clip)
    labels = None if label is None else np.full(len(z), label)
    save(Functaset(dm.latent_shape, z, dm.interpolation, dm.resolution, labels=labels), out)
    if run.cfg["eval"]["checkpoint"]:
        state = _load_state(run, run.cfg["eval"]["checkpoint"])
        save_image_grid(run.output("samples.png"), reconstruct(state, z.astype(np.float32)))
    print(f"drew {len(z)} samples -> {out}")


def cmd_audit(run: _Run):
    from .evaluation import memorization_audit, reconstruct, write_csv

    ev = run.cfg["eval"]
    state = _load_state(run, ev["checkpoint"])
    samples = _load_fs(run, ev["functaset"], "sample functaset")
    train = _load_fs(run, ev["trainset"], "training functaset")
    rep = memorization_audit(reconstruct(state, samples.latents), reconstruct(state, train.latents))
    table = run.output("audit.csv")
    summary = run.output("audit_summary.csv")
    write_csv(table, ["sample", "neighbor", "distance"], [[i, int(j), repr(float(x))] for i, (j, x) in enumerate(zip(rep.neighbors, rep.distances))])
    write_csv(
        summary,
        ["unique_count", "expected", "std", "std_exact", "z_score"],
        [[rep.unique_count, repr(rep.expected), repr(rep.std), repr(rep.std_exact), repr(rep.z_score)]],
    )
    print(f"unique neighbours {rep.unique_count} (expected {rep.expected:.1f} +- {rep.std:.1f})")


COMMANDS = {
    "meta-train": cmd_meta_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "psnr": cmd_psnr,
    "quantize": cmd_quantize,
    "perturb": cmd_perturb,
    "classify": cmd_classify,
    "diffuse-train": cmd_diffuse_train,
    "sample": cmd_sample,
    "audit": cmd_audit,
}


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--threads", type=int, help="worker threads (1 = bit-reproducible)")
    common.add_argument("--out-dir", help="run directory (run.out_dir)")
    common.add_argument("--seed", type=int, help="global seed (run.seed)")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="functa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        for flag, key in FLAGS[name].items():
            p.add_argument(f"--{flag}", dest=f"flag_{key}", metavar=key.split(".")[1].upper(), help=f"sets {key}")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(_require(args.config, "config file")) if args.config else RunConfig()
    overrides = []
    for name, value in vars(args).items():
        if name.startswith("flag_") and value is not None:
            overrides.append(f"{name[5:]}={value}")
    for name, key in (("threads", "run.threads"), ("out_dir", "run.out_dir"), ("seed", "run.seed")):
        if getattr(args, name) is not None:
            overrides.append(f"{key}={getattr(args, name)}")
    if args.overwrite:
        overrides.append("run.overwrite=true")
    overrides.extend(args.set)
    cfg.apply_overrides(overrides)
    for pair in overrides:
        log.info("override %s", pair)
    return cfg


def _run(args) -> int:
    cfg = resolve_config(args)
    threads = cfg["run"]["threads"]
    if threads < 1:
        raise ConfigError("run.threads must be >= 1")
    import torch
    from threadpoolctl import threadpool_limits

    torch.set_num_threads(threads)
    torch.manual_seed(cfg["run"]["seed"])
    run = _Run(cfg, args.command)
    run.out.mkdir(parents=True, exist_ok=True)
    with atomic_open(run.out / f"{args.command}.ini", "w") as fh:
        fh.write(f"# functa {args.command}\n")
        fh.write(cfg.to_text())
    with threadpool_limits(limits=threads):
        COMMANDS[args.command](run)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .functaset import FunctasetFormatError
    from .meta import DivergenceError

    categories = [
        (ConfigError, EXIT_CONFIG, "config error"),
        (OutputExistsError, EXIT_OUTPUT_EXISTS, "output exists"),
        (FileNotFoundError, EXIT_MISSING, "missing artifact"),
        (FunctasetFormatError, EXIT_FORMAT, "format error"),
        (DivergenceError, EXIT_DIVERGED, "diverged"),
        ((ValueError, IndexError), EXIT_CONFIG, "invalid input"),
    ]
    try:
        return _run(args)
    except (ConfigError, OSError, ValueError, IndexError, DivergenceError) as exc:
        for types, code, kind in categories:
            if isinstance(exc, types):
                break
        else:
            code, kind = EXIT_FAILURE, "error"
        print(f"functa {args.command}: {kind}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
