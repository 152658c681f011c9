"""Command-line entry point: gen-data, train-vae, train-idgan, traverse, eval.

Config files are plain ``key=value`` lines; ``#`` starts a comment. Unknown
keys are rejected. Every command writes the resolved settings next to its
outputs. Verbosity comes from ``log_level`` or the DISENT_LOG env var.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import dsprites, metrics, traversal
from .checkpoint import Checkpoint, CheckpointError
from .idgan import IdGanConfig, train_idgan
from .models import IdGanModel, VaeModel
from .rng import seeded_rng
from .vae import TrainingDiverged, VaeConfig, train_vae

log = logging.getLogger("disentlab")

GLOBAL_KEYS = {"seed", "output_dir", "log_level"}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, allowed: set[str], source: str = "config") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = val
    return out


def read_config(path, allowed: set[str]) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config_text(p.read_text(), allowed, str(path))


def _coerce(cls, raw: dict[str, str], renames: dict[str, str] | None = None):
    renames = renames or {}
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        name = renames.get(key, key)
        if name not in types:
            continue
        t = str(types[name])
        try:
            if val.lower() in ("none", "") and "None" in t:
                kwargs[name] = None
            elif t.startswith("int"):
                kwargs[name] = int(val)
            elif t.startswith("float"):
                kwargs[name] = float(val)
            else:
                kwargs[name] = val
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {val!r}") from None
    return cls(**kwargs)


def _write_resolved(out_dir: Path, command: str, entries: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# resolved settings for {command}"] + [f"{k}={v}" for k, v in entries.items()]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _setup_logging(level: str | None):
    level = (level or os.environ.get("DISENT_LOG") or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def _load_selection(spec: str) -> tuple[dsprites.Selection, int | None]:
    """A selection from a file (key=value lines) or inline text; may carry position_threshold."""
    allowed = set(dsprites.FACTOR_NAMES) | {"position_threshold"}
    p = Path(spec)
    if p.is_file():
        raw = read_config(p, allowed)
    elif spec.strip() in ("", "full", "all"):
        raw = {}
    else:
        raw = parse_config_text(spec.replace(";", "\n"), allowed, "spec")
    threshold = raw.pop("position_threshold", None)
    try:
        sel = dsprites.Selection.parse("; ".join(f"{k}={v}" for k, v in raw.items()))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return sel, int(threshold) if threshold is not None else None


def _view_from_spec(spec: str) -> dsprites.DatasetView:
    sel, t = _load_selection(spec)
    view = dsprites.reduced_lattice(sel)
    if t is not None:
        view = dsprites.filter_by_threshold(t, view)
    return view


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    view = _view_from_spec(args.spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if len(view) > 0:
        dsprites.write_cache(view, out)
    _write_resolved(out.parent, "gen-data", {"spec": args.spec, "count": len(view), "out": out.name})
    print(len(view))
    return 0


VAE_KEYS = {f.name for f in dataclasses.fields(VaeConfig)} | GLOBAL_KEYS
IDGAN_KEYS = ({f.name for f in dataclasses.fields(IdGanConfig)} - {"lam"}) | {"lambda"} | GLOBAL_KEYS


def cmd_train_vae(args) -> int:
    raw = read_config(args.config, VAE_KEYS)
    if args.epochs is not None:
        raw["epochs"] = str(args.epochs)
    if args.output_dir is not None:
        raw["output_dir"] = args.output_dir
    _setup_logging(raw.get("log_level"))
    cfg = _coerce(VaeConfig, raw)
    out = Path(raw.get("output_dir", "runs/vae"))
    _write_resolved(out, "train-vae", dataclasses.asdict(cfg))
    _, history = train_vae(cfg, out)
    final = history.records[-1] if history.records else None
    print(f"checkpoint={out / 'vae_final.ckpt'}")
    if final:
        print(f"epochs={len(history.records)} recon={final.recon:.4f} kl={final.kl:.4f}")
    return 0


def cmd_train_idgan(args) -> int:
    raw = read_config(args.config, IDGAN_KEYS)
    if args.vae_checkpoint is not None:
        raw["vae_checkpoint"] = args.vae_checkpoint
    if args.epochs is not None:
        raw["epochs"] = str(args.epochs)
    if args.output_dir is not None:
        raw["output_dir"] = args.output_dir
    _setup_logging(raw.get("log_level"))
    cfg = _coerce(IdGanConfig, raw, {"lambda": "lam"})
    if not cfg.vae_checkpoint or not Path(cfg.vae_checkpoint).is_file():
        raise ConfigError(f"VAE checkpoint {cfg.vae_checkpoint!r} not found")
    out = Path(raw.get("output_dir", "runs/idgan"))
    _write_resolved(out, "train-idgan", dataclasses.asdict(cfg))
    _, history = train_idgan(cfg, out)
    print(f"checkpoint={out / 'idgan_final.ckpt'}")
    for w in history.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def parse_range(text: str) -> tuple[float, float, bool]:
    """``[-2,2]``, ``[-2,2)`` or bare ``-2,2`` (inclusive)."""
    t = text.strip()
    inclusive = not t.endswith(")")
    t = t.strip("[]()")
    try:
        lo, hi = (float(v) for v in t.split(","))
    except ValueError:
        raise ConfigError(f"bad range {text!r}; expected e.g. [-2,2] or [-2,2)") from None
    return lo, hi, inclusive


def cmd_traverse(args) -> int:
    _setup_logging(args.log_level)
    ckpt = Checkpoint.load(args.checkpoint)
    lo, hi, inclusive = parse_range(args.range)
    if args.mode == "decoder":
        if ckpt.kind != "vae":
            raise ConfigError(f"decoder mode needs a VAE checkpoint, got kind {ckpt.kind!r}")
        model = VaeModel.from_checkpoint(ckpt)
        noise, header = None, "mode=decoder"
    else:
        if ckpt.kind != "idgan":
            raise ConfigError(f"generator mode needs an ID-GAN checkpoint, got kind {ckpt.kind!r}")
        model = IdGanModel.from_checkpoint(ckpt)
        seed = args.noise_seed if args.noise_seed is not None else int(ckpt.metadata.get("config.seed", 0))
        noise = seeded_rng([seed, 301]).standard_normal(model.noise_dim).astype(np.float32)
        header = f"mode=generator noise_seed={seed}"
    spec = traversal.TraversalSpec(model.code_dim, lo, hi, args.step, inclusive, noise)
    grid = traversal.render_traversal(model, spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    traversal.write_grid(grid, out)
    codes_path = out.with_name(out.stem + "_codes.csv")
    traversal.write_codes_csv(grid, codes_path, header)
    settings = {"checkpoint": args.checkpoint, "mode": args.mode, "range": args.range, "step": args.step,
                "grid": f"{grid.rows}x{grid.cols}", "header": header}
    if args.probe_threshold is not None:
        rep = traversal.generalization_probe(model, spec, args.probe_threshold, grid)
        out.with_name(out.stem + "_probe.txt").write_text(rep.as_text())
        settings["probe_threshold"] = args.probe_threshold
    _write_resolved(out.parent, "traverse", settings)
    h, w = grid.assemble().shape
    print(f"{out} {w}x{h} tiles={len(grid.codes)} grid={grid.rows}x{grid.cols}")
    return 0


def cmd_eval(args) -> int:
    _setup_logging(args.log_level)
    info = {"num_votes": str(args.num_votes), "samples_per_vote": str(args.samples_per_vote),
            "num_bins": str(args.num_bins), "seed": str(args.seed)}
    bce = l1 = math.nan
    if args.table:
        table = metrics.RepresentationTable.read_csv(args.table)
        represent = table.lookup()
        view = dsprites.DatasetView(dsprites.factors_to_indices(table.factors))
        info["source"] = f"table:{args.table}"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --table")
        ckpt = Checkpoint.load(args.checkpoint)
        model = None
        if ckpt.kind == "idgan":
            encoder = IdGanModel.from_checkpoint(ckpt).encoder
        else:
            model = VaeModel.from_checkpoint(ckpt)
            encoder = model.encoder
        data = args.data if args.data is not None else _checkpoint_data(ckpt)
        view = _view_from_spec(data)
        represent = metrics.encoder_representation(encoder)
        table = metrics.representation_table(represent, view) if len(view) <= 65536 else None
        if table is not None:
            represent = table.lookup()
        else:
            sample = np.sort(np.random.default_rng(args.seed).choice(view.indices, 10000, replace=False))
            table = metrics.representation_table(represent, dsprites.DatasetView(sample))
        if model is not None:
            stats = metrics.recon_stats(model, view)
            bce, l1 = stats["bce_per_pixel"], stats["l1_per_pixel"]
        info["source"] = f"checkpoint:{args.checkpoint}"
        info["data"] = data
    info["view_size"] = str(len(view))
    f = metrics.fvm(represent, view, args.num_votes, args.samples_per_vote, args.seed)
    m = metrics.mig(table, args.num_bins)
    info["fvm_excluded_factors"] = ",".join(dsprites.FACTOR_NAMES[k] for k in f.excluded_factors) or "none"
    info["mig_excluded_factors"] = ",".join(dsprites.FACTOR_NAMES[k] for k in m.excluded_factors) or "none"
    report = metrics.MetricReport(f.accuracy, m.score, m.mi, bce, l1, info)
    report.write(args.out)
    _write_resolved(Path(args.out), "eval", info)
    values = [f.accuracy, m.score] + ([] if math.isnan(bce) and math.isnan(l1) else [bce, l1])
    print(f"fvm={f.accuracy:.4f} mig={m.score:.4f}")
    if not all(math.isfinite(v) for v in values):
        print("non-finite metric value", file=sys.stderr)
        return 1
    return 0


def _checkpoint_data(ckpt: Checkpoint) -> str:
    data = ckpt.metadata.get("config.data", "full")
    if data in ("None", ""):
        data = "full"
    return data


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disentlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a lattice subset to a DSPR cache file")
    g.add_argument("--spec", default="full", help="selection file, inline 'shape=0; pos_x=0:32:2', or 'full'")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("train-vae", help="step 1: train a beta-VAE")
    v.add_argument("--config", required=True)
    v.add_argument("--epochs", type=int)
    v.add_argument("--output-dir")
    v.set_defaults(func=cmd_train_vae)

    i = sub.add_parser("train-idgan", help="step 2: train the generator/discriminator")
    i.add_argument("--config", required=True)
    i.add_argument("--vae-checkpoint")
    i.add_argument("--epochs", type=int)
    i.add_argument("--output-dir")
    i.set_defaults(func=cmd_train_idgan)

    t = sub.add_parser("traverse", help="render a latent traversal grid")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--mode", choices=("decoder", "generator"), default="decoder")
    t.add_argument("--range", default="[-2,2]")
    t.add_argument("--step", type=float, default=0.5)
    t.add_argument("--noise-seed", type=int)
    t.add_argument("--probe-threshold", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--log-level")
    t.set_defaults(func=cmd_traverse)

    e = sub.add_parser("eval", help="FVM, MIG and reconstruction statistics")
    e.add_argument("--checkpoint")
    e.add_argument("--table", help="representation table CSV instead of a checkpoint")
    e.add_argument("--data", help="selection for the evaluation view (default: the training selection)")
    e.add_argument("--out", required=True)
    e.add_argument("--num-votes", type=int, default=800)
    e.add_argument("--samples-per-vote", type=int, default=100)
    e.add_argument("--num-bins", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--log-level")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
