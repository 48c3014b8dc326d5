"""Command-line entry point: ``dcglr {gen,pretrain,eval,diagnose,attn}``.

Settings resolve in this order, later winning: dataclass defaults, the
``--config`` file, then explicit flags. The config file is INI-style with
sections ``[backbone]``, ``[train]`` and ``[run]``; every key mirrors a flag
(``teacher_temp`` <-> ``--teacher-temp``) and unknown keys are errors.
``DCGLR_OUTPUT_DIR`` replaces the output directory unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from .backbone import BackboneConfig, DegenerateInputError, init_params
from .checkpoint import CheckpointError
from .data import SHAPES, DataError, Dataset, load_dataset, load_off, sample_mesh, save_dataset, synth_dataset
from .evaluate import (DegenerateProbeError, export_attention, extract_features, linear_probe,
                       pca_project, spectrum, write_csv)
from .geometry import DegenerateCropError, normalize
from .train import NumericalError, TrainConfig, TrainState, load_teacher, pretrain

log = logging.getLogger("dcglr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_OUT = "DCGLR_OUTPUT_DIR"


class UsageError(Exception):
    """Bad flag or config value; maps to exit code 2."""


# config plumbing -----------------------------------------------------------------

def _field_kind(f: dataclasses.Field) -> str:
    t = str(f.type)
    if "tuple" in t:
        return "pair"
    if "bool" in t:
        return "bool"
    if "None" in t:
        return "optint"
    if "float" in t:
        return "float"
    return "int"


def _parse_value(kind: str, raw: str, where: str) -> Any:
    raw = raw.strip()
    try:
        if kind == "pair":
            lo, hi = (float(x) for x in raw.replace(" ", "").split(","))
            return (lo, hi)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "optint":
            return None if raw.lower() == "none" else int(raw)
        return float(raw) if kind == "float" else int(raw)
    except ValueError:
        raise UsageError(f"{where}: cannot parse {raw!r} as {kind}") from None


SECTIONS = {
    "backbone": {f.name: _field_kind(f) for f in dataclasses.fields(BackboneConfig)},
    "train": {f.name: _field_kind(f) for f in dataclasses.fields(TrainConfig)},
    "run": {"data": "str", "out": "str", "resume": "str"},
}


def read_config(path) -> dict[str, dict[str, Any]]:
    """Parse an INI config into typed values, rejecting unknown sections and keys."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise UsageError(f"--config: {path}: {exc.message}") from None
    out: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise UsageError(f"{path}: unknown section [{section}]; expected one of {sorted(SECTIONS)}")
        for key, raw in parser.items(section):
            kinds = SECTIONS[section]
            if key not in kinds:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            kind = kinds[key]
            out.setdefault(section, {})[key] = raw if kind == "str" else _parse_value(
                kind, raw, f"{path} [{section}] {key}")
    return out


def _add_config_flags(p: argparse.ArgumentParser, section: str) -> None:
    group = p.add_argument_group(f"{section} settings (config section [{section}])")
    for name, kind in SECTIONS[section].items():
        if kind == "str":
            continue
        flags = ["--" + name.replace("_", "-")]
        if name == "batch_size":
            flags.append("--batch")
        group.add_argument(*flags, dest=f"{section}.{name}", default=None, metavar=kind.upper())


def resolve(args, sections=("backbone", "train"), base: dict | None = None) -> dict[str, dict[str, Any]]:
    """Merge defaults, ``base`` (for example a checkpoint's config), config file and flags."""
    merged: dict[str, dict[str, Any]] = {s: dict((base or {}).get(s, {})) for s in SECTIONS}
    if getattr(args, "config", None):
        for s, values in read_config(args.config).items():
            merged[s].update(values)
    for s in sections:
        for name, kind in SECTIONS[s].items():
            raw = getattr(args, f"{s}.{name}", None)
            if raw is not None:
                merged[s][name] = _parse_value(kind, raw, "--" + name.replace("_", "-"))
    return merged


def build_configs(merged) -> tuple[BackboneConfig, TrainConfig]:
    try:
        return BackboneConfig(**merged["backbone"]), TrainConfig(**merged["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def output_dir(args, merged, default: str) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(ENV_OUT):
        return Path(os.environ[ENV_OUT])
    return Path(merged["run"].get("out", default))


def _data_path(args, merged) -> Path:
    path = args.data or merged["run"].get("data")
    if not path:
        raise UsageError("--data: a dataset manifest is required")
    if not Path(path).exists():
        raise UsageError(f"--data: {path} does not exist")
    return Path(path)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# subcommands ---------------------------------------------------------------------

def _parse_classes(value: str) -> list[str]:
    value = value.strip()
    if value.isdigit():
        n = int(value)
        if not 1 <= n <= len(SHAPES):
            raise UsageError(f"--classes: count must lie in [1, {len(SHAPES)}], got {n}")
        return list(SHAPES[:n])
    names = [s.strip() for s in value.split(",") if s.strip()]
    bad = [s for s in names if s not in SHAPES]
    if bad or not names:
        raise UsageError(f"--classes: unknown class {', '.join(bad) or value!r}; "
                         f"choose from {', '.join(SHAPES)} or give a count")
    return names


def _off_dataset(paths, n_points: int, seed: int) -> Dataset:
    """Sample OFF meshes; the class is the parent directory (skipping train/test)."""
    clouds, names, split = [], [], []
    root = np.random.SeedSequence([seed, 3])
    files = sorted(Path(p) for p in paths)
    for path, ss in zip(files, root.spawn(len(files))):
        parent = path.parent
        is_test = parent.name == "test"
        if parent.name in ("train", "test"):
            parent = parent.parent
        clouds.append(normalize(sample_mesh(load_off(path), n_points, np.random.default_rng(ss))))
        names.append(parent.name or "mesh")
        split.append(not is_test)
    class_names = sorted(set(names))
    return Dataset(clouds, [class_names.index(n) for n in names], class_names, split)


def cmd_gen(args) -> int:
    out = output_dir(args, {"run": {}}, "data")
    if args.off:
        ds = _off_dataset(args.off, args.points, args.seed)
        source = {"source": "off", "files": [str(p) for p in args.off]}
    else:
        ds = synth_dataset(_parse_classes(args.classes), args.per_class, args.points, args.noise,
                           args.seed, args.test_fraction)
        source = {"source": "synthetic", "classes": list(ds.class_names), "per_class": args.per_class,
                  "noise_sigma": args.noise, "test_fraction": args.test_fraction}
    meta = {"seed": args.seed, "n_points": args.points, "generator": source}
    manifest = save_dataset(out, ds, meta, args.name)
    print(f"wrote {len(ds)} clouds ({len(ds.class_names)} classes) to {manifest}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    base = None
    state = None
    resume = args.resume
    if resume is None and getattr(args, "config", None):
        resume = read_config(args.config).get("run", {}).get("resume")
    if resume:
        try:
            state, saved = TrainState.load(resume)
        except FileNotFoundError:
            raise UsageError(f"--resume: {resume} does not exist") from None
        base = {"backbone": state.student.config.to_dict(), "train": saved.to_dict()}
    merged = resolve(args, base=base)
    backbone, train_cfg = build_configs(merged)
    if state is not None and backbone != state.student.config:
        raise UsageError("--resume: backbone settings differ from the checkpoint")
    ds = load_dataset(_data_path(args, merged))
    out = output_dir(args, merged, "runs/pretrain")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run.json", {"command": "pretrain", "seed": train_cfg.seed,
                                   "backbone": backbone.to_dict(), "train": train_cfg.to_dict(),
                                   "data": str(_data_path(args, merged)), "resumed_from": resume})
    train = ds.train

    def progress(m):
        if m["loss"] is not None and (m["step"] + 1) % args.log_every == 0:
            log.info("epoch %d step %d loss %.4f (g %.4f, l %.4f) lr %.2e",
                     m["epoch"], m["step"] + 1, m["loss"], m["loss_g"], m["loss_l"], m["lr"])

    try:
        state, history = pretrain(train.clouds, backbone, train_cfg, out, state=state,
                                  stop_after=args.stop_after, on_step=progress)
    except KeyboardInterrupt:
        print(f"interrupted; last checkpoint written to {out / 'checkpoint_last.bin'}", file=sys.stderr)
        return 130
    print(f"trained {len(history)} steps (step {state.step}); checkpoints in {out}")
    return EXIT_OK


def _load_params(args, merged):
    """Teacher weights from ``--checkpoint``, or a fresh random teacher with ``--random-init``."""
    if args.random_init:
        backbone, train_cfg = build_configs(merged)
        return TrainState.fresh(backbone, train_cfg.seed).teacher, "random-init"
    if not args.checkpoint:
        raise UsageError("--checkpoint: required unless --random-init is given")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"--checkpoint: {args.checkpoint} does not exist")
    return load_teacher(args.checkpoint), str(args.checkpoint)


def cmd_eval(args) -> int:
    merged = resolve(args)
    params, source = _load_params(args, merged)
    ds = load_dataset(_data_path(args, merged))
    feats = extract_features(ds.clouds, params, ds.labels, seed=args.seed)
    res = linear_probe(feats.rows, feats.labels, ds.split, reg=args.reg, epochs=args.probe_epochs,
                       seed=args.seed)
    report = {"command": "eval", "seed": args.seed, "weights": source, "backbone": params.config.to_dict(),
              "reg": args.reg, "probe_epochs": args.probe_epochs, "accuracy": res.accuracy,
              "train_accuracy": res.train_accuracy, "iterations": res.iterations,
              "n_train": int(ds.split.sum()), "n_test": int((~ds.split).sum())}
    out = output_dir(args, merged, "runs/eval")
    _write_json(out / "eval.json", report)
    print(f"test accuracy {res.accuracy:.4f} (train {res.train_accuracy:.4f}); report {out / 'eval.json'}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    merged = resolve(args)
    params, source = _load_params(args, merged)
    ds = load_dataset(_data_path(args, merged))
    feats = extract_features(ds.clouds, params, ds.labels, seed=args.seed)
    rep = spectrum(feats.rows, args.threshold)
    out = output_dir(args, merged, "runs/diagnose")
    header = [f"seed {args.seed}", f"weights {source}", f"config {json.dumps(params.config.to_dict())}"]
    _write_json(out / "spectrum.json", {"command": "diagnose", "seed": args.seed, "weights": source,
                                        "backbone": params.config.to_dict(), **rep.to_dict()})
    write_csv(out / "spectrum.csv", ["index", "eigenvalue", "normalized", "log10_normalized"],
              [(i, e, n, l) for i, (e, n, l) in enumerate(zip(rep.eigenvalues, rep.normalized,
                                                              rep.log10_normalized))], header)
    xy = pca_project(feats.rows, 2)
    write_csv(out / "pca.csv", ["index", "label", "pc1", "pc2"],
              [(i, int(lab), x, y) for i, (lab, (x, y)) in enumerate(zip(feats.labels, xy))], header)
    print(f"effective rank {rep.effective_rank} of {len(rep.eigenvalues)} "
          f"(threshold {rep.threshold:g}); outputs in {out}")
    return EXIT_OK


def cmd_attn(args) -> int:
    merged = resolve(args)
    params, source = _load_params(args, merged)
    if args.cloud:
        cloud = normalize(sample_mesh(load_off(args.cloud), args.points, np.random.default_rng(args.seed)))
        origin = str(args.cloud)
    else:
        ds = load_dataset(_data_path(args, merged))
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index: {args.index} outside [0, {len(ds)})")
        cloud, origin = ds.clouds[args.index], f"{args.data}#{args.index}"
    out = output_dir(args, merged, "runs/attn")
    exp = export_attention(cloud, params, out, args.layer, args.seed,
                           meta={"weights": source, "cloud": origin,
                                 "config": params.config.to_dict()})
    print(f"wrote {len(exp.paths)} head files (layer {exp.layer}) to {out}")
    return EXIT_OK


# parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcglr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic or OFF-derived dataset")
    g.add_argument("--classes", default=str(len(SHAPES)),
                   help=f"class count or comma list from {','.join(SHAPES)}")
    g.add_argument("--per-class", type=int, default=50)
    g.add_argument("--points", type=int, default=1024)
    g.add_argument("--noise", type=float, default=0.01)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--off", nargs="+", help="OFF meshes to sample instead of procedural shapes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default="dataset")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("pretrain", help="teacher-student pretraining")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset manifest (.json)")
    t.add_argument("--out")
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop after this global step")
    t.add_argument("--log-every", type=int, default=10)
    _add_config_flags(t, "backbone")
    _add_config_flags(t, "train")
    t.set_defaults(func=cmd_pretrain)

    def weights(q):
        q.add_argument("--config")
        q.add_argument("--checkpoint", help="training checkpoint or backbone file")
        q.add_argument("--random-init", action="store_true",
                       help="use a freshly initialised teacher (backbone settings from config/flags)")
        q.add_argument("--data", help="dataset manifest (.json)")
        q.add_argument("--out")
        q.add_argument("--seed", type=int, default=0)
        _add_config_flags(q, "backbone")
        q.add_argument("--train-seed", dest="train.seed", default=None, metavar="INT",
                       help="initialisation seed for --random-init")

    e = sub.add_parser("eval", help="linear probe on frozen teacher features")
    weights(e)
    e.add_argument("--reg", type=float, default=1e-3)
    e.add_argument("--probe-epochs", type=int, default=2000)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="feature covariance spectrum and PCA projection")
    weights(d)
    d.add_argument("--threshold", type=float, default=1e-3)
    d.set_defaults(func=cmd_diagnose)

    a = sub.add_parser("attn", help="export class-token attention per head as PLY")
    weights(a)
    a.add_argument("--index", type=int, default=0, help="cloud index in --data")
    a.add_argument("--cloud", help="OFF mesh to sample instead of a dataset cloud")
    a.add_argument("--points", type=int, default=1024, help="samples drawn from --cloud")
    a.add_argument("--layer", type=int, default=-1)
    a.set_defaults(func=cmd_attn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dcglr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"dcglr {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, DegenerateProbeError, DegenerateCropError,
            DegenerateInputError) as exc:
        print(f"dcglr {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
