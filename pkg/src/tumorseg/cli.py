"""Command line front end.

Every subcommand resolves its configuration as built-in defaults, then the
``config`` block of a ``--config`` file (a previously written run manifest
works), then explicit flags.  The resolved set is written as a run manifest
next to the primary output, so ``<cmd> --config <out>.manifest.json``
reproduces the run.

Exit status: 0 on success, 1 on a domain error (stderr line
``error: <Category>: <message>``), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .errors import InvalidConfig, MissingCheckpoint, TumorSegError

MANIFEST_SUFFIX = ".manifest.json"


class GradientMismatch(TumorSegError):
    pass


def _floats(text) -> List[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text) -> List[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _strs(text) -> List[str]:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _on_off(text) -> bool:
    if isinstance(text, bool):
        return text
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


# -- subcommand table ----------------------------------------------------------------
# name -> (help, [(flag, key, type, default, help)]); default None with a
# required key means the value must come from a flag or the config file.

REQUIRED = object()

COMMANDS: Dict[str, tuple] = {
    "phantom": ("generate a synthetic phantom volume and its label map", [
        ("--seed", "seed", int, 0, "phantom seed"),
        ("--dims", "dims", _ints, [64, 64, 64], "grid size nx,ny,nz"),
        ("--out", "out", str, REQUIRED, "output volume (.mmv)"),
        ("--labels", "labels", str, None, "output label map (default: <out> with .mml)"),
    ]),
    "preprocess": ("normalize each modality over the brain", [
        ("--in", "input", str, REQUIRED, "input volume (.mmv)"),
        ("--out", "out", str, REQUIRED, "output volume (.mmv)"),
        ("--clip-low", "clip_low_pct", float, 0.5, "lower clipping percentile"),
        ("--clip-high", "clip_high_pct", float, 99.5, "upper clipping percentile"),
    ]),
    "perturb": ("add Gaussian noise to brain voxels", [
        ("--in", "input", str, REQUIRED, "input volume (.mmv)"),
        ("--out", "out", str, REQUIRED, "output volume (.mmv)"),
        ("--sigma", "sigma", float, 0.02, "noise standard deviation"),
        ("--seed", "seed", int, 0, "noise seed"),
        ("--all-voxels", "all_voxels", _on_off, False, "on: noise the background too"),
    ]),
    "segment-cms": ("cascaded Mumford-Shah segmentation", [
        ("--in", "input", str, REQUIRED, "input volume (.mmv), normalized"),
        ("--out", "out", str, REQUIRED, "output label map (.mml)"),
        ("--nu-start", "nu_start", float, 400000.0, "initial boundary weight"),
        ("--nu-decay", "nu_decay", float, 0.15, "relative decrease per cascade step"),
        ("--max-frac", "volume_fraction_max", float, 0.5, "max tumor fraction of the brain"),
        ("--nu-min", "nu_min", float, 1.0, "smallest boundary weight tried"),
        ("--nu-subsplit", "nu_subsplit", float, 1.0, "boundary weight for the T1c split"),
        ("--refine", "refine", _on_off, True, "on|off: local refinement of the merge result"),
    ]),
    "train-toy": ("train the toy U-Net on clean phantoms", [
        ("--phantoms", "phantoms", int, 8, "number of training phantoms"),
        ("--phantom-seed0", "phantom_seed0", int, 100, "seed of the first training phantom"),
        ("--dims", "dims", _ints, [32, 32, 32], "phantom grid size"),
        ("--epochs", "epochs", int, 40, "total epochs"),
        ("--alpha", "alpha", float, 0.75, "octave ratio (0 = plain convolutions)"),
        ("--swa", "swa", _on_off, True, "on|off: deliver the weight-averaged model"),
        ("--seed", "seed", int, 0, "initialization and shuffling seed"),
        ("--lr0", "lr0", float, 0.01, "phase-1 learning rate"),
        ("--cycle-len", "cycle_len", int, None, "phase-2 cycle length (default: two cycles)"),
        ("--base-channels", "base_channels", int, 16, "channels at the first level"),
        ("--levels", "levels", int, 3, "resolution levels"),
        ("--noise-augment", "noise_augment", float, 0.0, "training noise sigma (off by default)"),
        ("--family", "family", _on_off, False,
         "on: train plain and octave networks and write the evaluate --ckpt layout"),
        ("--out", "out", str, REQUIRED, "checkpoint directory"),
    ]),
    "predict": ("run a trained toy U-Net", [
        ("--ckpt", "ckpt", str, REQUIRED, "checkpoint prefix (e.g. ckpt/model)"),
        ("--in", "input", str, REQUIRED, "input volume (.mmv), normalized"),
        ("--out", "out", str, REQUIRED, "output label map (.mml)"),
    ]),
    "postprocess": ("energy-based refinement of a label map", [
        ("--in", "input", str, REQUIRED, "predicted label map (.mml)"),
        ("--vol", "volume", str, REQUIRED, "volume (.mmv) the prediction belongs to"),
        ("--out", "out", str, REQUIRED, "output label map (.mml)"),
        ("--zeta", "zeta", float, 0.05, "spatial kernel scale"),
        ("--beta", "beta", float, 1.0, "edge exponent"),
        ("--sigma-int", "sigma_int", float, 0.1, "intensity kernel width"),
        ("--alpha-rho", "alpha_rho", float, 0.5, "spatial kernel distance factor"),
        ("--lambda", "lambda_perim", float, 1.0, "perimeter weight"),
        ("--stride", "stride", int, 2, "scribble lattice stride"),
        ("--min-enh", "min_enhancing", int, 50, "min enhancing voxels before relabelling"),
    ]),
    "evaluate": ("noise-robustness sweep and trend check", [
        ("--methods", "methods", _strs, ["cms", "baseline", "octconv", "octconv+swa",
                                          "octconv+swa+post"], "comma-separated method ids"),
        ("--ckpt", "ckpt", str, None, "checkpoint directory from train-toy (network methods)"),
        ("--sigmas", "sigmas", _floats, [0.0, 0.02, 0.04], "noise levels"),
        ("--phantoms", "phantoms", int, 8, "number of validation phantoms"),
        ("--phantom-seed0", "phantom_seed0", int, 0, "seed of the first validation phantom"),
        ("--dims", "dims", _ints, [32, 32, 32], "phantom grid size"),
        ("--seeds", "seeds", int, 3, "noise replicates per phantom"),
        ("--data", "data", str, None, "directory of external <case>.mmv/<case>.mml pairs"),
        ("--trend", "trend", _on_off, True, "on|off: run the ordering check"),
        ("--out", "out", str, REQUIRED, "report (.json; a .csv is written alongside)"),
    ]),
    "gradcheck": ("finite-difference gradient suite", [
        ("--seed", "seed", int, 0, "seed for inputs and probes"),
        ("--out", "out", str, None, "optional JSON table of errors"),
    ]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tumorseg", description=__doc__.splitlines()[0])
    from .octnet import BLOB_FORMAT_VERSION
    parser.add_argument("--version", action="version",
                        version=f"tumorseg {__version__}, parameter blob format {BLOB_FORMAT_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (help_text, options) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        # SUPPRESS leaves unset flags out of the namespace, which is how
        # explicit flags are told apart from defaults
        for flag, key, typ, default, h in options:
            shown = "required" if default is REQUIRED else f"default: {default}"
            p.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS,
                           help=f"{h} ({shown})")
        p.add_argument("--config", default=argparse.SUPPRESS,
                       help="JSON config or run manifest; flags override it")
        p.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                       help="worker processes (default: logical cores)")
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Defaults < config file < flags."""
    options = COMMANDS[command][1]
    cfg = {key: default for _, key, _, default, _ in options}
    path = getattr(ns, "config", None)
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
        if "subcommand" in doc and doc["subcommand"] != command:
            raise InvalidConfig(f"config was written by {doc['subcommand']!r}, not {command!r}")
        given = doc.get("config", doc)
        types = {key: typ for _, key, typ, _, _ in options}
        for key, value in given.items():
            if key not in cfg:
                raise InvalidConfig(f"unknown config key {key!r} for {command}")
            cfg[key] = value if value is None else types[key](value)
    for _, key, _, _, _ in options:
        if hasattr(ns, key):
            cfg[key] = getattr(ns, key)
    missing = [k for k, v in cfg.items() if v is REQUIRED]
    if missing:
        raise _Usage(f"{command}: missing required option(s): {', '.join(missing)}")
    return cfg


class _Usage(Exception):
    pass


def _manifest_path(cfg: dict, command: str) -> Optional[str]:
    out = cfg.get("out")
    if out is None:
        return None
    if command == "train-toy":
        return os.path.join(out, "manifest.json")
    return out + MANIFEST_SUFFIX


def write_manifest(command: str, cfg: dict, outputs: List[str], extra: Optional[dict] = None):
    from .octnet import BLOB_FORMAT_VERSION
    from .preprocess import GENERATOR_NAME
    path = _manifest_path(cfg, command)
    if path is None:
        return None
    doc = {"subcommand": command, "config": cfg, "tool_version": __version__,
           "blob_format_version": BLOB_FORMAT_VERSION,
           "rng": {"noise": GENERATOR_NAME, "phantom": "numpy PCG64 seeded [seed, stream]",
                   "training": "numpy PCG64 seeded with the run seed"},
           "outputs": outputs}
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return path


# -- subcommands ----------------------------------------------------------------------

def _labels_path(out: str) -> str:
    root, ext = os.path.splitext(out)
    return (root if ext == ".mmv" else out) + ".mml"


def cmd_phantom(cfg, jobs):
    from .phantom import PhantomSpec, generate_phantom
    from .volume import save_labelmap, save_volume
    vol, labels, _ = generate_phantom(PhantomSpec(dims=tuple(cfg["dims"]), seed=cfg["seed"]))
    lpath = cfg["labels"] or _labels_path(cfg["out"])
    save_volume(vol, cfg["out"])
    save_labelmap(labels, lpath, vol.spacing)
    return [cfg["out"], lpath]


def cmd_preprocess(cfg, jobs):
    from .preprocess import NormalizationParams, normalize
    from .volume import brain_mask, load_volume, save_volume
    vol = load_volume(cfg["input"])
    params = NormalizationParams(cfg["clip_low_pct"], cfg["clip_high_pct"])
    save_volume(normalize(vol, brain_mask(vol), params), cfg["out"])
    return [cfg["out"]]


def cmd_perturb(cfg, jobs):
    from .preprocess import NoiseSpec, add_noise
    from .volume import brain_mask, load_volume, save_volume
    vol = load_volume(cfg["input"])
    spec = NoiseSpec(cfg["sigma"], cfg["seed"], brain_only=not cfg["all_voxels"])
    save_volume(add_noise(vol, brain_mask(vol), spec), cfg["out"])
    return [cfg["out"]]


def cmd_segment_cms(cfg, jobs):
    from .cms import CascadeConfig, segment
    from .volume import brain_mask, load_volume, save_labelmap
    vol = load_volume(cfg["input"])
    config = CascadeConfig(nu_start=cfg["nu_start"], nu_decay=cfg["nu_decay"],
                           volume_fraction_max=cfg["volume_fraction_max"], nu_min=cfg["nu_min"],
                           nu_subsplit=cfg["nu_subsplit"], refine=cfg["refine"])
    save_labelmap(segment(vol, brain_mask(vol), config), cfg["out"], vol.spacing)
    return [cfg["out"]]


def cmd_train_toy(cfg, jobs):
    from .harness import make_cases, toy_schedule
    from .octnet import ToyUNetConfig, build_toy_unet, save_checkpoint
    from .swa import TrainConfig, train
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    cases = make_cases(cfg["phantoms"], cfg["dims"], cfg["phantom_seed0"], "train")
    if cfg["family"]:
        return _train_family(cfg, cases)
    data = [(c.volume.data.astype(np.float64), c.labels) for c in cases]
    model = build_toy_unet(ToyUNetConfig(alpha=cfg["alpha"], base_channels=cfg["base_channels"],
                                         levels=cfg["levels"]), cfg["seed"])
    tc = TrainConfig(seed=cfg["seed"], noise_augment=cfg["noise_augment"],
                     schedule=toy_schedule(cfg["epochs"], cfg["lr0"], cfg["cycle_len"]))
    state = train(model, data, tc)
    meta = {"loss_history": state.loss_history, "snapshot_epochs": state.snapshot_epochs}
    outputs = list(save_checkpoint(state.sgd_model, os.path.join(out, "last_sgd"), meta))
    final = state.swa_model if cfg["swa"] and state.swa_model is not None else state.sgd_model
    outputs += save_checkpoint(final, os.path.join(out, "model"), {**meta, "swa": cfg["swa"]})
    loss_csv = os.path.join(out, "loss.csv")
    _write_loss_csv(loss_csv, {"lr": state.lr_history, "loss": state.loss_history})
    return outputs + [loss_csv]


def _write_loss_csv(path, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + list(columns))
        for e, row in enumerate(zip(*columns.values())):
            w.writerow([e] + [repr(v) for v in row])


def _train_family(cfg, cases):
    from .harness import save_family, train_toy_family
    family = train_toy_family(cases, epochs=cfg["epochs"], alpha=cfg["alpha"], seed=cfg["seed"],
                              base_channels=cfg["base_channels"], levels=cfg["levels"],
                              lr0=cfg["lr0"], cycle_len=cfg["cycle_len"],
                              noise_augment=cfg["noise_augment"])
    outputs = save_family(family, cfg["out"])
    loss_csv = os.path.join(cfg["out"], "loss.csv")
    _write_loss_csv(loss_csv, {f"loss_{k}": v for k, v in family.loss_history.items()})
    return outputs + [loss_csv]


def cmd_predict(cfg, jobs):
    from .octnet import load_checkpoint
    from .volume import brain_mask, load_volume, save_labelmap
    if not os.path.exists(cfg["ckpt"] + ".json"):
        raise MissingCheckpoint(f"no checkpoint at {cfg['ckpt']}")
    model = load_checkpoint(cfg["ckpt"])
    vol = load_volume(cfg["input"])
    pred = model.predict(vol.data.astype(np.float64)[None])[0]
    pred[~brain_mask(vol)] = 0
    save_labelmap(pred, cfg["out"], vol.spacing)
    return [cfg["out"]]


def cmd_postprocess(cfg, jobs):
    from .postprocess import PartitionParams, postprocess
    from .volume import brain_mask, load_labelmap, load_volume, save_labelmap
    vol = load_volume(cfg["volume"])
    pred = load_labelmap(cfg["input"])
    params = PartitionParams(beta=cfg["beta"], zeta=cfg["zeta"], sigma_int=cfg["sigma_int"],
                             alpha_rho=cfg["alpha_rho"], lambda_perim=cfg["lambda_perim"],
                             stride=cfg["stride"], min_enhancing=cfg["min_enhancing"])
    save_labelmap(postprocess(pred, vol, params, brain_mask(vol)), cfg["out"], vol.spacing)
    return [cfg["out"]]


def _external_cases(directory):
    from .harness import Case
    from .volume import brain_mask, load_labelmap, load_volume
    cases = []
    for vpath in sorted(glob.glob(os.path.join(directory, "*.mmv"))):
        lpath = vpath[:-4] + ".mml"
        if not os.path.exists(lpath):
            raise InvalidConfig(f"no label map next to {vpath}")
        vol = load_volume(vpath)
        cases.append(Case(os.path.basename(vpath)[:-4], vol, load_labelmap(lpath), brain_mask(vol)))
    if not cases:
        raise InvalidConfig(f"no .mmv volumes in {directory}")
    return cases


def cmd_evaluate(cfg, jobs):
    from .harness import CmsMethod, load_family, make_cases, robustness_sweep, trend_check
    known = {"cms", "baseline", "octconv", "octconv+swa", "octconv+swa+post"}
    bad = [m for m in cfg["methods"] if m not in known]
    if bad:
        raise InvalidConfig(f"unknown method(s) {bad}; choose from {sorted(known)}")
    methods = {}
    family = None
    for m in cfg["methods"]:
        if m == "cms":
            methods[m] = CmsMethod()
            continue
        if family is None:
            if cfg["ckpt"] is None:
                raise MissingCheckpoint(f"method {m} needs --ckpt")
            family = load_family(cfg["ckpt"])
        methods[m] = family.methods[m]
    if cfg["data"]:
        cases = _external_cases(cfg["data"])
    else:
        cases = make_cases(cfg["phantoms"], cfg["dims"], cfg["phantom_seed0"])
    report = robustness_sweep(methods, cases, cfg["sigmas"], list(range(cfg["seeds"])), jobs=jobs)
    extra = {}
    if cfg["trend"]:
        res = trend_check(report)
        report.manifest["trend"] = {"passed": res.passed, "violations": res.violations}
        extra = {"trend_passed": res.passed}
        print(res.summary())
    print(report.table())
    csv_path = os.path.splitext(cfg["out"])[0] + ".csv"
    report.to_json(cfg["out"])
    report.to_csv(csv_path)
    return [cfg["out"], csv_path]


def cmd_gradcheck(cfg, jobs):
    from .gradsuite import TOLERANCE, format_table, run_suite
    errors = run_suite(cfg["seed"])
    print(format_table(errors))
    outputs = []
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            json.dump(errors, fh, indent=2)
        outputs.append(cfg["out"])
    failed = [k for k, v in errors.items() if not v < TOLERANCE]
    if failed:
        raise GradientMismatch(f"relative error >= {TOLERANCE:g} for: {', '.join(failed)}")
    return outputs


HANDLERS = {
    "phantom": cmd_phantom, "preprocess": cmd_preprocess, "perturb": cmd_perturb,
    "segment-cms": cmd_segment_cms, "train-toy": cmd_train_toy, "predict": cmd_predict,
    "postprocess": cmd_postprocess, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = ns.command
    jobs = getattr(ns, "jobs", None) or os.cpu_count() or 1
    try:
        cfg = resolve(command, ns)
        outputs = HANDLERS[command](cfg, jobs)
        write_manifest(command, cfg, outputs)
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except TumorSegError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        # invalid parameter values from dataclass checks, unreadable paths
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
