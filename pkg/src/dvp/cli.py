"""Command line entry point: ``dvp stabilize|propagate|evaluate|toy``.

Settings come from an optional INI file (``--config``) whose sections and
keys are listed in ``dvp --help``; command-line flags override the file.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import data as dvp_data
from .data import DataError, PairedVideo
from .losses import LossConfig, LossError
from .metrics import (
    OCC_ALPHA1,
    OCC_ALPHA2,
    FarnebackFlow,
    FileFlow,
    MetricError,
    ZeroFlow,
    evaluate,
    mean_intensity_trace,
    plot_mean_intensity,
)
from .network import NetError, NetSpec, save_checkpoint
from .propagation import (
    PropagationConfig,
    propagate_pppl,
    propagate_segmentation,
    train_reference_only,
)
from .toy import ToyConfig, ToyError, run_toy, spread, write_artifacts
from .trainer import NumericError, TrainConfig, TrainError, infer_video, stabilize

log = logging.getLogger("dvp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SUBDIRS = ("frames_main", "frames_minor", "metrics", "checkpoints", "plots")


class ConfigError(ValueError):
    pass


# -- value parsers -----------------------------------------------------------


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_str(s: str):
    s = s.strip()
    return s or None


def _opt_float(s: str):
    s = s.strip()
    return float(s) if s else None


def _int_list(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _str_list(s: str) -> tuple:
    return tuple(v for v in s.replace(",", " ").split())


def _opt_pair(s: str):
    vals = _int_list(s)
    if not vals:
        return None
    if len(vals) != 2:
        raise ValueError(f"expected two integers, got {s!r}")
    return vals


def _show(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


_T, _P = TrainConfig(), PropagationConfig()
_N, _Y = NetSpec(), ToyConfig()

# section -> key -> (default, parser, help)
SCHEMA = {
    "run": {
        "input_dir": (None, _opt_str, "input frames (PNG)"),
        "processed_dir": (None, _opt_str, "processed frames (references for propagate)"),
        "frames_dir": (None, _opt_str, "frames to score with evaluate"),
        "out_dir": ("dvp-out", str, "output root"),
        "pattern": ("*.png", str, "frame file glob"),
        "window": (300, int, "frames per independently trained clip"),
        "jobs": (1, int, "worker processes for independent clips"),
        "flow_source": ("none", str, "none | zero | farneback | manifest"),
        "flow_manifest": (None, _opt_str, "CSV of precomputed flows (t,s,path)"),
        "reference_indices": ((0,), _int_list, "frame indices of the reference files, in file order"),
        "num_classes": (0, int, "segmentation classes; 0 infers from the masks"),
        "seed": (0, int, "seed for weights, sampling and augmentation"),
    },
    "network": {
        "backbone": (_N.backbone, str, "unet | resunet | fcn"),
        "depth": (_N.depth, int, "number of down-sampling stages"),
        "base_channels": (_N.base_channels, int, "channels after the first block"),
        "final_activation": (_N.final_activation, str, "sigmoid | softmax | none"),
    },
    "train": {
        "learning_rate": (_T.learning_rate, float, "Adam step size"),
        "epochs": (_T.epochs, int, "passes over the frame pairs"),
        "loss": (_T.loss.kind, str, "l1 | l2 | perceptual"),
        "feature_weights": (None, _opt_str, "VGG-19 state dict for the perceptual loss"),
        "perceptual_layers": (("relu1_2", "relu2_2", "relu3_2"), _str_list, "feature layers"),
        "perceptual_weight": (1.0, float, "weight of the feature term"),
        "irt": (_T.irt, _bool, "two heads with per-pixel confidence routing"),
        "delta": (_T.delta, float, "confidence floor"),
        "warmup_iterations": (_T.warmup_iterations, int, "main-mode warm-up steps"),
        "main_mode_frame": (_T.main_mode_frame, int, "frame whose mode the main head keeps"),
        "confidence_update": (_T.confidence_update, str, "iteration | epoch"),
        "coarse_to_fine": (_T.coarse_to_fine, _bool, "train the first part at reduced resolution"),
        "coarse_scale": (_T.coarse_scale, float, "resolution factor of the coarse phase"),
        "coarse_fraction": (_T.coarse_fraction, float, "share of epochs in the coarse phase"),
        "init_checkpoint": (None, _opt_str, "start from this checkpoint"),
        "auto_stop": (_T.auto_stop, _bool, "stop when the epoch loss flattens"),
        "auto_stop_window": (_T.auto_stop_window, int, "epochs in the flatness window"),
        "auto_stop_threshold": (None, _opt_float, "variance threshold; empty picks by loss kind"),
    },
    "propagation": {
        "K": (_P.K, int, "training steps per queued frame"),
        "mode": ("auto", str, "auto | pppl | reference (auto: pppl for one reference at frame 0)"),
        "augmentation": (_P.augmentation, _str_list, "crop, flip, rotate, copy_paste"),
        "crop_size": (None, _opt_pair, "crop height, width; empty disables cropping"),
        "task": (_P.task, str, "color | style | segmentation"),
        "iterations": (_P.iterations, int, "steps for reference-only training"),
        "learning_rate": (_P.learning_rate, float, "Adam step size"),
        "sampling": (_P.sampling, str, "uniform | recency"),
        "reinfer": (_P.reinfer, _bool, "re-run the final network on every frame"),
    },
    "toy": {
        "n_frames": (_Y.n_frames, int, "points standing in for frames"),
        "noise_scale": (_Y.noise_scale, float, "target noise"),
        "bimodal": (_Y.bimodal, _bool, "alternate targets between two clusters"),
        "cluster_separation": (_Y.cluster_separation, float, "distance between the clusters"),
        "iterations": (_Y.iterations, int, "training steps"),
        "snapshot_iters": (_Y.snapshot_iters, _int_list, "steps at which outputs are recorded"),
        "input_spread": (_Y.input_spread, float, "half-width of the input cloud"),
        "hidden": (_Y.hidden, int, "MLP width"),
        "learning_rate": (_Y.learning_rate, float, "Adam step size"),
    },
    "metrics": {
        "alpha1": (OCC_ALPHA1, float, "occlusion check, relative term"),
        "alpha2": (OCC_ALPHA2, float, "occlusion check, absolute term"),
        "reduce": ("sum", str, "channel reduction of the warping error: sum | mean"),
    },
}


def defaults() -> dict:
    return {sec: {k: v[0] for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def read_config(path) -> dict:
    """Parse an INI file against :data:`SCHEMA`; unknown sections or keys are errors."""
    cfg = defaults()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                cfg[sec][key] = SCHEMA[sec][key][1](raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from exc
    return cfg


def help_epilog() -> str:
    lines = ["config file keys (INI sections) and defaults:"]
    for sec, keys in SCHEMA.items():
        lines.append(f"  [{sec}]")
        for k, (d, _, h) in keys.items():
            lines.append(f"    {k} = {_show(d)}  # {h}")
    lines.append("exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure")
    return "\n".join(lines)


# -- argument parsing --------------------------------------------------------

# flag dest -> (section, key)
FLAG_TARGETS = {
    "input_dir": ("run", "input_dir"),
    "processed_dir": ("run", "processed_dir"),
    "frames_dir": ("run", "frames_dir"),
    "out_dir": ("run", "out_dir"),
    "window": ("run", "window"),
    "jobs": ("run", "jobs"),
    "flow_source": ("run", "flow_source"),
    "flow_manifest": ("run", "flow_manifest"),
    "references": ("run", "reference_indices"),
    "seed": ("run", "seed"),
    "epochs": ("train", "epochs"),
    "irt": ("train", "irt"),
    "delta": ("train", "delta"),
    "auto_stop": ("train", "auto_stop"),
    "coarse_to_fine": ("train", "coarse_to_fine"),
    "init_checkpoint": ("train", "init_checkpoint"),
    "K": ("propagation", "K"),
    "task": ("propagation", "task"),
    "bimodal": ("toy", "bimodal"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dvp", description=__doc__.splitlines()[0],
                                epilog=help_epilog(),
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"dvp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="INI config file (see dvp --help for keys)")
    g.add_argument("--out-dir", dest="out_dir", help="output root (default dvp-out)")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("-v", "--verbose", action="count", default=0)

    def flag(parser, *names, **kw):
        parser.add_argument(*names, default=None, **kw)

    data_args = argparse.ArgumentParser(add_help=False)
    flag(data_args, "--input-dir", dest="input_dir", help="input frames directory")
    flag(data_args, "--processed-dir", dest="processed_dir", help="processed frames directory")
    flag(data_args, "--flow-source", dest="flow_source",
         choices=["none", "zero", "farneback", "manifest"], help="flow for the warping error")
    flag(data_args, "--flow-manifest", dest="flow_manifest", help="precomputed flow manifest CSV")

    train_args = argparse.ArgumentParser(add_help=False)
    flag(train_args, "--epochs", type=int, help="training epochs (default 25)")
    flag(train_args, "--init-checkpoint", dest="init_checkpoint", help="checkpoint to start from")

    s = sub.add_parser("stabilize", parents=[common, data_args, train_args],
                       help="remove flicker from a processed video")
    flag(s, "--irt", action=argparse.BooleanOptionalAction, help="dual-head confidence training")
    flag(s, "--delta", type=float, help="confidence floor (default 0.02)")
    flag(s, "--auto-stop", dest="auto_stop", action="store_true", help="stop when the loss flattens")
    flag(s, "--coarse-to-fine", dest="coarse_to_fine", action="store_true",
         help="train the first half of the epochs at half resolution")
    flag(s, "--window", type=int, help="frames per independently trained clip (default 300)")
    flag(s, "--jobs", type=int, help="worker processes for clips (default 1)")

    pr = sub.add_parser("propagate", parents=[common, data_args, train_args],
                        help="propagate reference frames or masks to the whole video")
    flag(pr, "--references", type=_int_list, help="reference frame indices, e.g. '0,10'")
    flag(pr, "--K", dest="K", type=int, help="steps per queued frame (default 100)")
    flag(pr, "--task", choices=["color", "style", "segmentation"], help="propagation task")

    ev = sub.add_parser("evaluate", parents=[common, data_args], help="score a video")
    flag(ev, "--frames-dir", dest="frames_dir", help="frames to score")

    ty = sub.add_parser("toy", parents=[common], help="two-dimensional consistency toy")
    flag(ty, "--bimodal", action=argparse.BooleanOptionalAction, help="two target clusters")
    flag(ty, "--irt", action=argparse.BooleanOptionalAction, help="dual-head training")
    return p


def resolve_config(args) -> dict:
    cfg = read_config(args.config)
    for dest, (sec, key) in FLAG_TARGETS.items():
        v = getattr(args, dest, None)
        if v is not None:
            cfg[sec][key] = v
    if getattr(args, "flow_manifest", None) and getattr(args, "flow_source", None) is None:
        cfg["run"]["flow_source"] = "manifest"
    return cfg


# -- builders ----------------------------------------------------------------


def loss_config(t: dict) -> LossConfig:
    if t["loss"] == "perceptual":
        return LossConfig.perceptual(t["feature_weights"] or "", t["perceptual_layers"],
                                     t["perceptual_weight"])
    return LossConfig(t["loss"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    skip = {"loss", "feature_weights", "perceptual_layers", "perceptual_weight"}
    kw = {k: v for k, v in t.items() if k not in skip}
    return TrainConfig(loss=loss_config(t), seed=cfg["run"]["seed"], **kw)


def net_spec(cfg: dict, c_in: int, c_out: int, heads: int = 1, activation=None) -> NetSpec:
    n = cfg["network"]
    return NetSpec(in_channels=c_in, out_channels_per_head=c_out, heads=heads,
                   backbone=n["backbone"], depth=n["depth"], base_channels=n["base_channels"],
                   final_activation=activation or n["final_activation"])


def propagation_config(cfg: dict) -> PropagationConfig:
    p = cfg["propagation"]
    t = cfg["train"]
    loss = LossConfig("cross_entropy") if p["task"] == "segmentation" else loss_config(t)
    return PropagationConfig(K=p["K"], augmentation=p["augmentation"], crop_size=p["crop_size"],
                             task=p["task"], iterations=p["iterations"],
                             learning_rate=p["learning_rate"], seed=cfg["run"]["seed"], loss=loss,
                             sampling=p["sampling"], reinfer=p["reinfer"],
                             init_checkpoint=t["init_checkpoint"])


def flow_source(cfg: dict, required: bool = False):
    kind = cfg["run"]["flow_source"]
    if kind == "none":
        if required:
            raise ConfigError("a flow source is needed: set --flow-source or --flow-manifest")
        return None
    if kind == "zero":
        return ZeroFlow()
    if kind == "farneback":
        return FarnebackFlow()
    if kind == "manifest":
        if not cfg["run"]["flow_manifest"]:
            raise ConfigError("flow_source=manifest needs flow_manifest")
        return FileFlow(cfg["run"]["flow_manifest"])
    raise ConfigError(f"unknown flow source {kind!r}")


def metric_kwargs(cfg: dict) -> dict:
    m = cfg["metrics"]
    if m["reduce"] not in ("sum", "mean"):
        raise ConfigError(f"unknown reduce {m['reduce']!r}; choose sum or mean")
    return {"reduce": m["reduce"], "alpha1": m["alpha1"], "alpha2": m["alpha2"]}


def _require(cfg: dict, key: str) -> str:
    v = cfg["run"][key]
    if not v:
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return v


def make_layout(out_dir) -> dict:
    root = Path(out_dir)
    dirs = {name: root / name for name in SUBDIRS}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def write_manifest(out_dir, command: str, cfg: dict, argv) -> Path:
    path = Path(out_dir) / "run-manifest.json"
    doc = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "seed": cfg["run"]["seed"],
        "config": {sec: {k: _show(v) for k, v in keys.items()} for sec, keys in cfg.items()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _write_report(report, dirs, traces: dict) -> None:
    report.write(dirs["metrics"])
    plot_mean_intensity(traces, dirs["plots"] / "mean_intensity.png")
    log.info("%s", report.summary())


# -- commands ----------------------------------------------------------------


def cmd_stabilize(cfg: dict) -> int:
    run = cfg["run"]
    inputs = dvp_data.load_sequence(_require(cfg, "input_dir"), run["pattern"])
    processed = dvp_data.load_sequence(_require(cfg, "processed_dir"), run["pattern"])
    if len(inputs) != len(processed):
        raise DataError(f"{len(inputs)} input frames but {len(processed)} processed frames")
    pv = PairedVideo.full(inputs, processed.frames)
    tcfg = train_config(cfg)
    spec = net_spec(cfg, inputs.shape[2], processed.shape[2], 2 if tcfg.irt else 1)
    flows = flow_source(cfg)
    if run["window"] < 2:
        raise ConfigError("window must be at least 2")
    dirs = make_layout(run["out_dir"])
    main, minor, results = stabilize(pv, spec, tcfg, run["window"], max(1, run["jobs"]),
                                     checkpoint_dir=dirs["checkpoints"])
    dvp_data.save_sequence(main, dirs["frames_main"])
    if minor is not None:
        dvp_data.save_sequence(minor, dirs["frames_minor"])
    with open(dirs["metrics"] / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip", "epoch", "mean_loss", "stopped_reason"])
        for i, r in enumerate(results):
            for e, loss in enumerate(r.loss_history, 1):
                w.writerow([i, e, repr(loss), r.stopped_reason])
    if flows is not None:
        report = evaluate(main, inputs, flows, processed, **metric_kwargs(cfg))
        traces = {"input": inputs, "processed": processed, "output": main}
        _write_report(report, dirs, {k: mean_intensity_trace(v) for k, v in traces.items()})
    return EXIT_OK


def cmd_propagate(cfg: dict) -> int:
    run = cfg["run"]
    refs = tuple(run["reference_indices"])
    if not refs:
        raise ConfigError("no reference frames given")
    if len(set(refs)) != len(refs):
        raise ConfigError(f"duplicate reference indices {refs}")
    pcfg = propagation_config(cfg)
    inputs = dvp_data.load_sequence(_require(cfg, "input_dir"), run["pattern"])
    ref_dir = _require(cfg, "processed_dir")
    if pcfg.task == "segmentation":
        targets = dvp_data.load_label_sequence(ref_dir, run["pattern"], run["num_classes"] or None)
    else:
        targets = list(dvp_data.load_sequence(ref_dir, run["pattern"]).frames)
    if len(targets) != len(refs):
        raise DataError(f"{len(targets)} reference files for {len(refs)} reference indices")
    if max(refs) >= len(inputs) or min(refs) < 0:
        raise ConfigError(f"reference indices {refs} outside the {len(inputs)}-frame video")
    pv = PairedVideo.sparse(inputs, dict(zip(refs, targets)))
    mode = cfg["propagation"]["mode"]
    if mode not in ("auto", "pppl", "reference"):
        raise ConfigError(f"unknown propagation mode {mode!r}")
    use_pppl = mode == "pppl" or (mode == "auto" and refs == (0,))
    c_out = targets[0].shape[2]
    dirs = make_layout(run["out_dir"])
    if pcfg.task == "segmentation":
        spec = net_spec(cfg, inputs.shape[2], c_out, activation="softmax")
        _, masks = propagate_segmentation(pv, spec, pcfg, pppl=use_pppl)
        dvp_data.save_label_sequence(masks, dirs["frames_main"])
        return EXIT_OK
    spec = net_spec(cfg, inputs.shape[2], c_out)
    if use_pppl:
        outputs, _, state = propagate_pppl(pv, spec, pcfg)
    else:
        state = train_reference_only(pv, spec, pcfg)
        outputs = infer_video(state, inputs)[0]
    save_checkpoint(state.net, dirs["checkpoints"] / "final.ckpt")
    dvp_data.save_sequence(outputs, dirs["frames_main"])
    flows = flow_source(cfg)
    if flows is not None:
        report = evaluate(outputs, inputs, flows, **metric_kwargs(cfg))
        _write_report(report, dirs, {"output": mean_intensity_trace(outputs)})
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    run = cfg["run"]
    frames = dvp_data.load_sequence(_require(cfg, "frames_dir"), run["pattern"])
    inputs = dvp_data.load_sequence(_require(cfg, "input_dir"), run["pattern"])
    processed = None
    if run["processed_dir"]:
        processed = dvp_data.load_sequence(run["processed_dir"], run["pattern"])
        if len(processed) != len(frames):
            raise DataError(f"{len(frames)} frames but {len(processed)} processed frames")
    if len(inputs) != len(frames):
        raise DataError(f"{len(frames)} frames but {len(inputs)} input frames")
    flows = flow_source(cfg, required=True)
    dirs = make_layout(run["out_dir"])
    report = evaluate(frames, inputs, flows, processed, **metric_kwargs(cfg))
    traces = {"frames": mean_intensity_trace(frames)}
    if processed is not None:
        traces["processed"] = mean_intensity_trace(processed)
    _write_report(report, dirs, traces)
    print(report.summary())
    return EXIT_OK


def cmd_toy(cfg: dict) -> int:
    t = cfg["toy"]
    tcfg = ToyConfig(seed=cfg["run"]["seed"], **t)
    irt = cfg["train"]["irt"]
    run = run_toy(tcfg, irt=irt)
    dirs = make_layout(cfg["run"]["out_dir"])
    stem = "toy_" + ("bimodal" if tcfg.bimodal else "unimodal") + ("_irt" if irt else "")
    paths = write_artifacts(run, dirs["plots"], stem)
    summary = {
        "target_spread": spread(run.data.targets),
        "snapshots": {str(s.iteration): {"spread": spread(s.main)} for s in run.snapshots},
        "artifacts": [str(p) for p in paths],
    }
    (dirs["metrics"] / f"{stem}.json").write_text(json.dumps(summary, indent=2) + "\n")
    csv_path = paths[0]
    csv_path.replace(dirs["metrics"] / csv_path.name)
    return EXIT_OK


COMMANDS = {"stabilize": cmd_stabilize, "propagate": cmd_propagate,
            "evaluate": cmd_evaluate, "toy": cmd_toy}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        write_manifest(cfg["run"]["out_dir"], args.command, cfg, argv)
        torch.manual_seed(cfg["run"]["seed"])
        return COMMANDS[args.command](cfg)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, MetricError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (ConfigError, TrainError, LossError, NetError, ToyError, TypeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
