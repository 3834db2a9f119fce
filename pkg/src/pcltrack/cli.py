"""Command line entry point: simulate, train, track, eval, ablate."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from .config import ConfigError, Experiment, build_experiment, keys_for, parse_value, read_config
from .core import MOTFormatError, fill_frames, load_mot, write_mot
from .evaluation import DISTANCE_BUCKETS, EvalReport, idf1, match_accuracy_by_distance, occlusion_sweep
from .model import load_checkpoint
from .sim import Scene, generate_scene, load_scene, save_scene
from .track import TrackerError, run_tracker, write_assignment_log
from .train import TrainingAborted, train

log = logging.getLogger("pcltrack")

SECTIONS_FOR = {
    "simulate": ("scene",),
    "train": ("scene", "train"),
    "track": ("tracker",),
    "eval": ("scene", "tracker"),
    "ablate": ("scene", "train", "tracker"),
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _add_config_flags(p: argparse.ArgumentParser, sections) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file; flags override it")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    group = p.add_argument_group("config keys")
    for key, spec in keys_for(sections).items():
        group.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="VALUE", type=_typed(spec), default=None)


def _typed(spec):
    def conv(text):
        try:
            return parse_value(spec, text)
        except ConfigError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    conv.__name__ = spec.name
    return conv


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcltrack", description="Self-supervised multi-object association with path consistency.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate synthetic scenes with ground truth")
    _add_config_flags(p, SECTIONS_FOR["simulate"])

    p = sub.add_parser("train", help="train the matching model")
    p.add_argument("--data", action="append", metavar="PATH", help="scene directory or MOT detection file with features (repeatable); default: simulate from the config")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by train")
    _add_config_flags(p, SECTIONS_FOR["train"])

    p = sub.add_parser("track", help="run the online tracker on a detection file")
    p.add_argument("--det", required=True, metavar="PATH", help="scene directory or MOT detection file")
    p.add_argument("--model", metavar="CKPT", help="trained checkpoint (not needed when blend_weight = 0)")
    _add_config_flags(p, SECTIONS_FOR["track"])

    p = sub.add_parser("eval", help="score tracks against a scene")
    p.add_argument("--scene", required=True, metavar="DIR", help="scene directory written by simulate")
    p.add_argument("--pred", metavar="PATH", help="MOT result file to score")
    p.add_argument("--model", metavar="CKPT", help="also report matching accuracy by distance and the occlusion sweep")
    p.add_argument("--L", metavar="LIST", help="comma-separated occlusion lengths for the sweep")
    _add_config_flags(p, SECTIONS_FOR["eval"])

    p = sub.add_parser("ablate", help="skip-limit or occlusion-length ablation, end to end")
    p.add_argument("--protocol", required=True, choices=("smax", "occlusion"))
    p.add_argument("--L", metavar="LIST", default="0,10,20,30,40,50,60", help="occlusion lengths (occlusion protocol)")
    p.add_argument("--smax_values", metavar="LIST", default="none,4", help="skip limits to compare (smax protocol)")
    p.add_argument("--model", metavar="CKPT", help="use this model instead of training one (occlusion protocol)")
    _add_config_flags(p, SECTIONS_FOR["ablate"])
    return parser


def _experiment(args) -> Experiment:
    # one config file may carry keys for every command; each uses its own
    file_values = read_config(args.config) if args.config else {}
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return build_experiment(file_values, overrides)


def _int_list(text: str, what: str) -> List[Optional[int]]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if part.lower() == "none":
            out.append(None)
            continue
        try:
            out.append(int(part))
        except ValueError:
            raise CliError(f"invalid {what} entry {part!r}") from None
    if not out:
        raise CliError(f"empty {what} list")
    return out


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _load_frames(path: str):
    """Frames and arena from a scene directory or a bare MOT file."""
    _require(path, "input")
    if os.path.isdir(path):
        if os.path.exists(os.path.join(path, "scene.json")):
            scene = load_scene(path)
            return list(scene.clip.frames), (scene.config.arena if scene.config else None)
        path = _require(os.path.join(path, "det.txt"), "detection file")
    frames = load_mot(path)
    if not frames:
        raise CliError(f"no detections in {path}")
    return fill_frames(frames), None


def _scenes(exp: Experiment, count: int, offset: int = 0) -> List[Scene]:
    return [generate_scene(exp.scene_config(offset + i)) for i in range(count)]


def _write_rows(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_simulate(args, exp: Experiment) -> None:
    os.makedirs(args.out, exist_ok=True)
    for i, scene in enumerate(_scenes(exp, exp.num_scenes)):
        directory = os.path.join(args.out, f"scene{i:02d}")
        save_scene(scene, directory)
        print(f"{directory}: {len(scene.clip)} frames, {sum(len(f.real) for f in scene.clip.frames)} detections, {len(scene.gt_occlusions)} occlusions")
    exp.write(os.path.join(args.out, "experiment.cfg"))


def _train_sources(args, exp: Experiment):
    from .core import Clip

    if not args.data:
        return _scenes(exp, exp.num_scenes), None
    sources, arena = [], None
    for path in args.data:
        frames, a = _load_frames(path)
        arena = arena or a
        if len(frames) < 2:
            raise CliError(f"{path}: need at least two frames")
        sources.append(Clip(tuple(frames)))
    return sources, arena


def cmd_train(args, exp: Experiment) -> None:
    if args.resume:
        _require(args.resume, "checkpoint")
    sources, arena = _train_sources(args, exp)
    os.makedirs(args.out, exist_ok=True)
    params, report = train(sources, exp.train_config(), out_dir=args.out, resume=args.resume, arena=arena)
    report.write_csv(os.path.join(args.out, "train_report.csv"))
    exp.write(os.path.join(args.out, "experiment.cfg"))
    last = report.rows[-1] if report.rows else None
    tail = f", final loss {last['total']:.4f}" if last else ""
    print(f"{report.checkpoint}: {len(report.rows)} steps{tail}")


def _maybe_model(path: Optional[str]):
    return load_checkpoint(_require(path, "checkpoint")) if path else None


def cmd_track(args, exp: Experiment) -> None:
    params = _maybe_model(args.model)
    if params is None and exp.tracker.blend_weight > 0:
        raise CliError("--model is required unless blend_weight = 0")
    frames, _ = _load_frames(args.det)
    tracks, assignments = run_tracker(frames, params, exp.tracker)
    os.makedirs(args.out, exist_ok=True)
    write_mot(tracks, os.path.join(args.out, "tracks.txt"))
    write_assignment_log(assignments, os.path.join(args.out, "assignments.csv"))
    print(f"{os.path.join(args.out, 'tracks.txt')}: {len({t for _, t, _ in tracks})} tracks over {len(frames)} frames")


def cmd_eval(args, exp: Experiment) -> None:
    scene = load_scene(_require(args.scene, "scene directory"))
    params = _maybe_model(args.model)
    report = EvalReport()
    if args.pred:
        pred = [(f.frame, d.gt_identity, d.box) for f in load_mot(_require(args.pred, "prediction file")) for d in f.real]
        if any(t is None for _, t, _ in pred):
            raise CliError(f"{args.pred}: every result row needs a track id")
        report.idf1, report.idsw = idf1(scene, pred)
    if params is not None:
        report.accuracy = match_accuracy_by_distance(params, scene, DISTANCE_BUCKETS, exp.train.clip_length)
    if args.L:
        report.idf1_by_L = occlusion_sweep(params, scene, _int_list(args.L, "L"), exp.tracker)
    if not (args.pred or params is not None or args.L):
        raise CliError("nothing to evaluate: pass --pred, --model or --L")
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "eval_report.csv"))
    print(report.summary())


def cmd_ablate(args, exp: Experiment) -> None:
    os.makedirs(args.out, exist_ok=True)
    test = generate_scene(exp.scene_config(exp.eval_seed_offset))
    if args.protocol == "smax":
        rows = []
        train_scenes = _scenes(exp, exp.num_scenes)
        from dataclasses import replace

        for s_max in _int_list(args.smax_values, "smax_values"):
            cfg = replace(exp.train_config(), s_max=s_max)
            params, _ = train(train_scenes, cfg)
            acc = match_accuracy_by_distance(params, test, DISTANCE_BUCKETS, cfg.clip_length)
            label = "none" if s_max is None else str(s_max)
            rows.extend((label, bucket, f"{value:.4f}") for bucket, value in acc.items())
            print(f"s_max={label}: " + "  ".join(f"{b}: {v:5.1f}" for b, v in acc.items()))
        _write_rows(os.path.join(args.out, "ablation_smax.csv"), ["s_max", "bucket", "accuracy"], rows)
        return
    params = _maybe_model(args.model)
    if params is None:
        params, _ = train(_scenes(exp, exp.num_scenes), exp.train_config())
    curves = occlusion_sweep(params, test, _int_list(args.L, "L"), exp.tracker)
    rows = [(name, L, f"{v:.6f}") for name, curve in curves.items() for L, v in curve.items()]
    _write_rows(os.path.join(args.out, "ablation_occlusion.csv"), ["tracker", "L", "idf1"], rows)
    for name, curve in curves.items():
        print(f"{name}: " + "  ".join(f"L={L}: {v * 100:5.1f}" for L, v in curve.items()))


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "track": cmd_track, "eval": cmd_eval, "ablate": cmd_ablate}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"pcltrack: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        exp = _experiment(args)
        COMMANDS[args.command](args, exp)
    except (CliError, ConfigError, MOTFormatError, TrainingAborted, TrackerError) as exc:
        print(f"pcltrack: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"pcltrack: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
