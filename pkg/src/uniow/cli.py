"""Command line interface for the full worldstate pipeline.

Subcommands mirror the library stages:

  gen        synthesize a world (scene file + feature file)
  calibrate  train encoder adapters on a labeled world
  expand     create a task-1 state or grow an existing one
  tune       train the object wildcard, known, or unknown embeddings
  infer      run NMS-free prediction and the unknown filter
  eval       score a detection dump against open-world ground truth

Every command takes --config (INI), repeatable --set section.key=value
overrides, --seed, and --out-dir; the merged effective configuration is
echoed to <out-dir>/effective-config.ini for provenance. Outputs are
written atomically, so a failed run leaves no partial files. The
UNIOW_LOG environment variable (quiet, info, debug) sets stderr log
verbosity.
"""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys

from .config import RunConfig, format_run_config, load_run_config
from .core import Detection, GroundTruth
from .data import Dataset, eval_view, generate, read_scenes, training_view, write_scenes
from .embedding import CategoryStatus, Vocabulary
from .errors import ConfigError, FileFormatError, UniowError
from .fileutil import atomic_write_text
from .infer import filter_unknown, predict, read_detections, write_detections
from .metrics import format_report, owod_report, write_report
from .textenc import ToyTextEncoder, load_encoder, save_encoder
from .train import TrainLogger, calibrate, tune_known, tune_unknown, tune_wildcard_obj
from .worldstate import TaskState, expand, initial_state, load_state, save_state

logger = logging.getLogger("uniow")

_LOG_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "quiet": logging.ERROR,
    "": logging.WARNING,
}


def _setup_logging() -> None:
    raw = os.environ.get("UNIOW_LOG", "").strip().lower()
    level = _LOG_LEVELS.get(raw, logging.WARNING)
    logging.basicConfig(
        stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s"
    )
    logger.setLevel(level)


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="override world and train seeds")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        dest="overrides",
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    p.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")


def _prepare(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config, args.overrides, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    atomic_write_text(
        os.path.join(args.out_dir, "effective-config.ini"), format_run_config(cfg)
    )
    return cfg


def _out_path(args: argparse.Namespace, explicit: str | None, default_name: str) -> str:
    return explicit if explicit else os.path.join(args.out_dir, default_name)


def _csv_names(raw: str) -> list[str]:
    names = [n.strip() for n in raw.split(",") if n.strip()]
    if not names:
        raise ConfigError(f"no names in {raw!r}")
    return names


def _dataset_dim(ds: Dataset) -> int:
    for sc in ds.scenes:
        if sc.anchors:
            return sc.anchors[0].feature.shape[0]
    raise ConfigError("dataset has no anchors; cannot size the encoder")


def _current_known_names(state: TaskState) -> list[str]:
    return [
        e.name
        for e in state.vocab.entries
        if e.status == CategoryStatus.CURRENT_KNOWN
    ]


def _run_logged(args: argparse.Namespace, log_name: str, fn):
    """Run fn(logger) buffering its training log, then write it whole."""
    buf = io.StringIO()
    result = fn(TrainLogger(buf))
    atomic_write_text(os.path.join(args.out_dir, log_name), buf.getvalue())
    return result


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = _prepare(args)
    ds = generate(cfg.world)
    scenes_path = _out_path(args, args.scenes_out, "scenes.txt")
    features_path = _out_path(args, args.features_out, "features.uowf")
    write_scenes(ds, scenes_path, features_path)
    logger.info("wrote %d scenes to %s", len(ds.scenes), scenes_path)
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = _prepare(args)
    ds = read_scenes(args.scenes, args.features)
    names = _csv_names(args.names) if args.names else list(ds.known_names)
    scenes = training_view(ds, names, names)
    enc = ToyTextEncoder(
        dim=_dataset_dim(ds), rank=cfg.textenc.rank, seed=cfg.train.seed
    )
    logger.info("calibrating %d categories on %d scenes", len(names), len(scenes))
    trained = _run_logged(
        args,
        "calibrate.log",
        lambda lg: calibrate(scenes, names, enc, cfg.train, cfg.assign, cfg.score, lg),
    )
    save_encoder(trained, _out_path(args, args.enc_out, "encoder.uowe"))
    return 0


def cmd_expand(args: argparse.Namespace) -> int:
    _prepare(args)
    enc = load_encoder(args.enc)
    names = _csv_names(args.names)
    if args.state_in:
        state = expand(load_state(args.state_in), names, enc)
    else:
        state = initial_state(names, enc)
    logger.info("task %d with %d categories", state.task_index, len(state.vocab))
    save_state(state, _out_path(args, args.state_out, "state.uows"))
    return 0


def cmd_tune(args: argparse.Namespace) -> int:
    cfg = _prepare(args)
    ds = read_scenes(args.scenes, args.features)
    state = load_state(args.state_in)
    scenes = training_view(ds, state.vocab.names(), _current_known_names(state))
    log_name = f"tune-{args.stage}.log"
    if args.stage == "obj":
        if not args.enc:
            raise ConfigError("--enc is required for --stage obj")
        enc = load_encoder(args.enc)
        t_obj = _run_logged(
            args,
            log_name,
            lambda lg: tune_wildcard_obj(scenes, enc, cfg.train, cfg.assign, cfg.score, lg),
        )
        vocab = Vocabulary(state.vocab.entries, t_obj, state.vocab.wildcard_unk)
    elif args.stage == "known":
        vocab = _run_logged(
            args,
            log_name,
            lambda lg: tune_known(scenes, state.vocab, cfg.train, cfg.assign, cfg.score, lg),
        )
    else:
        enc = load_encoder(args.enc) if args.enc else None
        vocab = _run_logged(
            args,
            log_name,
            lambda lg: tune_unknown(
                scenes, state.vocab, cfg.train, cfg.assign, cfg.score, enc, lg
            ),
        )
    save_state(
        TaskState(state.task_index, vocab, state.history),
        _out_path(args, args.state_out, "state.uows"),
    )
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _prepare(args)
    ds = read_scenes(args.scenes, args.features)
    state = load_state(args.state)
    rows: list[tuple[str, Detection]] = []
    for sc in ds.scenes:
        dets = filter_unknown(predict(sc, state.vocab, cfg.score, cfg.infer), cfg.infer)
        rows.extend((sc.id, d) for d in dets)
    logger.info("%d detections over %d scenes", len(rows), len(ds.scenes))
    write_detections(rows, _out_path(args, args.dets_out, "detections.tsv"))
    return 0


def _read_labeling(path: str) -> tuple[list[str], dict[int, CategoryStatus]]:
    """Parse 'id name pk|ck' lines into a vocabulary-order labeling."""
    names: list[str] = []
    labeling: dict[int, CategoryStatus] = {}
    roles = {"pk": CategoryStatus.PREVIOUSLY_KNOWN, "ck": CategoryStatus.CURRENT_KNOWN}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2].lower() not in roles:
                raise FileFormatError(f"{path}:{lineno}: expected 'id name pk|ck'")
            try:
                cid = int(parts[0])
            except ValueError as e:
                raise FileFormatError(f"{path}:{lineno}: bad id {parts[0]!r}") from e
            if cid != len(names):
                raise FileFormatError(
                    f"{path}:{lineno}: ids must be dense and ascending, got {cid}"
                )
            names.append(parts[1])
            labeling[cid] = roles[parts[2].lower()]
    if not names:
        raise FileFormatError(f"{path}: no categories")
    return names, labeling


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _prepare(args)
    ds = read_scenes(args.scenes, args.features)
    if args.state:
        state = load_state(args.state)
        names = state.vocab.names()
        labeling = {e.id: e.status for e in state.vocab.entries}
    else:
        names, labeling = _read_labeling(args.labeling)
    view = eval_view(ds, names)
    gts_by_scene: dict[str, list[GroundTruth]] = {sc.id: sc.ground_truth for sc in view}
    dets_by_scene: dict[str, list[Detection]] = {}
    for scene_id, det in read_detections(args.dets):
        dets_by_scene.setdefault(scene_id, []).append(det)
    report = owod_report(dets_by_scene, gts_by_scene, labeling, cfg.eval)
    write_report(report, _out_path(args, args.report_out, "report.txt"))
    sys.stdout.write(format_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uniow",
        description="Open-world detection decision layer over precomputed features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic world")
    _common_flags(p)
    p.add_argument("--scenes-out", help="scene file path (default: <out-dir>/scenes.txt)")
    p.add_argument(
        "--features-out", help="feature file path (default: <out-dir>/features.uowf)"
    )
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("calibrate", help="train encoder adapters on a labeled world")
    _common_flags(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--names", help="comma-separated category names (default: known block)")
    p.add_argument("--enc-out", help="checkpoint path (default: <out-dir>/encoder.uowe)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("expand", help="create or grow a task state")
    _common_flags(p)
    p.add_argument("--enc", required=True, help="encoder checkpoint")
    p.add_argument("--names", required=True, help="comma-separated new category names")
    p.add_argument("--state-in", help="existing state to expand (omit for task 1)")
    p.add_argument("--state-out", help="state path (default: <out-dir>/state.uows)")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("tune", help="train wildcard or category embeddings")
    _common_flags(p)
    p.add_argument("--stage", required=True, choices=("obj", "known", "unknown"))
    p.add_argument("--scenes", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--state-in", required=True)
    p.add_argument("--enc", help="encoder checkpoint (required for --stage obj)")
    p.add_argument("--state-out", help="state path (default: <out-dir>/state.uows)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("infer", help="predict detections for every scene")
    _common_flags(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--dets-out", help="dump path (default: <out-dir>/detections.tsv)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a detection dump")
    _common_flags(p)
    p.add_argument("--dets", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--features", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--state", help="task state supplying ids and pk/ck roles")
    group.add_argument("--labeling", help="labeling file: 'id name pk|ck' per line")
    p.add_argument("--report-out", help="report path (default: <out-dir>/report.txt)")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UniowError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
