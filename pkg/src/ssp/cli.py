"""Command-line entry point: ``ssp <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 contract violation.
"""

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from ssp import __version__
from ssp.errors import ContractError, FormatError
from ssp.io import (
    ensure_dir,
    load_checkpoint,
    load_dataset,
    read_pgm,
    save_checkpoint,
    tensor_read,
    tensor_write,
    write_dataset_index,
    write_pgm,
    write_video,
)
from ssp.losses import LossWeights
from ssp.pipeline import evaluate, frame_logits, infer_video, pair_homography, prepare_teacher
from ssp.propagation import PropagatorState, video_step
from ssp.synth import SceneConfig, generate_sequence
from ssp.tensor import argmax_channels
from ssp.training import TrainConfig, train

log = logging.getLogger("ssp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONTRACT = 0, 1, 2, 3
PREDICTIONS = "predictions.json"
DISTILL = "distill.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: not found") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- synth -------------------------------------------------------------------

def scene_config_from_json(raw):
    """Split a synth config document into (SceneConfig, number of videos)."""
    if not isinstance(raw, dict):
        raise FormatError("synth config must be a JSON object")
    raw = dict(raw)
    count = raw.pop("num_videos", 1)
    if not isinstance(count, int) or count < 1:
        raise FormatError("num_videos must be a positive integer")
    known = {f.name for f in dataclasses.fields(SceneConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise FormatError(f"unknown synth config keys: {', '.join(unknown)}")
    for key in ("sprite_size", "sprite_speed"):
        if key in raw:
            raw[key] = tuple(raw[key])
    try:
        return SceneConfig(**raw), count
    except TypeError as exc:
        raise FormatError(f"bad synth config: {exc}") from exc


def cmd_synth(args):
    cfg, count = scene_config_from_json(_read_json(args.config))
    out = ensure_dir(args.out)
    names = []
    for i in range(count):
        c = dataclasses.replace(cfg, seed=cfg.seed + i)
        name = f"seq_{c.seed:04d}"
        write_video(out / name, generate_sequence(c), name)
        names.append(name)
        log.info("wrote %s", name)
    write_dataset_index(out, names, dataclasses.asdict(cfg) | {"num_videos": count})
    print(f"synth: {count} video(s) -> {out}")
    return EXIT_OK


# -- distill-prep --------------------------------------------------------------

def cmd_distill_prep(args):
    out = ensure_dir(args.out)
    index = {
        "data": str(Path(args.data).resolve()),
        "teacher_margin": args.teacher_margin,
        "corruption": args.corruption,
        "seed": args.seed,
        "videos": {},
    }
    for video, dense in load_dataset(args.data, with_dense=True):
        if dense is None:
            raise FormatError(f"{video.name}: manifest has no dense_labels to build a teacher from")
        prepare_teacher(video, dense, args.teacher_margin, args.corruption, args.seed)
        vdir = ensure_dir(out / video.name)
        entries = {}
        for k, (t_cur, t_past) in sorted(video.teacher.items()):
            cur, past = f"{video.name}/teacher_{k:04d}_cur.sten", f"{video.name}/teacher_{k:04d}_past.sten"
            tensor_write(out / cur, t_cur.astype(np.float32))
            tensor_write(out / past, t_past.astype(np.float32))
            entries[str(k)] = [cur, past]
        index["videos"][video.name] = entries
        log.info("teacher for %s: %d pairs in %s", video.name, len(entries), vdir)
    _write_json(out / DISTILL, index)
    print(f"distill-prep: {len(index['videos'])} video(s) -> {out}")
    return EXIT_OK


def attach_teacher(videos, teacher_dir):
    d = Path(teacher_dir)
    index = _read_json(d / DISTILL)
    try:
        table = index["videos"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{d / DISTILL}: no 'videos' table") from exc
    for v in videos:
        if v.name not in table:
            raise FormatError(f"{d / DISTILL}: no teacher for video {v.name}")
        v.teacher = {int(k): (tensor_read(d / c), tensor_read(d / p)) for k, (c, p) in table[v.name].items()}
    return videos


# -- train -------------------------------------------------------------------

def cmd_train(args):
    if args.mode == "kd" and not args.teacher:
        raise UsageError("--mode kd needs --teacher <distill-prep output>")
    videos = load_dataset(args.data)
    if args.teacher:
        attach_teacher(videos, args.teacher)
    config = TrainConfig(
        lr=args.lr,
        momentum=args.momentum,
        epochs=args.epochs,
        seed=args.seed,
        mode=args.mode,
        one_step=args.one_step,
        registration=not args.no_registration,
        similarity=args.similarity,
    )
    weights = LossWeights(lambda_base=args.lam, lambda_kd=args.lambda_kd, tau=args.tau)
    result = train(videos, config, weights)
    header = {
        "mode": args.mode,
        "seed": args.seed,
        "epoch": args.epochs,
        "lambda": args.lam,
        "lambda_kd": args.lambda_kd,
        "tau": args.tau,
        "one_step": args.one_step,
        "registration": not args.no_registration,
        "epoch_losses": result.epoch_losses,
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, result.layer, result.head, header)
    print(f"train: {len(result.epoch_losses)} epochs, final loss {result.epoch_losses[-1]:.6f} -> {args.out}")
    return EXIT_OK


# -- infer -------------------------------------------------------------------

def cmd_infer(args):
    layer, head, meta = load_checkpoint(args.ckpt)
    videos = load_dataset(args.data)
    out = ensure_dir(args.out)
    record = {
        "ckpt": Path(args.ckpt).name,
        "registration": not args.no_registration,
        "alpha_zero": args.alpha_zero,
        "videos": {},
    }
    for video in videos:
        if head.num_classes != video.num_classes:
            raise ContractError(f"{video.name}: checkpoint predicts {head.num_classes} classes, data has {video.num_classes}")
        vdir = ensure_dir(out / video.name)
        logits = infer_video(video, layer, head, not args.no_registration, args.alpha_zero)
        files = []
        for k, lg in enumerate(logits):
            tensor_write(vdir / f"logits_{k:04d}.sten", lg.astype(np.float32))
            write_pgm(vdir / f"labels_{k:04d}.pgm", argmax_channels(lg))
            files.append(f"{video.name}/labels_{k:04d}.pgm")
        record["videos"][video.name] = files
    _write_json(out / PREDICTIONS, record)
    print(f"infer: {len(videos)} video(s) -> {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def load_predictions(pred_dir, videos):
    d = Path(pred_dir)
    table = _read_json(d / PREDICTIONS).get("videos", {})
    preds = []
    for v in videos:
        files = table.get(v.name)
        if files is None:
            raise FormatError(f"{d / PREDICTIONS}: no predictions for video {v.name}")
        if len(files) != len(v):
            raise FormatError(f"{v.name}: {len(files)} predicted frames, video has {len(v)}")
        maps = [read_pgm(d / f).astype(np.int64) for f in files]
        if any(m.shape != v.shape for m in maps):
            raise FormatError(f"{v.name}: prediction size differs from the frames")
        preds.append(maps)
    return preds


def eval_report(records, summary):
    return {
        "videos": [
            {k: r[k] for k in ("video", "miou", "tc", "pairs", "annotated")} for r in records
        ],
        "summary": summary,
    }


def format_report(report):
    lines = [f"{'video':<16} {'mIoU':>8} {'TC':>8} {'pairs':>6}"]
    for r in report["videos"]:
        lines.append(f"{r['video']:<16} {r['miou']:8.4f} {r['tc']:8.4f} {r['pairs']:6d}")
    s = report["summary"]
    lines.append(f"{'all':<16} {s['miou']:8.4f} {s['tc']:8.4f} {s['videos']:6d} videos")
    return "\n".join(lines)


def cmd_eval(args):
    videos = load_dataset(args.data)
    if any(v.flows_fwd is None for v in videos):
        raise FormatError("eval needs forward flows in every manifest for TC")
    preds = load_predictions(args.pred, videos)
    records, summary = evaluate(videos, preds)
    report = eval_report(records, summary)
    print(format_report(report))
    if args.report:
        _write_json(args.report, report)
    return EXIT_OK


# -- gradcheck / bench ----------------------------------------------------------

def cmd_gradcheck(args):
    from ssp.gradsuite import run_suite

    t0 = time.perf_counter()
    reports = run_suite(seed=args.seed, instances=args.instances)
    failed = 0
    for name, rep in reports.items():
        status = "ok" if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{name:<20} max rel err {rep.max_rel_error:.2e}  checked {rep.checked:5d}  kinks skipped {rep.skipped:3d}  {status}")
    print(f"gradcheck: {len(reports) - failed}/{len(reports)} passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if not failed else EXIT_CONTRACT


def cmd_bench(args):
    if args.steps < 1 or args.warmup < 0:
        raise UsageError("--steps must be positive and --warmup non-negative")
    layer, head, _ = load_checkpoint(args.ckpt)
    videos = load_dataset(args.data)
    # precompute model inputs so only the propagation step is timed
    frames = []
    for v in videos:
        feats = v.features()
        for k in range(len(v)):
            hom = pair_homography(v, k) if k > 0 else None
            frames.append((k == 0, frame_logits(v, head, k), feats[k], hom))
    state = PropagatorState()
    times = []
    total = args.warmup + args.steps
    for i in range(total):
        first, q, feat, hom = frames[i % len(frames)]
        if first:
            state = PropagatorState()
        t0 = time.perf_counter()
        _, state = video_step(state, q, feat, hom, layer)
        if i >= args.warmup:
            times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    print(f"bench: video_step {ms.mean():.3f} ms +/- {ms.std():.3f} ms over {len(ms)} steps ({args.warmup} warmup)")
    return EXIT_OK


# -- wiring --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="ssp", description="Similarity-weighted temporal propagation for video segmentation")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", required=True, help="JSON with scene settings and optional num_videos")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the similarity layer")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=["base", "kd"], default="base")
    s.add_argument("--lambda", dest="lam", type=float, default=0.5, help="consistency weight (base mode)")
    s.add_argument("--lambda-kd", type=float, default=135000.0, help="consistency weight (kd mode)")
    s.add_argument("--tau", type=float, default=2.0, help="distillation temperature")
    s.add_argument("--one-step", action="store_true", help="train the head jointly from scratch")
    s.add_argument("--no-registration", action="store_true")
    s.add_argument("--similarity", choices=["conv", "cosine"], default="conv")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--teacher", help="distill-prep output directory (kd mode)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="stream the propagator over a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--no-registration", action="store_true")
    s.add_argument("--alpha-zero", action="store_true", help="disable interpolation")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="mIoU and temporal consistency of predictions")
    s.add_argument("--pred", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", help="also write the JSON report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("distill-prep", help="build blended teacher targets")
    s.add_argument("--data", required=True)
    s.add_argument("--teacher-margin", type=float, default=6.0)
    s.add_argument("--corruption", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_distill_prep)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="time video_step on CPU")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--warmup", type=int, default=50)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ssp {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"ssp {args.command}: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (FormatError, OSError, ValueError) as exc:
        print(f"ssp {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
