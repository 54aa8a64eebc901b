"""Command-line entry points: gen-data, train, eval, probe, parse.

Exit codes: 0 success, 1 usage error, 2 data/config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import data as data_io
from .errors import EmptyContent, VdmrError
from .metrics import dynamics_probe
from .text import parse_query
from .training import (TrainConfig, build_model, evaluate_model, fit,
                       load_checkpoint, save_checkpoint)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _digest_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_dict(d: dict) -> str:
    return hashlib.sha256(
        json.dumps(d, sort_keys=True).encode()).hexdigest()


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_config(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config \
        else TrainConfig()
    # flags override the config file
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "lv", None) is not None:
        config.lv = args.lv
    if getattr(args, "batch", None) is not None:
        config.batch_size = args.batch
    return config


def build_parser() -> _Parser:
    parser = _Parser(prog="vdmr",
                     description="Video moment retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gen-data", help="generate a seeded synthetic dataset")
    common(p)
    p.add_argument("--num-videos", type=int, default=50)
    p.add_argument("--lv", type=int, default=16)
    p.add_argument("--templates", type=str, default=None,
                   help="comma-separated noun:verb pairs")

    p = sub.add_parser("train", help="train on a dataset directory")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--lv", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=0.2)

    p = sub.add_parser("eval", help="evaluate a checkpoint or predictions")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--preds", type=Path, default=None)

    p = sub.add_parser("probe", help="full/static/dynamic query comparison")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("parse", help="show the masked query pair")
    common(p, out=False)
    p.add_argument("sentence")
    return parser


def _cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else 0
    templates = data_io.DEFAULT_TEMPLATES
    if args.templates:
        templates = tuple(tuple(pair.split(":")) for pair
                          in args.templates.split(","))
        if any(len(t) != 2 for t in templates):
            raise VdmrError("templates must be noun:verb pairs")
    min_len = max(1, args.lv // 4)
    spec = data_io.SyntheticSpec(num_videos=args.num_videos,
                                 frames_per_video=args.lv,
                                 templates=templates, seed=seed,
                                 min_moment_frames=min_len,
                                 max_moment_frames=max(min_len,
                                                       5 * args.lv // 8))
    dataset = data_io.generate_synthetic(spec)
    data_io.save_dataset(args.out, dataset, meta={
        "seed": seed, "templates": [list(t) for t in templates]})
    print(f"wrote {len(dataset.samples)} samples to {args.out}")
    return EXIT_OK


def _split(dataset, val_fraction: float, seed: int):
    import numpy as np
    n = len(dataset.samples)
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return (dataset.subset(order[n_val:].tolist()),
            dataset.subset(order[:n_val].tolist()))


def _cmd_train(args) -> int:
    config = _load_config(args)
    dataset = data_io.load_dataset(args.data)
    config.lv = dataset.frames_per_video
    train_set, val_set = _split(dataset, args.val_fraction, config.seed)
    model = build_model(config)
    started = time.time()
    state = fit(model, train_set, val_set, config)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "checkpoint.pt", model, config, state)
    _write_json(args.out / "metrics.json", {
        "best_val_r1_iou05": state.best_metric,
        "best_epoch": state.best_epoch,
        "epochs": state.epoch,
        "loss_history": state.loss_history,
        "val_history": state.val_history,
        "config_digest": _digest_dict(config.to_dict()),
        "meta": {"elapsed_s": time.time() - started},
    })
    print(f"best val R@1,IoU=0.5 = {state.best_metric:.2f} "
          f"(epoch {state.best_epoch}/{state.epoch})")
    return EXIT_OK


def _report_payload(report, args, config=None) -> dict:
    payload = report.to_dict()
    payload["dataset_digest"] = _digest_file(Path(args.data) / "annotations.txt")
    if config is not None:
        payload["config_digest"] = _digest_dict(config.to_dict())
    return payload


def _cmd_eval(args) -> int:
    from .metrics import evaluate
    dataset = data_io.load_dataset(args.data)
    gts = {s.query_id: (s.annotation.start_s, s.annotation.end_s)
           for s in dataset.samples}
    config = None
    if args.preds is not None:
        preds = data_io.load_predictions(args.preds)
        report = evaluate(preds, gts)
    elif args.checkpoint is not None:
        model, config, _ = load_checkpoint(args.checkpoint)
        model.attach_dataset(dataset)
        report = evaluate_model(model, dataset.samples)
    else:
        raise _UsageError("eval needs --checkpoint or --preds")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(args.out, _report_payload(report, args, config))
    print(json.dumps(report.to_dict()["recall"]))
    return EXIT_OK


def _cmd_probe(args) -> int:
    dataset = data_io.load_dataset(args.data)
    model, config, _ = load_checkpoint(args.checkpoint)
    model.attach_dataset(dataset)
    reports = dynamics_probe(model, dataset.samples)
    payload = {kind: _report_payload(report, args, config)
               for kind, report in reports.items()}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(args.out, payload)
    for kind, report in reports.items():
        print(f"{kind}: mIoU={report.miou:.2f} "
              f"(excluded {report.excluded})")
    return EXIT_OK


def _cmd_parse(args) -> int:
    try:
        pair = parse_query(args.sentence)
    except EmptyContent as exc:
        print(f"no static/dynamic split: {exc}", file=sys.stderr)
        return EXIT_DATA
    print("static :", " ".join(pair.static_query))
    print("dynamic:", " ".join(pair.dynamic_query))
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "probe": _cmd_probe,
    "parse": _cmd_parse,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VdmrError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run(sys.argv[1:]))
