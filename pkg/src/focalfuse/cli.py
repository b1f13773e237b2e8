"""Command-line entry point: gen-data, train, infer, eval, describe.

Exit status: 0 success, 1 runtime failure (divergence, numeric error),
2 usage or configuration error.  Errors print a single line to stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .architectures import ModelConfig, check_input_extents, describe, format_report
from .data import (PhantomSpec, VolumeSample, encode_volume, generate_phantom, read_volume,
                   sample_seed, write_volume)
from .errors import ConfigError, DataError, DimensionError, FocalFuseError, FormatError, NumericError
from .metrics import aggregate_reports, evaluate_volume, format_table
from .training import TrainingDiverged, load_checkpoint, predict_labels, save_checkpoint, train

log = logging.getLogger("focalfuse")

VOLUME_SUFFIX = ".mvol"


class UsageError(FocalFuseError):
    """Bad invocation detected after argument parsing."""


def _threads(n: Optional[int]):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _model_config(args, num_classes: Optional[int] = None) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else None
    d = cfg.to_dict() if cfg else {}
    if cfg is None and num_classes is not None:
        d["num_classes"] = num_classes
    if getattr(args, "variant", None):
        d["variant"] = args.variant
    if getattr(args, "base_channels", None):
        d["base_channels"] = args.base_channels
    return ModelConfig.from_dict(d)


def _volume_files(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"data directory {str(d)!r} does not exist")
    return sorted(d.glob(f"*{VOLUME_SUFFIX}"))


def cmd_gen_data(args) -> int:
    spec = PhantomSpec.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else PhantomSpec()
    spec.validate()
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        s = sample_seed(args.seed, i)
        sub = PhantomSpec(**{**spec.__dict__, "seed": s})
        sample = generate_phantom(sub, sample_id=f"phantom_{i:04d}")
        raw = encode_volume(sample)
        name = f"{sample.id}{VOLUME_SUFFIX}"
        (out / name).write_bytes(raw)
        entries.append({"id": sample.id, "file": name, "seed": s,
                        "sha256": hashlib.sha256(raw).hexdigest()})
    manifest = {"seed": args.seed, "count": args.count, "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    print(f"wrote {args.count} volumes to {out}")
    return 0


def cmd_train(args) -> int:
    files = _volume_files(args.data)
    if not files:
        raise UsageError(f"no {VOLUME_SUFFIX} files in {args.data}")
    samples = [read_volume(f) for f in files]
    if any(s.image is None for s in samples):
        raise UsageError("training volumes must carry images")
    num_classes = max(s.num_classes for s in samples)
    cfg = _model_config(args, num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.cfg")
    logfile = out / "trainlog.tsv"
    try:
        params, state, tlog = train(cfg, samples, epochs=args.epochs, seed=args.seed,
                                    half_cycle=args.half_cycle, validate_every=args.val_every,
                                    max_iterations=args.max_iterations,
                                    checkpoint_dir=out if args.epoch_checkpoints else None)
    except TrainingDiverged as exc:
        exc.log.write(logfile)
        raise
    save_checkpoint(params, state, cfg, out / "model.ckpt")
    tlog.write(logfile)
    last = tlog.validation[-1][1].mean_dsc if tlog.validation else None
    print(f"trained {len(tlog.records)} iterations; final loss {tlog.records[-1][2]:.6f}"
          + (f"; mean dsc {last:.4f}" if last is not None else ""))
    return 0


def cmd_infer(args) -> int:
    params, _, cfg = load_checkpoint(args.checkpoint)
    sample = read_volume(args.data)
    if sample.image is None:
        raise UsageError(f"{args.data} carries no image")
    check_input_extents(sample.extents)
    labels = predict_labels(cfg, params, sample)
    write_volume(VolumeSample(None, labels, sample.spacing, sample.id, cfg.num_classes), args.out)
    print(f"wrote prediction for {sample.id} to {args.out}")
    return 0


def _by_id(files):
    out = {}
    for f in files:
        s = read_volume(f)
        if s.id in out:
            raise UsageError(f"duplicate volume id {s.id!r} in {f.parent}")
        out[s.id] = s
    return out


def cmd_eval(args) -> int:
    preds = _by_id(_volume_files(args.pred))
    truths = _by_id(_volume_files(args.truth))
    unmatched = sorted(set(preds) ^ set(truths))
    if unmatched:
        raise UsageError(f"unmatched volume ids: {', '.join(unmatched)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for vid in sorted(truths):
        p, t = preds[vid], truths[vid]
        if p.extents != t.extents:
            raise UsageError(f"volume {vid!r}: prediction extents {p.extents} != truth {t.extents}")
        rep = evaluate_volume(p.labels, t.labels, t.spacing, max(p.num_classes, t.num_classes),
                              volume_id=vid, hd_percentile=args.hd_percentile)
        (out / f"{vid}.csv").write_text(rep.to_csv(), encoding="utf-8")
        reports.append(rep)
    agg = aggregate_reports(reports)
    (out / "aggregate.csv").write_text(agg.to_csv(), encoding="utf-8")
    table = format_table(reports + [agg])
    (out / "report.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_describe(args) -> int:
    cfg = _model_config(args)
    extent = (args.extent,) * 3
    sys.stdout.write(format_report(describe(cfg, extent)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="focalfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp):
        sp.add_argument("--config", help="model config file (key = value lines)")
        sp.add_argument("--variant", choices=["focal_fuse", "msf3d"])
        sp.add_argument("--base-channels", type=int)

    g = sub.add_parser("gen-data", help="write synthetic phantom volumes")
    g.add_argument("--spec", help="phantom spec file (key = value lines)")
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a directory of volumes")
    model_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--half-cycle", type=int, default=100)
    t.add_argument("--val-every", type=int, default=1,
                   help="validate every N epochs (0 disables)")
    t.add_argument("--max-iterations", type=int)
    t.add_argument("--epoch-checkpoints", action="store_true",
                   help="also write latest.ckpt after every epoch")
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict a label volume")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True, help="input volume file")
    i.add_argument("--out", required=True)
    i.add_argument("--threads", type=int)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted volumes against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--hd-percentile", type=float, help="e.g. 95 for HD95")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("describe", help="print parameter counts, shapes, receptive fields")
    model_flags(d)
    d.add_argument("--extent", type=int, default=32)
    d.set_defaults(func=cmd_describe)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(getattr(args, "threads", None)):
            return args.func(args)
    except (UsageError, ConfigError, FormatError, DataError, DimensionError,
            FileNotFoundError) as exc:
        print(f"focalfuse: error: {exc}".splitlines()[0], file=sys.stderr)
        return 2
    except (NumericError, FocalFuseError, OSError) as exc:
        print(f"focalfuse: error: {exc}".splitlines()[0], file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
