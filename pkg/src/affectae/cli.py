"""Command-line entry point: ``affectae {generate,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data
from .train import CheckpointError, ConfigError, NumericError, TrainConfig, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

MANIFEST = "manifest.txt"

log = logging.getLogger("affectae")


class DataError(Exception):
    pass


def _manifest_path(p: str | Path) -> Path:
    p = Path(p)
    if p.is_dir():
        p = p / MANIFEST
    if not p.exists():
        raise DataError(f"no manifest at {p}")
    return p


def _load(p: str | Path) -> list[data.Recording]:
    recs = data.load_manifest(_manifest_path(p))
    if not recs:
        raise DataError(f"{p}: manifest lists no recordings")
    return recs


def _config(path: str | None) -> TrainConfig:
    return TrainConfig() if path is None else load_config(path)


def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noise = data.NOISE_PRESETS[args.noise]
    paths = []
    for i in range(args.recordings):
        rec = data.generate_recording(args.seed + i, args.frames, noise, f"{args.prefix}{i:03d}")
        path = out / f"{rec.id}.afr"
        data.write_recording(path, rec)
        paths.append(path)
    data.write_manifest(out / MANIFEST, paths)
    print(f"wrote {len(paths)} recordings of {args.frames} frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args.config)
    train_set = _load(args.data)
    val_set = _load(args.val) if args.val else None
    out = Path(args.out or cfg.checkpoint_dir)

    def echo(row):
        if "val_ccc_arousal" in row:
            print(
                f"step {row['step']:>6}  loss {row['total_loss']:.6g}  "
                f"val ccc a={row['val_ccc_arousal']:.4f} v={row['val_ccc_valence']:.4f}  E_av={row['val_Eav']:.4f}",
                flush=True,
            )

    result = train(cfg, train_set, val_set, out_dir=out, resume=args.resume, on_step=echo)
    print(f"final checkpoint {result.final_checkpoint}\ncurve {result.curve_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate

    try:
        report = evaluate(args.checkpoint, _load(args.data), args.report, args.predictions)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(report.summary(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import ABLATIONS, run_ablation

    if args.name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {args.name!r}; choose from {', '.join(ABLATIONS)}")
    cfg = _config(args.config)
    bench = None
    if args.data:
        if not args.val:
            raise ConfigError("--data needs a matching --val")
        bench = (_load(args.data), _load(args.val))
    else:
        bench = data.make_benchmark(args.bench_seed)
    report = run_ablation(args.name, cfg, bench, out_dir=args.out)
    print(f"ablation {args.name}")
    print(report.summary(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seeds=tuple(range(args.seeds)), report=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="affectae", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic recordings and a manifest")
    g.add_argument("--seed", type=int, default=0, help="recording i uses seed + i")
    g.add_argument("--recordings", type=int, default=16)
    g.add_argument("--frames", type=int, default=500)
    g.add_argument("--out", required=True)
    g.add_argument("--noise", choices=sorted(data.NOISE_PRESETS), default="moderate")
    g.add_argument("--prefix", default="rec")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="manifest file or directory holding manifest.txt")
    t.add_argument("--val", help="validation manifest or directory")
    t.add_argument("--out", help="output directory (default: checkpoint_dir from the config)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on recordings")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="CSV path; a .txt summary is written next to it")
    e.add_argument("--predictions", help="optional per-frame prediction dump (CSV)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and score a named variant")
    a.add_argument("--name", required=True)
    a.add_argument("--config")
    a.add_argument("--data", help="training manifest (default: the synthetic benchmark)")
    a.add_argument("--val", help="validation manifest")
    a.add_argument("--bench-seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    c.add_argument("--seeds", type=int, default=10)
    c.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, data.RecordingFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
