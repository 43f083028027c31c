"""Command line: ``attloc {synth,train,eval,localize,gradcheck}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from . import checkpoint, data, features
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, with_overrides
from .data import TAGS, DataError
from .metrics import write_eer_csv
from .model import Mode, forward, init_params
from .numerics import NumericalError, derive_rng
from .train import evaluate, grad_check, train, write_log_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4

log = logging.getLogger("attloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    if args.chunks < 1:
        raise UsageError("--chunks must be >= 1")
    if not 0 <= args.val_chunks < args.chunks:
        raise UsageError("--val-chunks must be in [0, chunks)")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    chunks = data.synth_corpus(args.seed, args.chunks, args.snr_db)
    manifest, truth = data.write_corpus(out, chunks)
    if args.val_chunks:
        n_train = args.chunks - args.val_chunks
        rows = [(f"chunk{i:05d}.wav", c.label) for i, c in enumerate(chunks)]
        data.write_manifest(out / "train.csv", rows[:n_train])
        data.write_manifest(out / "val.csv", rows[n_train:])
    print(f"wrote {args.chunks} chunks to {out} ({manifest.name}, {truth.name})")


def _run_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "manifest": args.manifest, "val_manifest": args.val_manifest, "out": args.out,
        "mode": args.mode, "seed": args.seed, "epochs": args.epochs,
        "batch_size": args.batch_size, "learning_rate": args.learning_rate, "log": args.log,
    }
    cfg = with_overrides(cfg, overrides)
    for key in ("manifest", "val_manifest", "out"):
        if not getattr(cfg, key):
            raise UsageError(f"--{key.replace('_', '-')} is required (flag or config key)")
    return cfg


def cmd_train(args):
    cfg = _run_config(args)
    mode = cfg.model_mode
    train_raw = data.load_features(data.parse_manifest(cfg.manifest))
    val_raw = data.load_features(data.parse_manifest(cfg.val_manifest))
    norm = features.fit_norm([x for x, _ in train_raw])
    train_set = [(features.apply_norm(x, norm), y) for x, y in train_raw]
    val_set = [(features.apply_norm(x, norm), y) for x, y in val_raw]
    start = time.perf_counter()
    params, history = train(train_set, val_set, cfg.train_config(), mode)
    checkpoint.save(cfg.out, params, norm, mode)
    log_path = cfg.log or str(cfg.out) + ".log.csv"
    write_log_csv(history, log_path, TAGS)
    best = min((h.val_eer_avg for h in history if h.val_eer_avg is not None), default=None)
    print(f"trained {cfg.epochs} epochs in {time.perf_counter() - start:.1f}s; "
          f"best val EER {'nan' if best is None else f'{best:.4f}'}; wrote {cfg.out} and {log_path}")


def _load_ckpt(path):
    try:
        return checkpoint.load(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None


def cmd_eval(args):
    params, norm, mode = _load_ckpt(args.ckpt)
    dataset = data.load_dataset(data.parse_manifest(args.manifest), norm)
    _, eers, avg = evaluate(dataset, params, mode)
    if avg is None:
        raise DataError("no tag has both positive and negative chunks in this manifest")
    out = args.out or sys.stdout
    if out is sys.stdout:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["tag", "eer"])
        for t, e in zip(TAGS, eers):
            w.writerow([t, "nan" if e is None else f"{e:.6f}"])
        w.writerow(["ave", f"{avg:.6f}"])
    else:
        write_eer_csv(out, TAGS, eers, avg)


def cmd_localize(args):
    params, norm, mode = _load_ckpt(args.ckpt)
    if mode is not Mode.ATT_LOC:
        raise DataError("checkpoint was trained in baseline mode and has no localization branch")
    audio = data.read_wav(args.wav)
    frames = features.apply_norm(features.mel_chunk(audio), norm)
    tr = forward(frames, params, mode)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame", "z_att"] + [f"z_loc_{t}" for t in TAGS] + [f"o_{t}" for t in TAGS])
        for t in range(frames.shape[0]):
            w.writerow([t, repr(float(tr.z_att[t]))]
                       + [repr(float(v)) for v in tr.z_loc[t]] + [repr(float(v)) for v in tr.o[t]])
    print(f"wrote {frames.shape[0]} frames to {args.out}")


def gradcheck_inputs(seed, n_frames):
    """Glorot parameters and a normalized synthetic mel chunk cut to ``n_frames``."""
    chunks = data.synth_corpus(seed, 2, 10.0)
    mels = [features.mel_chunk(c.audio) for c in chunks]
    norm = features.fit_norm(mels)
    x = features.apply_norm(mels[0], norm)[:n_frames]
    return init_params(derive_rng(seed, "gradcheck")), x, chunks[0].label


def cmd_gradcheck(args):
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    params, x, label = gradcheck_inputs(args.seed, args.frames)
    worst = 0.0
    for mode in (Mode.BASELINE_CGRNN, Mode.ATT_LOC):
        start = time.perf_counter()
        rep = grad_check(params, x, label, mode, eps=args.eps, per_tensor=args.per_tensor,
                         seed=args.seed)
        print(f"{mode.value}: max_rel_err={rep.max_rel_err:.3e} worst={rep.worst_tensor}"
              f"{list(map(int, rep.worst_index))} checked={rep.n_checked} "
              f"({time.perf_counter() - start:.1f}s)")
        worst = max(worst, rep.max_rel_err)
    print(f"max_rel_err={worst:.3e}")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


# ---------------------------------------------------------------- entry point


def build_parser():
    p = _Parser(prog="attloc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus with frame-level ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--chunks", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--snr-db", type=float, default=10.0)
    s.add_argument("--val-chunks", type=int, default=0,
                   help="also write train.csv / val.csv with this many trailing chunks held out")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--manifest")
    t.add_argument("--val-manifest")
    t.add_argument("--mode", choices=["baseline", "attloc"])
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--log")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-tag EER of a checkpoint on a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    lo = sub.add_parser("localize", help="per-frame attention/localization trace of one WAV")
    lo.add_argument("--ckpt", required=True)
    lo.add_argument("--wav", required=True)
    lo.add_argument("--out", required=True)
    lo.set_defaults(func=cmd_localize)

    g = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--per-tensor", type=int, default=200)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"attloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError, ValueError) as exc:
        print(f"attloc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"attloc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
