"""Command-line entry point: ``anchorsv {gen,train,eval,plotdata,bench}``.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure, 5 degenerate data.
Every command writes ``manifest.json`` next to its outputs.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .benchmark import DeskCorpus, run_benchmark
from .datagen import (NOISE_KINDS, export_dataset, load_dataset, make_trials, read_trials,
                      split_by_speaker, synth_corpus, write_trials)
from .errors import Degenerate, Infeasible, NonFinite, UnknownId
from .evaluation import (DEFAULT_SNRS, condition_embeddings, default_geometry_condition,
                         full_eval, geometry_stats, l2_normalize, project_2d)
from .model import Checkpoint, digest, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train_joint, train_stage1, train_stage2

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_DEGENERATE = 0, 2, 3, 4, 5

log = logging.getLogger("anchorsv")


class UsageError(Exception):
    pass


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digests(root):
    out = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name in ("manifest.json", ".lock"):
                continue
            path = os.path.join(dirpath, name)
            out[os.path.relpath(path, root)] = file_digest(path)
    return out


@contextmanager
def locked_output(directory):
    """Create ``directory`` and hold an exclusive lockfile inside it."""
    os.makedirs(directory, exist_ok=True)
    lock = os.path.join(directory, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"output directory {directory} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        os.unlink(lock)


def write_manifest(out_dir, command, argv, started, seeds, config_digest=None, inputs=None, extra=None):
    """Run record. Only ``started_at`` and ``duration_s`` vary between identical runs."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "tool_version": __version__,
        "config_digest": config_digest,
        "seeds": seeds,
        "inputs": inputs or {},
        "outputs": tree_digests(out_dir),
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "duration_s": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _split_dir(root, split):
    """Accept either a corpus root (with train/ and test/) or a split directory."""
    sub = os.path.join(root, split)
    if os.path.isfile(os.path.join(sub, "dataset.json")):
        return sub
    if os.path.isfile(os.path.join(root, "dataset.json")):
        return root
    raise OSError(f"no {split} split found under {root}")


def _load_split(root, split):
    path = _split_dir(root, split)
    try:
        data = load_dataset(path)
    except (KeyError, ValueError) as exc:
        raise OSError(f"cannot parse corpus at {path}: {exc}") from exc
    if len(data) == 0:
        raise Degenerate(f"dataset at {path} is empty")
    return data, path


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (IndexError, KeyError, ValueError) as exc:
        raise OSError(f"cannot parse checkpoint {path}: {exc}") from exc


def _float_list(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _kind_list(text):
    kinds = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [k for k in kinds if k not in NOISE_KINDS]
    if bad or not kinds:
        raise argparse.ArgumentTypeError(f"noise kinds must be from {','.join(NOISE_KINDS)}")
    return kinds


# ---------------------------------------------------------------- commands

def cmd_gen(args, argv):
    for flag in ("speakers", "test_speakers", "utts", "frames", "dim"):
        if getattr(args, flag) < 1:
            raise UsageError(f"--{flag.replace('_', '-')} must be >= 1")
    if args.frames < 2:
        raise UsageError("--frames must be >= 2")
    for flag in ("intra_spread", "channel_spread", "style_spread"):
        if getattr(args, flag) < 0:
            raise UsageError(f"--{flag.replace('_', '-')} must be >= 0")
    started = time.time()
    corpus = DeskCorpus(args.speakers, args.test_speakers, args.utts, args.frames, args.dim,
                        args.intra_spread, args.channel_spread, args.style_spread,
                        args.n_target, args.n_nontarget)
    full = synth_corpus(args.seed, args.speakers + args.test_speakers, args.utts, args.frames,
                        args.dim, args.intra_spread, args.channel_spread,
                        style_spread=args.style_spread)
    train, test = split_by_speaker(full, args.test_speakers)
    trials = make_trials(test, args.seed, args.n_target, args.n_nontarget)
    with locked_output(args.out) as out:
        export_dataset(train, os.path.join(out, "train"))
        export_dataset(test, os.path.join(out, "test"))
        write_trials(os.path.join(out, "trials.txt"), trials)
        with open(os.path.join(out, "corpus.json"), "w") as fh:
            json.dump({"seed": args.seed, **asdict(corpus)}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(out, "gen", argv, started, {"corpus": args.seed})
    print(f"wrote {len(train)} train / {len(test)} test utterances, {len(trials)} trials to {args.out}")


def cmd_train(args, argv):
    if args.stage == "2" and not args.base:
        raise UsageError("--base is required for --stage 2")
    overrides = dict(kv.split("=", 1) for kv in args.set)
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    overrides["stage"] = args.stage
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.epochs is not None:
        overrides["epochs"] = str(args.epochs)
    try:
        config = (TrainConfig.from_file(args.config, **overrides) if args.config
                  else TrainConfig.from_text("", **overrides))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    started = time.time()
    train, train_path = _load_split(args.data, "train")
    inputs = {"data": tree_digests(train_path)}
    extra = {}
    if config.stage == "1":
        branch, tlog = train_stage1(config, train)
    elif config.stage == "joint":
        branch, tlog = train_joint(config, train)
    else:
        base = _load_model(args.base)
        inputs["base"] = file_digest(args.base)
        extra = {"base_checkpoint": args.base, "base_digest": digest(base.branch)}
        branch, tlog = train_stage2(config, train, base.branch)
        extra["anchor_digest_before"] = tlog.anchor_digest_before
        extra["anchor_digest_after"] = tlog.anchor_digest_after
    with locked_output(args.out) as out:
        save_checkpoint(os.path.join(out, "model.ckpt"),
                        Checkpoint(branch, config.head_mode, config.stage, config.seed))
        tlog.write_csv(os.path.join(out, "train_log.csv"))
        with open(os.path.join(out, "config.txt"), "w") as fh:
            fh.write(config.to_text())
        write_manifest(out, "train", argv, started, {"train": config.seed}, config.digest(),
                       inputs, {**extra, "model_digest": digest(branch)})
    first, last = tlog.epochs[0].loss, tlog.epochs[-1].loss
    print(f"stage {config.stage}: loss {first:.4f} -> {last:.4f}; checkpoint {args.out}/model.ckpt")


def cmd_eval(args, argv):
    started = time.time()
    ckpt = _load_model(args.model)
    test, test_path = _load_split(args.data, "test")
    trials_path = args.trials or os.path.join(args.data, "trials.txt")
    try:
        trials = read_trials(trials_path)
    except ValueError as exc:
        raise OSError(str(exc)) from exc
    if not any(t.target for t in trials) or all(t.target for t in trials):
        raise Degenerate("trial list needs both target and nontarget trials")
    report = full_eval(ckpt.branch.extractor, test, trials, args.snrs, args.noise, args.seed,
                       workers=args.workers)
    with locked_output(args.out) as out:
        report.write_csv(os.path.join(out, "report.csv"))
        report.write_json(os.path.join(out, "report.json"))
        inputs = {"model": file_digest(args.model), "trials": file_digest(trials_path),
                  "data": tree_digests(test_path)}
        write_manifest(out, "eval", argv, started, {"eval_noise": args.seed}, inputs=inputs)
    print(f"clean EER {report.clean_eer:.4f}  noisy average {report.noisy_average:.4f}")


def cmd_plotdata(args, argv):
    started = time.time()
    ckpt = _load_model(args.model)
    test, test_path = _load_split(args.data, "test")
    kind = args.noise
    snr = args.snr
    if kind is None or snr is None:
        dk, ds = default_geometry_condition(DEFAULT_SNRS, NOISE_KINDS)
        kind = kind or dk
        snr = ds if snr is None else snr
    ext = ckpt.branch.extractor
    ids = [u.id for u in test.utterances]
    labels = [u.speaker for u in test.utterances]
    clean = condition_embeddings(ext, test, None, None, args.seed)
    noisy = condition_embeddings(ext, test, kind, snr, args.seed)
    e_clean = l2_normalize(np.stack([clean[i] for i in ids]))
    e_noisy = l2_normalize(np.stack([noisy[i] for i in ids]))
    proj = project_2d(np.concatenate([e_clean, e_noisy]))
    tag = f"{kind}@{snr:g}"
    stats = {"clean": geometry_stats(e_clean, labels).to_dict(),
             tag: geometry_stats(e_noisy, labels).to_dict(),
             "projection": {"variance_share": proj.variance_share,
                            "explained": [float(v) for v in proj.explained]}}
    with locked_output(args.out) as out:
        with open(os.path.join(out, "projection.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["utt_id", "speaker", "condition", "x", "y"])
            n = len(ids)
            for k, (uid, spk) in enumerate(zip(ids + ids, labels + labels)):
                cond = "clean" if k < n else tag
                w.writerow([uid, spk, cond, repr(float(proj.points[k, 0])), repr(float(proj.points[k, 1]))])
        with open(os.path.join(out, "stats.json"), "w") as fh:
            json.dump(stats, fh, indent=2, sort_keys=True)
            fh.write("\n")
        inputs = {"model": file_digest(args.model), "data": tree_digests(test_path)}
        write_manifest(out, "plotdata", argv, started, {"eval_noise": args.seed}, inputs=inputs)
    print(f"projection of {2 * len(ids)} embeddings written to {args.out}/projection.csv")


def cmd_bench(args, argv):
    started = time.time()
    overrides = {k.strip(): v.strip() for k, v in (kv.split("=", 1) for kv in args.set)}
    try:
        config = TrainConfig.from_text("", **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    results = {}
    for seed in args.seeds:
        r = run_benchmark(int(seed), config=config)
        results[str(int(seed))] = {name: rep.to_dict() for name, rep in r.reports.items()}
        row = "  ".join(f"{n}: clean {rep.clean_eer:.4f} noisy {rep.noisy_average:.4f}"
                        for n, rep in r.reports.items())
        print(f"seed {int(seed)}  {row}", flush=True)
    with locked_output(args.out) as out:
        with open(os.path.join(out, "bench.json"), "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(out, "bench", argv, started, {"seeds": [int(s) for s in args.seeds]},
                       config.digest())


def build_parser():
    p = argparse.ArgumentParser(prog="anchorsv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    ref = DeskCorpus()

    g = sub.add_parser("gen", help="generate a synthetic train/test corpus and trial list")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--speakers", type=int, default=ref.n_train_speakers, help="training speakers")
    g.add_argument("--test-speakers", type=int, default=ref.n_test_speakers)
    g.add_argument("--utts", type=int, default=ref.utts_per_speaker)
    g.add_argument("--frames", type=int, default=ref.frames)
    g.add_argument("--dim", type=int, default=ref.dim)
    g.add_argument("--intra-spread", type=float, default=ref.intra_spread)
    g.add_argument("--channel-spread", type=float, default=ref.channel_spread)
    g.add_argument("--style-spread", type=float, default=ref.style_spread)
    g.add_argument("--n-target", type=int, default=ref.n_target)
    g.add_argument("--n-nontarget", type=int, default=ref.n_nontarget)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train stage 1, stage 2 or the joint ablation")
    t.add_argument("--stage", choices=["1", "2", "joint"], required=True)
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--data", required=True, help="corpus root or train split directory")
    t.add_argument("--base", help="stage-1 checkpoint (stage 2 only)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="EER per noise condition and geometry statistics")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="corpus root or test split directory")
    e.add_argument("--trials", help="trial list (default: <data>/trials.txt)")
    e.add_argument("--snrs", type=_float_list, default=DEFAULT_SNRS)
    e.add_argument("--noise", type=_kind_list, default=NOISE_KINDS)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    pd = sub.add_parser("plotdata", help="2-D projection of clean and noisy test embeddings")
    pd.add_argument("--model", required=True)
    pd.add_argument("--data", required=True)
    pd.add_argument("--noise", choices=NOISE_KINDS)
    pd.add_argument("--snr", type=float)
    pd.add_argument("--seed", type=int, default=0)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_plotdata)

    b = sub.add_parser("bench", help="run the reference desk benchmark for several seeds")
    b.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")], default=[0, 1, 2, 3, 4])
    b.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"anchorsv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFinite as exc:
        print(f"anchorsv: numeric failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (Degenerate, Infeasible, UnknownId) as exc:
        print(f"anchorsv: degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except OSError as exc:
        print(f"anchorsv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
