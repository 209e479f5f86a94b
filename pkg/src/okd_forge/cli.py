"""Command-line entry point: ``okd-forge {synth,dosco,train,eval,compare}``.

Exit codes: 0 success, 1 data/spec/config error, 2 bad command line,
3 non-finite loss during training.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import dosco, harness, nets
from . import rng as rngmod
from .errors import ConfigError, OKDError, SpecError
from .oodgen import Augmentor

log = logging.getLogger("okd_forge")

EXIT_ERROR = 1
EXIT_NON_FINITE = 3


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return d


def parse_seeds(text: str) -> list[int]:
    """``"3"`` -> [3], ``"0..4"`` -> [0..4] inclusive, ``"1,5,7"`` -> [1, 5, 7]."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use N, A..B or A,B,C") from None


def parse_aug(text: str) -> Augmentor:
    """Either a bare kind name or a JSON object of Augmentor fields."""
    if text.lstrip().startswith("{"):
        return Augmentor.from_dict(json.loads(text))
    return Augmentor(text)


def _threads() -> int:
    raw = os.environ.get("OKD_FORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"OKD_FORGE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# -- synth ----------------------------------------------------------------
def cmd_synth(args) -> int:
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    spec = dosco.SyntheticDGSpec.from_dict(d)
    if spec.num_domains < 2:
        raise SpecError("num_domains must be at least 2: a 50/50 domain split needs one train and one test domain")
    data, split = dosco.generate_synthetic(spec)
    out = dosco.save_dataset(args.out, data, split, spec.to_dict())
    print(f"wrote {len(data)} examples to {out} "
          f"(train {split.count('train')}, val {split.count('val')}, test {split.count('test')})")
    return 0


# -- dosco ----------------------------------------------------------------
def cmd_dosco(args) -> int:
    table = dosco.FeatureTable.load(args.features)
    split = dosco.build_domain_splits(table, args.k, args.seed, normalize=args.normalize)
    if args.two_k:
        split = dosco.subsample_2k(split, rngmod.stream(args.seed, "two_k"))
    split.save_csv(args.out)
    print(f"wrote {args.out}: train {split.count('train')}, val {split.count('val')}, test {split.count('test')}")
    return 0


# -- train ----------------------------------------------------------------
def _train_config(args, seed: int) -> harness.TrainConfig:
    d = _read_json(args.config)
    if args.method:
        d["method"] = args.method
    if args.epochs is not None:
        d["max_epochs"] = args.epochs
    if args.teacher:
        d["teacher_checkpoint"] = str(args.teacher)
    d["seed"] = seed
    cfg = harness.TrainConfig.from_dict(d)
    if args.aug is not None:
        cfg = replace(cfg, aug=args.aug)
    return cfg


def _run_one(args, seed: int) -> tuple[int, str]:
    cfg = _train_config(args, seed)
    data, split = dosco.load_dataset(args.data, args.split)
    out = Path(args.out)
    teacher = None
    if cfg.method in harness.DISTILL_METHODS:
        if cfg.teacher_checkpoint:
            teacher = nets.load_checkpoint(cfg.teacher_checkpoint)
        else:
            trec, teacher = harness.train_teacher(cfg, data, split)
            trec.save(out / str(seed) / "teacher.json")
            nets.save_checkpoint(teacher, out / str(seed) / "teacher_ckpt")
        if teacher.spec.num_classes != data.num_classes:
            raise ConfigError(f"teacher predicts {teacher.spec.num_classes} classes, dataset has {data.num_classes}")
    try:
        record, net = harness.train(cfg, data, split, teacher)
    except harness.NonFiniteLossError as exc:
        exc.record.save(out / f"{seed}.json")
        return EXIT_NON_FINITE, f"seed {seed}: non-finite loss ({exc.record.diagnostic})"
    path = record.save(out / f"{seed}.json")
    nets.save_checkpoint(net, out / str(seed) / "ckpt")
    return 0, (f"seed {seed}: {cfg.method} id={record.id_accuracy:.4f} ood={record.ood_accuracy:.4f} "
               f"epoch={record.selected_epoch} -> {path}")


def _run_one_safe(args, seed):
    try:
        return _run_one(args, seed)
    except (OKDError, OSError) as exc:
        return EXIT_ERROR, f"seed {seed}: error: {exc}"


def cmd_train(args) -> int:
    seeds = args.seeds if args.seeds is not None else [args.seed if args.seed is not None else 0]
    _train_config(args, seeds[0])  # fail fast on config problems
    workers = min(_threads(), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one_safe, [args] * len(seeds), seeds))
    else:
        results = [_run_one_safe(args, s) for s in seeds]
    code = 0
    for status, msg in results:
        print(msg, file=sys.stderr if status else sys.stdout)
        code = max(code, status)
    return code


# -- eval -----------------------------------------------------------------
def cmd_eval(args) -> int:
    net = nets.load_checkpoint(args.checkpoint)
    data, split = dosco.load_dataset(args.data, args.split)
    if net.spec.num_classes != data.num_classes:
        raise ConfigError(f"checkpoint predicts {net.spec.num_classes} classes, dataset has {data.num_classes}")
    if tuple(net.spec.input_shape) != data.input_shape:
        raise ConfigError(f"checkpoint expects input {tuple(net.spec.input_shape)}, dataset has {data.input_shape}")
    preds = nets.predict(net, data.x)
    roles = split.roles_for(data.ids)
    report = {"accuracy": float((preds == data.labels).mean()), "n": len(data)}
    for role in ("train", "val", "test"):
        rows = roles == role
        report[f"{role}_accuracy"] = float((preds[rows] == data.labels[rows]).mean()) if rows.any() else None
    report["id_accuracy"], report["ood_accuracy"] = report["val_accuracy"], report["test_accuracy"]
    if report["id_accuracy"] is not None and report["ood_accuracy"] is not None:
        report["gap"] = report["id_accuracy"] - report["ood_accuracy"]
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# -- compare --------------------------------------------------------------
def cmd_compare(args) -> int:
    paths = sorted({p for pattern in args.runs for p in glob.glob(pattern)})
    if not paths:
        raise ConfigError(f"no run records match {args.runs}")
    records = [harness.RunRecord.load(p) for p in paths]
    report = harness.compare(records)
    print(report.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


# -- parser ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="okd-forge", description="Distillation experiments on domain-shifted data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render the synthetic domain-shift benchmark")
    s.add_argument("--config", help="JSON with SyntheticDGSpec keys (defaults otherwise)")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--out", required=True, help="dataset directory to write")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("dosco", help="cluster feature embeddings into domains and split them")
    s.add_argument("--features", required=True, help="feature manifest JSON {ids, class_labels, feature_file}")
    s.add_argument("--k", type=int, default=10, help="domains per class (default 10)")
    s.add_argument("--seed", type=int, default=0, help="split seed")
    s.add_argument("--two-k", action="store_true", help="subsample to 1600 train + 400 val")
    s.add_argument("--normalize", action="store_true", help="L2-normalize features before clustering")
    s.add_argument("--out", required=True, help="split CSV to write")
    s.set_defaults(func=cmd_dosco)

    s = sub.add_parser("train", help="train a teacher or a student (erm, kd, kd_aug, okd)")
    s.add_argument("--config", help="JSON with TrainConfig keys")
    s.add_argument("--data", required=True, help="dataset directory written by synth")
    s.add_argument("--split", help="split CSV overriding the dataset's own")
    s.add_argument("--method", choices=harness.METHODS, help="override the config method")
    s.add_argument("--aug", type=parse_aug, help="augmentor kind or JSON object, e.g. identity or "
                   '\'{"kind": "jigsaw", "k": 16}\'')
    s.add_argument("--teacher", help="teacher checkpoint directory (trained from scratch when omitted)")
    s.add_argument("--epochs", type=int, help="override max_epochs")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, help="single seed (default 0)")
    g.add_argument("--seeds", type=parse_seeds, help="seed sweep, e.g. 0..4; OKD_FORGE_THREADS caps parallelism")
    s.add_argument("--out", required=True, help="run directory; records go to <out>/<seed>.json")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True, help="checkpoint directory")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--split", help="split CSV overriding the dataset's own")
    s.add_argument("--out", help="also write the JSON report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="aggregate run records into a comparison table")
    s.add_argument("runs", nargs="+", help="run record paths or glob patterns")
    s.add_argument("--csv", help="also write the table as CSV")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (OKDError, OSError) as exc:
        print(f"okd-forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
