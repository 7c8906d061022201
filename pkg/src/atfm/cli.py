"""Command-line entry point: ``atfm <command> ...``.

Exit codes: 0 success, 1 usage or validation error, 2 numerical failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from .evaluation import evaluate
from .gtr_training import DivergenceError, EpochStats, GtrTrainConfig, train_gtr
from .nets import GTR, STNET, NetConfig
from .sfm import SfmTrainConfig, predict, train_sfm
from .synthdata import (
    DatasetError,
    SynthConfig,
    generate_dataset,
    load_dataset,
    read_pgm,
    save_dataset,
    summarize,
    write_pgm,
)
from .verify import SUITES, run_suite

log = logging.getLogger("atfm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# run configuration

SECTIONS = {"net": NetConfig, "gtr": GtrTrainConfig, "sfm": SfmTrainConfig, "synth": SynthConfig}
TOP_LEVEL = ("seed", "out")


@dataclasses.dataclass
class RunConfig:
    net: dict = dataclasses.field(default_factory=dict)
    gtr: dict = dataclasses.field(default_factory=dict)
    sfm: dict = dataclasses.field(default_factory=dict)
    synth: dict = dataclasses.field(default_factory=dict)
    seed: int | None = None
    out: str | None = None

    def section(self, name: str, **overrides):
        """Build the dataclass for ``name`` from file values plus non-None overrides."""
        values = dict(getattr(self, name))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return build_section(name, values)


def _check_type(key: str, value, annotation):
    text = annotation.__name__ if isinstance(annotation, type) else str(annotation)
    if "tuple" in text:
        ok = isinstance(value, (list, tuple)) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        expected = "a list of numbers"
    elif text.startswith("int"):
        ok = isinstance(value, int) and not isinstance(value, bool)
        expected = "an integer"
    elif text.startswith("float"):
        ok = (isinstance(value, (int, float)) and not isinstance(value, bool)) or (value is None and "None" in text)
        expected = "a number"
    elif text.startswith("str"):
        ok = isinstance(value, str)
        expected = "a string"
    else:
        ok, expected = True, ""
    if not ok:
        raise ConfigError(f"config key '{key}' must be {expected}, got {value!r}")


def build_section(name: str, values: dict):
    cls = SECTIONS[name]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        _check_type(f"{name}.{key}", value, fields[key].type)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        bad = [k for k in values if k in str(exc)]
        where = f"{name}.{bad[0]}" if bad else name
        raise ConfigError(f"invalid config '{where}': {exc}") from exc


def load_run_config(path: str | None, sets: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise DatasetError(f"cannot read config ({exc.strerror})", path) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    for item in sets or []:
        key, sep, text = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        section, field = key.split(".", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"config key '{section}' must be an object")
        raw[section][field] = value
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{key}' must be an object")
            for field, v in value.items():
                if field not in {f.name for f in dataclasses.fields(SECTIONS[key])}:
                    raise ConfigError(f"unknown config key '{key}.{field}'")
        elif key not in TOP_LEVEL:
            raise ConfigError(f"unknown config key '{key}'")
    cfg = RunConfig(**raw)
    if cfg.seed is not None and (not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool)):
        raise ConfigError(f"config key 'seed' must be an integer, got {cfg.seed!r}")
    for name in SECTIONS:
        cfg.section(name)  # validate eagerly so errors surface before any work
    return cfg


# ---------------------------------------------------------------------------
# commands


def _epoch_logger(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["epoch", "mean_loss", "grad_norm", "wall_seconds"])

    def on_epoch(stats: EpochStats):
        writer.writerow([stats.epoch, repr(stats.mean_loss), repr(stats.grad_norm), f"{stats.wall_seconds:.3f}"])
        fh.flush()
        log.info("epoch %d loss %.5f", stats.epoch, stats.mean_loss)

    return fh, on_epoch


def _log_path(args) -> Path:
    return Path(args.log) if args.log else Path(args.out).with_suffix(".loss.csv")


def _net_config(cfg: RunConfig, image_size: int, base: NetConfig | None = None) -> NetConfig:
    values = base.to_dict() if base is not None else {}
    values.update(cfg.net)
    values.setdefault("image_size", image_size)
    net = build_section("net", values)
    if net.image_size != image_size:
        raise ConfigError(f"config key 'net.image_size' is {net.image_size} but the data is {image_size}x{image_size}")
    return net


def _write_checkpoint(store, path: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(store, path)


def _load_checkpoint(path: str, kind: str):
    store = checkpoint.load(path)
    if store.kind != kind:
        raise ConfigError(f"{path} holds a {store.kind} checkpoint, expected {kind}")
    return store


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, args.set)
    synth = cfg.section(
        "synth",
        count=args.count,
        size=args.size,
        seed=args.seed,
        annotators=args.annotators,
        empty_prob=args.empty_prob,
    )
    samples = generate_dataset(synth)
    save_dataset(samples, args.out, synth)
    stats = summarize(samples)
    print(
        f"wrote {stats['count']} samples of {synth.size}x{synth.size} with {stats['annotators']} raters to {args.out}; "
        f"empty rate {stats['empty_rate']:.3f}, mean pairwise IoU {stats['mean_pairwise_iou']:.3f}"
    )
    return EXIT_OK


def cmd_train_gtr(args) -> int:
    cfg = load_run_config(args.config, args.set)
    data = load_dataset(args.data)
    train = cfg.section("gtr", seed=args.seed, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    net = _net_config(cfg, data[0].image.shape[0])
    fh, on_epoch = _epoch_logger(_log_path(args))
    with fh:
        store = train_gtr(data, train, net, on_epoch=on_epoch)
    _write_checkpoint(store, args.out)
    print(f"wrote frozen GTR checkpoint {args.out} ({store.param_count()} parameters, {store.meta['step']} steps)")
    return EXIT_OK


def cmd_train_sfm(args) -> int:
    cfg = load_run_config(args.config, args.set)
    data = load_dataset(args.data)
    gtr = _load_checkpoint(args.gtr, GTR)
    if not gtr.frozen:
        raise ConfigError(f"{args.gtr} is not frozen; train it with train-gtr first")
    train = cfg.section(
        "sfm", seed=args.seed, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, alpha=args.alpha
    )
    net = _net_config(cfg, data[0].image.shape[0], base=gtr.config)
    fh, on_epoch = _epoch_logger(_log_path(args))
    with fh:
        store = train_sfm(data, gtr, train, net, on_epoch=on_epoch)
    _write_checkpoint(store, args.out)
    print(f"wrote ST-Net checkpoint {args.out} ({store.param_count()} parameters, {store.meta['step']} steps)")
    return EXIT_OK


def _load_stnet(spec: str):
    return None if spec.lower() == "none" else _load_checkpoint(spec, STNET)


def cmd_sample(args) -> int:
    gtr = _load_checkpoint(args.gtr, GTR)
    stnet = _load_stnet(args.sfm)
    image = read_pgm(args.image).astype(np.float64) / 255.0
    if image.shape != (gtr.config.image_size,) * 2:
        raise ConfigError(f"image {args.image} is {image.shape}, the GTR expects {gtr.config.image_size}x{gtr.config.image_size}")
    masks = predict(gtr, stnet, image, n=args.n, steps=args.steps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, m in enumerate(masks):
        name = f"pred_{i:03d}.pgm"
        write_pgm(out / name, (m * 255).astype(np.uint8))
        files.append(name)
    manifest = {
        "image": str(args.image),
        "n": args.n,
        "steps": args.steps if stnet is not None else 0,
        "seed": args.seed,
        "gtr": gtr.content_hash(),
        "sfm": stnet.content_hash() if stnet is not None else None,
        "files": files,
    }
    (out / "predictions.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} masks to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data = load_dataset(args.data)
    gtr = _load_checkpoint(args.gtr, GTR)
    stnet = _load_stnet(args.sfm)
    if data[0].image.shape != (gtr.config.image_size,) * 2:
        raise ConfigError(f"dataset images are {data[0].image.shape}, the GTR expects {gtr.config.image_size}")
    report = evaluate(data, gtr, stnet, n=args.n, steps=args.steps, runs=args.runs, seed=args.seed, self_eval=args.self_eval)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(args.suite, break_cholesky=args.break_cholesky)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_USAGE if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="atfm", description="Truncated flow matching for ambiguous segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(p):
        p.add_argument("--config", help="JSON run configuration with net/gtr/sfm/synth sections")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")

    p = sub.add_parser("gen-data", help="generate a synthetic multi-rater dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--annotators", type=int)
    p.add_argument("--empty-prob", type=float)
    config_args(p)
    p.set_defaults(func=cmd_gen_data)

    for name, func, needs_gtr in (("train-gtr", cmd_train_gtr, False), ("train-sfm", cmd_train_sfm, True)):
        p = sub.add_parser(name, help=f"{'second' if needs_gtr else 'first'}-stage training")
        p.add_argument("--data", required=True)
        if needs_gtr:
            p.add_argument("--gtr", required=True, help="frozen GTR checkpoint")
            p.add_argument("--alpha", type=float, help="Dice weight")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--log", help="per-epoch CSV (default: next to the checkpoint)")
        config_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("sample", help="predict masks for one image")
    p.add_argument("--image", required=True, help="8-bit PGM image")
    p.add_argument("--gtr", required=True)
    p.add_argument("--sfm", required=True, help="ST-Net checkpoint, or 'none' for stage-1 only")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="GED, HM-IoU and MDM over repeated runs")
    p.add_argument("--data", required=True)
    p.add_argument("--gtr", required=True)
    p.add_argument("--sfm", required=True, help="ST-Net checkpoint, or 'none' for stage-1 only")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--self-eval", action="store_true", help="score predictions against themselves")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="numerical checks of the theorems and algebra")
    p.add_argument("--suite", choices=SUITES, default="all")
    p.add_argument("--break-cholesky", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def _positive(args):
    for name in ("n", "steps", "runs", "count", "epochs", "batch_size"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise ConfigError(f"--{name.replace('_', '-')} must be >= 1, got {value}")


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _positive(args)
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
