"""Command-line pipeline: generate, pretrain, extract, probe, report.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from . import evalsuite as S
from . import trainer as TR
from .dataio import generate_synthetic, load_dataset
from .errors import ConfigError, ContractError, FormatError

logger = logging.getLogger("tactile_moco")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "TACTILE_MOCO_THREADS"


class UsageError(Exception):
    pass


# run config -------------------------------------------------------------------


@dataclass
class DataPaths:
    train: str = "data/train/manifest.csv"
    test: str = "data/test/manifest.csv"


@dataclass
class RunConfig:
    """One JSON document: ``data``, ``out_dir``, ``feature_kind``, ``train`` and ``probe`` sections."""

    data: DataPaths = field(default_factory=DataPaths)
    out_dir: str = "runs"
    feature_kind: str = "backbone"
    train: TR.TrainConfig = field(default_factory=TR.TrainConfig)
    probe: S.ProbeConfig = field(default_factory=S.ProbeConfig)

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "out_dir": self.out_dir,
            "feature_kind": self.feature_kind,
            "train": self.train.to_dict(),
            "probe": asdict(self.probe),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        for k in d:
            if k not in allowed:
                raise ConfigError(f"unknown config key {k!r}")
        data = d.get("data", {})
        if not isinstance(data, dict):
            raise ConfigError("config key 'data' must be an object")
        for k in data:
            if k not in {f.name for f in fields(DataPaths)}:
                raise ConfigError(f"unknown config key data.{k!r}")
        probe = d.get("probe", {})
        if not isinstance(probe, dict):
            raise ConfigError("config key 'probe' must be an object")
        for k in probe:
            if k not in {f.name for f in fields(S.ProbeConfig)}:
                raise ConfigError(f"unknown config key probe.{k!r}")
        train = d.get("train", {})
        if not isinstance(train, dict):
            raise ConfigError("config key 'train' must be an object")
        try:
            train_cfg = TR.TrainConfig.from_dict(train)
        except ConfigError as exc:
            raise ConfigError(f"train: {exc}") from None
        kind = d.get("feature_kind", "backbone")
        if kind not in S.FEATURE_KINDS:
            raise ConfigError(f"feature_kind {kind!r} not in {S.FEATURE_KINDS}")
        try:
            return cls(DataPaths(**data), str(d.get("out_dir", "runs")), kind, train_cfg, S.ProbeConfig(**probe))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {p}: {exc.strerror or exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return RunConfig.from_dict(doc)


def _write_run_log(out_dir: Path, command: str, rc: RunConfig, extra: dict | None = None) -> None:
    """Persist the resolved config next to the outputs, plus a run log carrying the tool version."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(rc.dumps())
    with open(out_dir / "run.log", "a") as fh:
        fh.write(f"tactile_moco {__version__} {command}\n")
        for k, v in (extra or {}).items():
            fh.write(f"{k}: {v}\n")
        fh.write("config:\n" + rc.dumps())


# threads ----------------------------------------------------------------------


def _thread_limit():
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 0:
        raise ConfigError(f"{THREADS_ENV}={n} must be >= 0")
    if n == 0:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# commands ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.n < 2:
        raise UsageError(f"--n must be >= 2, got {args.n}")
    if args.size < 32:
        raise UsageError(f"--size must be >= 32, got {args.size}")
    manifest = generate_synthetic(
        args.n, args.size, args.seed, args.out, amplitude_scale=args.amplitude_scale, label_noise=args.label_noise
    )
    print(manifest)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    rc = load_run_config(args.config)
    overrides = {}
    if args.method is not None:
        if args.method not in TR.METHODS:
            raise UsageError(f"unknown method {args.method!r}; valid methods: {', '.join(TR.METHODS)}")
        overrides["method"] = args.method
    for name in ("epochs", "seed"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    if overrides:
        rc.train = TR.TrainConfig.from_dict({**rc.train.to_dict(), **overrides})
    if args.out is not None:
        rc.out_dir = args.out
    out = Path(rc.out_dir)
    dataset = load_dataset(rc.data.train)
    cfg = rc.train
    logger.info("pretraining %s on %d samples for %d epochs", cfg.method, len(dataset), cfg.epochs)
    _write_run_log(out, f"pretrain --method {cfg.method}", rc, {"config_digest": cfg.digest()})
    try:
        result = TR.train(dataset, cfg, snapshot_dir=out)
    except TR.TrainingDiverged as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
    ckpt_path = out / f"{cfg.method}.ckpt"
    TR.save_checkpoint(result.checkpoint, ckpt_path)
    TR.write_metrics(out / f"{cfg.method}_metrics.csv", result.records)
    for epoch, loss in result.epoch_losses().items():
        logger.info("epoch %d mean loss %.6f", epoch, loss)
    print(ckpt_path)
    return EXIT_OK


def cmd_extract(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    ckpt = TR.load_checkpoint(ckpt_path)
    dataset = load_dataset(args.manifest)
    feats = S.extract_features(ckpt, dataset, args.kind)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    S.save_features(feats, out)
    logger.info("wrote %d x %d %s features from %s", *feats.features.shape, args.kind, ckpt.method)
    print(out)
    return EXIT_OK


def cmd_probe(args) -> int:
    rc = load_run_config(args.config)
    cfg = asdict(rc.probe)
    if args.probe is not None:
        cfg["probe"] = args.probe
    if args.k is not None:
        cfg["knn_k"] = args.k
    if args.seed is not None:
        cfg["seed"] = args.seed
    pcfg = S.ProbeConfig(**cfg)
    train, test = S.load_features(args.train), S.load_features(args.test)
    if pcfg.probe == "knn":
        k = pcfg.knn_k if pcfg.knn_k is not None else S.default_k(len(train))
        logger.info("knn probe: k=%d (n_train=%d, metric=%s)", k, len(train), pcfg.knn_metric)
    acc = S.run_probe(train, test, pcfg)
    method = args.method or Path(args.train).stem.rsplit("_", 1)[0]
    line = [method, pcfg.probe, repr(acc)]
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        new = not out.exists()
        with open(out, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(["method", "probe", "accuracy"])
            w.writerow(line)
    print(",".join(line))
    return EXIT_OK


def read_results(paths) -> list[tuple[str, str, float]]:
    rows = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"results file not found: {p}")
        with open(p, newline="") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != ["method", "probe", "accuracy"]:
                raise FormatError(f"{p}: header must be method,probe,accuracy")
            for lineno, r in enumerate(reader, start=2):
                try:
                    rows.append((r[0], r[1], float(r[2])))
                except (IndexError, ValueError):
                    raise FormatError(f"{p}:{lineno}: malformed result row") from None
    return rows


def cmd_report(args) -> int:
    results = read_results(args.results)
    text = S.report_csv(results) if args.format == "csv" else S.report(results)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# entry point ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tactile-moco", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tactile_moco {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic before/after dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--amplitude-scale", type=float, default=1.0)
    g.add_argument("--label-noise", type=float, default=0.05)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("pretrain", help="pretrain an encoder")
    t.add_argument("--config")
    t.add_argument("--method", help=f"one of {', '.join(TR.METHODS)}")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("extract", help="embed a dataset with a checkpoint's query encoder")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--kind", choices=S.FEATURE_KINDS, default="backbone")
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("probe", help="fit a probe on train features, score test features")
    r.add_argument("--train", required=True)
    r.add_argument("--test", required=True)
    r.add_argument("--config")
    r.add_argument("--probe", choices=S.PROBES)
    r.add_argument("--k", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--method", help="row label in the results (default: train file stem up to its last underscore)")
    r.add_argument("--out", help="append the result to this CSV")
    r.set_defaults(func=cmd_probe)

    o = sub.add_parser("report", help="render probe results as a methods x probes table")
    o.add_argument("results", nargs="+")
    o.add_argument("--format", choices=("table", "csv"), default="table")
    o.add_argument("--out")
    o.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        limit = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limit is not None:
                limit.unregister()
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ContractError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
