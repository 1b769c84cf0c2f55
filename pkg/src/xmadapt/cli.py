"""Command-line entry point: ``xmadapt gen-data|train|eval|compare|gradcheck|params|config``.

Exit codes: 0 ok, 2 config error, 3 I/O failure, 4 training diverged,
5 checkpoint format error, 6 missing checkpoint, 7 gradcheck failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import (ConfigError, ContractError, DataError, DataFormatError, DimensionError,
                     GenerationError, TrainingDiverged)

log = logging.getLogger("xmadapt")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_FORMAT, EXIT_MISSING, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6, 7

COMPARE_ROWS = ("t1", "t1ce", "t2", "flair", "early", "cross")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    data_dir: str
    out_dir: str
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 8
    adapter_depth: Optional[int] = None  # None -> depth // 2
    heads: int = 4
    mlp_ratio: float = 4.0
    variant: str = "cross"
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 30
    seed: int = 42
    eval_every: int = 5

    REQUIRED = ("data_dir", "out_dir")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def defaults(cls) -> dict:
        return {f.name: f.default for f in fields(cls) if f.name not in cls.REQUIRED}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(cls.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = [k for k in cls.REQUIRED if k not in d]
        if missing:
            raise ConfigError(f"missing required config keys: {missing}")
        cfg = cls(**d)
        try:
            cfg.model_config()  # validates shapes and variant
            cfg.train_config()
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not KEY=VALUE")
            try:
                doc[key] = json.loads(value)
            except json.JSONDecodeError:
                doc[key] = value
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self):
        from .model import ModelConfig

        return ModelConfig(self.image_size, self.patch_size, self.embed_dim, self.depth, self.heads,
                           self.mlp_ratio, self.adapter_depth, self.variant, self.lambda_dice,
                           self.lambda_ce, seed=self.seed)

    def train_config(self):
        from .trainer import TrainConfig

        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0 or self.eval_every < 0:
            raise ConfigError("epochs and eval_every must be nonnegative")
        try:
            return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed,
                               lambda_dice=self.lambda_dice, lambda_ce=self.lambda_ce,
                               adapter_depth=self.adapter_depth, eval_every=self.eval_every)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def tag(self) -> str:
        return self.variant.replace(":", "_")

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.tag

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / "checkpoint.xmck"

    @property
    def manifest(self) -> Path:
        return Path(self.data_dir) / "manifest.json"


def _fmt2(value) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def _full(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


def _open_dataset(cfg: RunConfig):
    from .synthdata import Dataset

    if not cfg.manifest.exists():
        raise CliError(EXIT_IO, f"no dataset manifest at {cfg.manifest}")
    ds = Dataset(cfg.manifest)
    if ds.image_size != cfg.image_size:
        raise ConfigError(f"dataset image_size {ds.image_size} != config image_size {cfg.image_size}")
    return ds


def metrics_table(rows) -> str:
    """Markdown table of (method, EvalRecord) pairs with 2-decimal numbers."""
    lines = ["| Method | Dice (%) | Hd95 |", "|---|---:|---:|"]
    for name, rec in rows:
        lines.append(f"| {name} | {_fmt2(rec.dice_percent)} | {_fmt2(rec.hd95)} |")
    return "\n".join(lines)


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "dice_percent", "hd95", "hd95_undefined"])
        for r in records:
            w.writerow([r.sample_id, _full(r.dice_percent), _full(r.hd95), r.hd95_undefined])


def _load_net(cfg: RunConfig, path: Path):
    from .trainer import checkpoint_load

    if not path.exists():
        raise CliError(EXIT_MISSING, f"missing checkpoint for variant {cfg.variant}: {path}")
    try:
        net, _ = checkpoint_load(path, cfg.model_config(), cfg.train_config())
    except (DataFormatError, DimensionError) as exc:
        raise CliError(EXIT_FORMAT, f"checkpoint {path}: {exc}") from None
    return net


# ---- commands -------------------------------------------------------------

def cmd_config(args) -> int:
    if args.defaults:
        print(json.dumps(RunConfig.defaults(), indent=2))
        return EXIT_OK
    if args.write_variants:
        out = Path(args.write_variants)
        out.mkdir(parents=True, exist_ok=True)
        base = {**RunConfig.defaults(), "data_dir": args.data_dir, "out_dir": args.out_dir}
        for row in COMPARE_ROWS:
            variant = row if row in ("early", "cross") else f"single:{row}"
            RunConfig.from_dict({**base, "variant": variant})
            (out / f"{row}.json").write_text(json.dumps({**base, "variant": variant}, indent=2) + "\n")
        print(out)
        return EXIT_OK
    if args.check:
        cfg = RunConfig.load(args.check, args.set or ())
        print(json.dumps(cfg.to_dict(), indent=2))
        return EXIT_OK
    raise ConfigError("config needs --defaults, --check FILE or --write-variants DIR")


def cmd_gen_data(args) -> int:
    from .synthdata import PhantomSpec, build_dataset, dataset_checksum

    spec = PhantomSpec()
    if args.spec:
        try:
            spec = PhantomSpec.from_json(json.loads(Path(args.spec).read_text()))
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read spec {args.spec}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"spec {args.spec} is not valid JSON: {exc}") from None
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    try:
        manifest = build_dataset(spec, args.train, args.test, args.out)
    except GenerationError as exc:
        raise ConfigError(str(exc)) from None
    print(f"manifest {manifest}")
    print(f"checksum {dataset_checksum(manifest)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import GliomaNet
    from .trainer import OptimizerState, checkpoint_save, evaluate, train, write_history_csv

    cfg = RunConfig.load(args.config, args.set or ())
    ds = _open_dataset(cfg)
    tcfg = cfg.train_config()
    net = GliomaNet(cfg.model_config())
    state = OptimizerState.for_params(net.parameters(), tcfg)
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    history = train(net, ds, tcfg, state, on_epoch=lambda r: log.info(
        "epoch %d loss %.6f", r.epoch, r.train_loss))
    write_history_csv(history, cfg.run_dir / "history.csv")
    checkpoint_save(net, state, cfg.checkpoint_path)
    (cfg.run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    agg, records = evaluate(net, ds, "test")
    write_records_csv(records, cfg.run_dir / "metrics.csv")
    print(metrics_table([(cfg.variant, agg)]))
    print(f"checkpoint {cfg.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate

    cfg = RunConfig.load(args.config, args.set or ())
    ds = _open_dataset(cfg)
    path = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_path
    net = _load_net(cfg, path)
    agg, records = evaluate(net, ds, "test")
    out = Path(args.csv) if args.csv else cfg.run_dir / "eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_records_csv(records, out)
    print(metrics_table([(cfg.variant, agg)]))
    print(f"hd95 undefined for {agg.hd95_undefined} of {len(records)} samples")
    return EXIT_OK


def _row_name(variant: str) -> str:
    return variant.split(":", 1)[1] if variant.startswith("single:") else variant


def cmd_compare(args) -> int:
    from .trainer import evaluate

    config_dir = Path(args.config_dir)
    if not config_dir.is_dir():
        raise CliError(EXIT_IO, f"no config directory {config_dir}")
    configs = {}
    for path in sorted(config_dir.glob("*.json")):
        cfg = RunConfig.load(path)
        configs[_row_name(cfg.variant)] = cfg
    missing = [r for r in COMPARE_ROWS if r not in configs]
    if missing:
        raise CliError(EXIT_MISSING, f"no config for variants {missing} in {config_dir}")
    test_ids = None
    rows = []
    for name in COMPARE_ROWS:
        cfg = configs[name]
        ds = _open_dataset(cfg)
        ids = ds.ids("test")
        if test_ids is None:
            test_ids = ids
        elif ids != test_ids:
            raise ConfigError(f"variant {cfg.variant} uses a different test split")
        agg, _ = evaluate(_load_net(cfg, cfg.checkpoint_path), ds, "test")
        rows.append((name, agg))
    out = Path(args.out) if args.out else config_dir
    out.mkdir(parents=True, exist_ok=True)
    table = metrics_table(rows)
    (out / "comparison.md").write_text(table + "\n")
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "dice_percent", "hd95", "hd95_undefined"])
        for name, rec in rows:
            w.writerow([name, _full(rec.dice_percent), _full(rec.hd95), rec.hd95_undefined])
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_model_suite, run_op_suite

    cfg = RunConfig.load(args.config, args.set or ()) if args.config else None
    from .model import ModelConfig

    mcfg = cfg.model_config() if cfg else ModelConfig()
    results = run_op_suite(seed=args.seed) + run_model_suite(mcfg, seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.error:.3e}  < {r.tolerance:.0e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_params(args) -> int:
    from .model import GliomaNet
    from .trainer import count_params

    cfg = RunConfig.load(args.config, args.set or ())
    net = GliomaNet(cfg.model_config())
    if args.unfreeze:
        net.set_trainable(True)
    rep = count_params(net)
    print("| Method | All | Training | Percent |")
    print("|---|---:|---:|---:|")
    print(f"| {cfg.variant} | {rep.total_params} | {rep.trainable_params} | {rep.percent:.2f}% |")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmadapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="RunConfig JSON file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (value parsed as JSON when possible)")

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    g.add_argument("--spec", help="PhantomSpec JSON (defaults used when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--test", type=int, default=50)
    g.add_argument("--seed", type=int, default=None, help="overrides the spec seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant, write history and checkpoint")
    with_config(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    with_config(e)
    e.add_argument("--checkpoint", help="defaults to <out_dir>/<variant>/checkpoint.xmck")
    e.add_argument("--csv", help="per-sample CSV path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="evaluate all six variants into one table")
    c.add_argument("--config-dir", required=True, help="directory holding one RunConfig per variant")
    c.add_argument("--out", help="where comparison.md/.csv go (default: the config dir)")
    c.set_defaults(func=cmd_compare)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    with_config(gc, required=False)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    pr = sub.add_parser("params", help="parameter counts (All / Training / Percent)")
    with_config(pr)
    pr.add_argument("--unfreeze", action="store_true", help="count with every parameter trainable")
    pr.set_defaults(func=cmd_params)

    cf = sub.add_parser("config", help="print defaults, validate a config, or write per-variant configs")
    cf.add_argument("--defaults", action="store_true")
    cf.add_argument("--check", metavar="FILE")
    cf.add_argument("--set", action="append", metavar="KEY=VALUE")
    cf.add_argument("--write-variants", metavar="DIR")
    cf.add_argument("--data-dir", default="data")
    cf.add_argument("--out-dir", default="runs")
    cf.set_defaults(func=cmd_config)
    return p


def _threads() -> int:
    raw = os.environ.get("XMADAPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"XMADAPT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("XMADAPT_THREADS must be at least 1")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
