"""Command-line entry point: ``tlbias <gen-data|train|eval|predict|report>``.

Exit codes: 0 success, 2 bad usage or configuration, 3 I/O or data problems.
"""

import os

# BLAS thread pools must be pinned before numpy loads; runs are then bit-reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import dataclass, field  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .dataset import (  # noqa: E402
    GeneratorParams,
    build_octagon_mask,
    generate_dataset,
    limit_series,
    read_cycle,
    write_cycle,
)
from .errors import (  # noqa: E402
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    UsageError,
)
from .evaluation import (  # noqa: E402
    ExperimentReport,
    LossCurves,
    TrainConfig,
    evaluate_cycle,
    export_report,
    pooled_split,
    predict,
    run_experiment,
    train,
)
from .model import ModelConfig, build_model, load_weights_into, save_weights  # noqa: E402

log = logging.getLogger("tlbias")

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 2, 3


@dataclass
class RunConfig:
    H: int = 32
    W: int = 32
    D: int = 16
    chamfer: int = 8
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    n_cycles: int = 11
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: Path = Path("data")
    output_dir: Path = Path("out")
    weights: Path | None = None
    test_cycle_id: str = "cycle_10"
    report_cycles: list = field(default_factory=list)
    global_seed: int = 0

    @property
    def weights_path(self) -> Path:
        return self.weights if self.weights is not None else self.output_dir / "weights.nbn"

    def validate(self) -> None:
        for name in ("H", "W", "D"):
            if getattr(self, name) < 1:
                raise ConfigError(f"geometry.{name} must be positive")
        if not 0 <= self.chamfer <= min(self.H, self.W) // 2:
            raise ConfigError(
                f"geometry.chamfer={self.chamfer} outside [0, {min(self.H, self.W) // 2}]")
        if self.n_cycles < 2:
            raise ConfigError("n_cycles must be >= 2")
        self.generator.validate()
        self.model.validate()
        self.train.validate()
        if tuple(self.model.in_shape) != (self.H, self.W, self.D):
            raise ConfigError(f"model.in_shape {self.model.in_shape} != geometry "
                              f"{(self.H, self.W, self.D)}")
        if not str(self.data_dir) or not str(self.output_dir):
            raise ConfigError("paths.data_dir and paths.output_dir must be non-empty")

    def geometry(self):
        return build_octagon_mask(self.H, self.W, self.D, self.chamfer)


def _section(raw: dict, key: str) -> dict:
    val = raw.get(key, {})
    if not isinstance(val, dict):
        raise ConfigError(f"{key} must be a JSON object")
    return val


def load_run_config(path, overrides: argparse.Namespace | None = None) -> RunConfig:
    """Parse a JSON run config and apply command-line overrides.

    Relative paths are resolved against the config file's directory.
    ``--seed`` replaces the global seed and the model and training seeds.
    """
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        base = p.resolve().parent
    known = {"geometry", "generator", "n_cycles", "model", "train", "paths",
             "test_cycle_id", "report_cycles", "global_seed"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")

    geo = _section(raw, "geometry")
    bad_geo = set(geo) - {"H", "W", "D", "chamfer"}
    if bad_geo:
        raise ConfigError(f"unknown geometry fields: {sorted(bad_geo)}")
    H, W, D = int(geo.get("H", 32)), int(geo.get("W", 32)), int(geo.get("D", 16))
    seed = int(raw.get("global_seed", 0))
    if overrides is not None and getattr(overrides, "seed", None) is not None:
        seed = int(overrides.seed)
        seed_forced = True
    else:
        seed_forced = False

    model_raw = dict(_section(raw, "model"))
    model_raw.setdefault("in_shape", [H, W, D])
    if seed_forced or "seed" not in model_raw:
        model_raw["seed"] = seed
    train_raw = dict(_section(raw, "train"))
    if seed_forced or "seed" not in train_raw:
        train_raw["seed"] = seed
    paths = _section(raw, "paths")
    bad_paths = set(paths) - {"data_dir", "output_dir", "weights"}
    if bad_paths:
        raise ConfigError(f"unknown paths fields: {sorted(bad_paths)}")

    def resolve(v):
        q = Path(v)
        return q if q.is_absolute() else base / q

    try:
        cfg = RunConfig(
            H=H, W=W, D=D, chamfer=int(geo.get("chamfer", 8)),
            generator=GeneratorParams.from_dict(_section(raw, "generator")),
            n_cycles=int(raw.get("n_cycles", 11)),
            model=ModelConfig.from_dict(model_raw),
            train=TrainConfig.from_dict(train_raw),
            data_dir=resolve(paths.get("data_dir", "data")),
            output_dir=resolve(paths.get("output_dir", "out")),
            weights=resolve(paths["weights"]) if paths.get("weights") else None,
            test_cycle_id=str(raw.get("test_cycle_id", "cycle_10")),
            report_cycles=list(raw.get("report_cycles", [])),
            global_seed=seed,
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"bad config value ({e})") from None
    if overrides is not None:
        if getattr(overrides, "out", None):
            cfg.output_dir = Path(overrides.out)
        if getattr(overrides, "test_cycle", None):
            cfg.test_cycle_id = overrides.test_cycle
    cfg.validate()
    return cfg


def default_config_dict() -> dict:
    """The default run configuration as a JSON-ready dict."""
    cfg = RunConfig()
    return {
        "geometry": {"H": cfg.H, "W": cfg.W, "D": cfg.D, "chamfer": cfg.chamfer},
        "generator": cfg.generator.to_dict(),
        "n_cycles": cfg.n_cycles,
        "model": {k: v for k, v in cfg.model.to_dict().items() if k not in ("in_shape", "seed")},
        "train": {k: v for k, v in cfg.train.to_dict().items() if k != "seed"},
        "paths": {"data_dir": "data", "output_dir": "out"},
        "test_cycle_id": cfg.test_cycle_id,
        "global_seed": cfg.global_seed,
    }


def load_cycles(data_dir: Path) -> list:
    if not data_dir.is_dir():
        raise FormatError(f"data directory {data_dir} does not exist; run gen-data first")
    dirs = sorted(p for p in data_dir.iterdir() if (p / "manifest.json").is_file())
    if not dirs:
        raise FormatError(f"no cycle directories under {data_dir}")
    return [read_cycle(p) for p in dirs]


def cmd_gen_data(cfg: RunConfig) -> int:
    geom = cfg.geometry()
    cycles = generate_dataset(geom, cfg.generator, cfg.n_cycles, cfg.global_seed)
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    gaps = []
    for c in cycles:
        write_cycle(c, cfg.data_dir / c.cycle_id)
        gap = np.abs(limit_series(c, "mflpd_on") - limit_series(c, "mflpd_off"))
        gaps.append((gap.mean(), gap.max()))
    print(f"wrote {len(cycles)} cycles x {cfg.generator.statepoints} statepoints to {cfg.data_dir}")
    print(f"lattice {geom.H}x{geom.W}x{geom.D}, chamfer {geom.chamfer}: "
          f"{geom.valid_columns} valid columns, {geom.valid_nodes} valid nodes")
    means = [g[0] for g in gaps]
    print(f"offline-vs-online limit gap: per-cycle mean {min(means):.4f}..{max(means):.4f}, "
          f"max {max(g[1] for g in gaps):.4f}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    cycles = load_cycles(cfg.data_dir)
    test, train_ids, train_set, val_set = pooled_split(cycles, cfg.test_cycle_id, cfg.train)
    model = build_model(cfg.model)
    sched = cfg.train.schedule(len(train_set))
    print(f"held-out {test.cycle_id}; training on {len(train_ids)} cycles: "
          f"{len(train_set)} train / {len(val_set)} val statepoints, {sched.total_steps} steps")
    model, curves = train(model, train_set, val_set, cfg.train, test.geometry.mask)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    save_weights(model, cfg.weights_path)
    (cfg.output_dir / "loss.csv").write_text(curves.to_csv(), encoding="utf-8")
    print(f"best epoch {curves.best_epoch}, validation masked MSE {curves.best_val_loss:.6e}")
    print(f"final lr {curves.steps[-1][2]!r}")
    print(f"weights -> {cfg.weights_path}")
    return EXIT_OK


def _trained_model(cfg: RunConfig):
    if not cfg.weights_path.is_file():
        raise FormatError(f"weights file {cfg.weights_path} not found; run train first")
    model = build_model(cfg.model)
    load_weights_into(model, cfg.weights_path)
    return model


def _read_loss_csv(path: Path) -> LossCurves | None:
    if not path.is_file():
        return None
    curves = LossCurves()
    lines = path.read_text(encoding="utf-8").splitlines()[1:]
    for line in lines:
        step, epoch, lr, loss, val = line.split(",")
        curves.steps.append((int(step), int(epoch), float(lr), float(loss)))
        if val:
            curves.epochs.append((int(epoch), float(val)))
    if curves.epochs:
        curves.best_epoch, curves.best_val_loss = min(curves.epochs, key=lambda e: e[1])
    return curves


def cmd_eval(cfg: RunConfig) -> int:
    cycles = load_cycles(cfg.data_dir)
    test, train_ids, _, _ = pooled_split(cycles, cfg.test_cycle_id, cfg.train)
    model = _trained_model(cfg)
    metrics, limits = evaluate_cycle(model, test)
    curves = _read_loss_csv(cfg.output_dir / "loss.csv")
    report = ExperimentReport(test.cycle_id, train_ids, cfg.train.to_dict(),
                              cfg.model.to_dict(), metrics, limits, curves)
    export_report(report, cfg.output_dir)
    print(f"held-out cycle {test.cycle_id} ({test.T} statepoints)")
    for line in metrics.summary_lines():
        print(line)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, cycle_id: str | None, statepoint: int) -> int:
    cycles = {c.cycle_id: c for c in load_cycles(cfg.data_dir)}
    cid = cycle_id or cfg.test_cycle_id
    if cid not in cycles:
        raise UsageError(f"unknown cycle {cid!r}")
    cycle = cycles[cid]
    if not 0 <= statepoint < cycle.T:
        raise UsageError(f"statepoint {statepoint} outside [0, {cycle.T})")
    model = _trained_model(cfg)
    (pred,) = predict(model, [cycle.statepoints[statepoint]])
    pred = np.where(cycle.geometry.mask, pred, 0.0).astype("<f4")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / f"sp{statepoint}.mflpd_pred.bin"
    out.write_bytes(pred.tobytes())
    print(f"{cid} statepoint {statepoint}: limiting MFLPD predicted "
          f"{float(pred[cycle.geometry.mask].max()):.5f} -> {out}")
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    cycles = load_cycles(cfg.data_dir)
    targets = cfg.report_cycles or [cfg.test_cycle_id]
    summary = {"cycles": {}, "mean_reductions": {}}
    for cid in targets:
        report, _ = run_experiment(cycles, cid, cfg.train, cfg.model)
        export_report(report, cfg.output_dir / cid)
        summary["cycles"][cid] = report.metrics.to_dict()
        print(f"== {cid}")
        for line in report.metrics.summary_lines():
            print(line)
    for k in ("nodal_mse", "limit_mae", "max_limit_bias"):
        summary["mean_reductions"][k] = float(np.mean(
            [summary["cycles"][c]["reductions"][k] for c in targets]))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print("mean reductions: " + ", ".join(
        f"{k} {100 * v:.1f}%" for k, v in summary["mean_reductions"].items()))
    return EXIT_OK


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=d, help="override every seed")
    parser.add_argument("--out", default=d, help="output directory override")
    parser.add_argument("--test-cycle", default=d, dest="test_cycle",
                        help="held-out cycle id override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tlbias", description="Thermal-limit (MFLPD) bias correction runs.")
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("gen-data", "write synthetic fuel cycles"),
                       ("train", "train on all but the held-out cycle"),
                       ("eval", "score saved weights on the held-out cycle"),
                       ("predict", "write one predicted MFLPD array"),
                       ("report", "full leave-one-cycle-out run(s) with artifacts"),
                       ("init-config", "print the default configuration")):
        sp = sub.add_parser(name, help=text)
        _global_flags(sp, suppress=True)
        if name == "predict":
            sp.add_argument("--cycle", default=None, help="cycle id (default: held-out cycle)")
            sp.add_argument("--statepoint", type=int, required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    if args.command == "init-config":
        print(json.dumps(default_config_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    try:
        cfg = load_run_config(args.config, args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "predict":
            return cmd_predict(cfg, args.cycle, args.statepoint)
        return cmd_report(cfg)
    except (ConfigError, UsageError, DomainError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
