"""Command-line entry point: ``dxformer {synth,train,eval,predict,gradcheck,ablate}``.

Every command reads an INI file with ``[data]``, ``[model]``, ``[train]`` and
``[output]`` sections, applies command-line overrides, and writes the fully
resolved configuration into its run directory before doing any work.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import numerics as nx
from .data import (
    DEFAULT_CADENCE_S,
    CsvSchema,
    FarmSeries,
    WindowBatch,
    apply_zscore,
    fill_missing,
    generate_synthetic,
    make_windows,
    parse_csv,
    prepare_splits,
    temporal_indices,
    write_csv,
)
from .errors import ConfigError, ContractError, DataError, NumericalFailure, ShapeError
from .model import VARIANTS, Forecaster, ModelConfig
from .training import TrainConfig, baselines, evaluate, load_model, smooth_l1, train

logger = logging.getLogger("dxformer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
HORIZONS = (12, 24, 36)
SPLITS = ("train", "val", "test")
RESOLVED_NAME = "config.ini"

# Toy scale used by ``gradcheck``: small enough for dense finite differences.
GRADCHECK_MODEL = dict(n_turbines=3, n_exo=2, time_emb_dim=2, d_model=8, n_layers=1, lookback=8, horizon=2, n_heads=2)


@dataclass(frozen=True)
class DataConfig:
    """Where the farm comes from and how its CSV is laid out.

    ``source = synthetic`` builds a seeded farm from the ``synth_*`` keys;
    ``source = csv`` reads ``path`` (relative paths resolve against the
    config file's directory) with the column mapping below.
    """

    source: str = "synthetic"
    path: str = ""
    cadence_s: int = DEFAULT_CADENCE_S
    turbine_col: str = "turbine"
    power_col: str = "power"
    exo_cols: str = "wind_speed,temperature"
    timestamp_col: str = "timestamp"
    day_col: str = ""
    time_col: str = ""
    epoch: str = "2020-01-01"
    day_origin: int = 1
    missing_sentinel: str = ""
    synth_turbines: int = 8
    synth_steps: int = 20_000
    synth_exo: int = 2
    synth_seed: int = 0
    synth_start: str = "2020-01-01"
    synth_missing_frac: float = 0.01
    synth_rated_kw: float = 1500.0

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"data.source must be synthetic or csv, got {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ConfigError("data.path is required when data.source = csv")
        if self.cadence_s < 1 or 86_400 % self.cadence_s:
            raise ConfigError(f"data.cadence_s must divide one day, got {self.cadence_s}")

    def schema(self) -> CsvSchema:
        exo = tuple(c.strip() for c in self.exo_cols.split(",") if c.strip())
        if not exo:
            raise ConfigError("data.exo_cols lists no columns")
        try:
            return CsvSchema(
                turbine=self.turbine_col,
                power=self.power_col,
                exo=exo,
                timestamp=self.timestamp_col or None,
                day=self.day_col or None,
                time_of_day=self.time_col or None,
                epoch=self.epoch,
                day_origin=self.day_origin,
                missing_sentinel=self.missing_sentinel or None,
            )
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs/default"
    base_dir: Path = Path(".")

    def data_path(self) -> Path:
        p = Path(self.data.path)
        return p if p.is_absolute() else self.base_dir / p


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {type(default).__name__}") from None
    return raw.strip()


def _section(parser: configparser.ConfigParser, name: str, cls) -> dict:
    if not parser.has_section(name):
        return {}
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for key, raw in parser.items(name):
        if key not in defaults:
            raise ConfigError(f"unknown key [{name}] {key}")
        out[key] = _coerce(name, key, raw, defaults[key])
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown = set(parser.sections()) - {"data", "model", "train", "output"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    out = parser.get("output", "dir", fallback="runs/default")
    extra = set(parser.options("output")) - {"dir"} if parser.has_section("output") else set()
    if extra:
        raise ConfigError(f"unknown key(s) in [output]: {sorted(extra)}")
    return RunConfig(
        data=DataConfig(**_section(parser, "data", DataConfig)),
        model=ModelConfig(**_section(parser, "model", ModelConfig)),
        train=TrainConfig(**_section(parser, "train", TrainConfig)),
        out=out,
        base_dir=path.resolve().parent,
    )


def _ini_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_config(cfg: RunConfig, path) -> None:
    """Write every key, defaults included, so the file alone reproduces the run."""
    parser = configparser.ConfigParser(interpolation=None)
    data = asdict(cfg.data)
    if cfg.data.source == "csv":
        data["path"] = str(cfg.data_path().resolve())
    for name, values in (("data", data), ("model", cfg.model.to_dict()), ("train", cfg.train.to_dict())):
        parser[name] = {k: _ini_value(v) for k, v in values.items()}
    parser["output"] = {"dir": str(Path(cfg.out).resolve())}
    with open(path, "w") as fh:
        parser.write(fh)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    model, tr, data = cfg.model, cfg.train, cfg.data
    if getattr(args, "variant", None):
        model = model.with_variant(args.variant)
    if getattr(args, "horizon", None):
        model = replace(model, horizon=args.horizon)
    if getattr(args, "seed", None) is not None:
        tr = replace(tr, seed=args.seed)
        data = replace(data, synth_seed=args.seed) if args.command == "synth" else data
    out = args.out if getattr(args, "out", None) else cfg.out
    return replace(cfg, model=model, train=tr, data=data, out=out)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def load_series(cfg: RunConfig) -> FarmSeries:
    d = cfg.data
    if d.source == "synthetic":
        try:
            return generate_synthetic(
                N=d.synth_turbines,
                T=d.synth_steps,
                C=d.synth_exo,
                seed=d.synth_seed,
                cadence_s=d.cadence_s,
                start=d.synth_start,
                rated_kw=d.synth_rated_kw,
                missing_frac=d.synth_missing_frac,
            )
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
    path = cfg.data_path()
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    return parse_csv(path, d.schema(), d.cadence_s)


def _model_config_for(cfg: RunConfig, fs: FarmSeries) -> ModelConfig:
    """Farm extents come from the data; the config may only confirm them."""
    base = ModelConfig()
    for name, actual in (("n_turbines", fs.N), ("n_exo", fs.C)):
        declared = getattr(cfg.model, name)
        if declared != getattr(base, name) and declared != actual:
            raise ConfigError(f"model.{name} = {declared} but the data has {actual}")
    spd = 86_400 // fs.cadence_s
    if cfg.model.slots_per_day != spd and cfg.model.slots_per_day != base.slots_per_day:
        raise ConfigError(f"model.slots_per_day = {cfg.model.slots_per_day} but cadence gives {spd}")
    return replace(cfg.model, n_turbines=fs.N, n_exo=fs.C, slots_per_day=spd)


def build_windows(cfg: RunConfig):
    """Resolved model config, normalization stats and train/val/test windows."""
    fs = load_series(cfg)
    mcfg = _model_config_for(cfg, fs)
    try:
        (train_s, val_s, test_s), stats = prepare_splits(fs, mcfg.lookback, mcfg.horizon)
    except ContractError as exc:
        raise DataError(str(exc)) from exc
    H, P, ft = mcfg.lookback, mcfg.horizon, mcfg.future_time
    windows = {
        "train": make_windows(train_s, H, P, cfg.train.train_stride, ft),
        "val": make_windows(val_s, H, P, cfg.train.val_stride, ft),
        "test": make_windows(test_s, H, P, 1, ft),
    }
    return mcfg, stats, windows


def _prepare_run_dir(cfg: RunConfig) -> Path:
    run = Path(cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run / RESOLVED_NAME)
    return run


def _write_baselines(run: Path, reports: dict) -> None:
    with open(run / "baselines.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "mae_kw", "rmse_kw", "count"])
        for rep in reports.values():
            w.writerow([rep.name, repr(rep.mae), repr(rep.rmse), rep.count])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    run = _prepare_run_dir(replace(cfg, data=replace(cfg.data, source="synthetic")))
    fs = load_series(replace(cfg, data=replace(cfg.data, source="synthetic")))
    write_csv(fs, run / "synthetic.csv")
    logger.info("wrote %d turbines x %d steps to %s", fs.N, fs.T, run / "synthetic.csv")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    run = _prepare_run_dir(cfg)
    mcfg, stats, ws = build_windows(cfg)
    model = Forecaster.create(mcfg, stats, seed=cfg.train.seed, dtype=cfg.train.dtype)
    logger.info(
        "variant %s, %d parameters, %d/%d/%d train/val/test windows",
        mcfg.variant, model.n_parameters(), len(ws["train"]), len(ws["val"]), len(ws["test"]),
    )
    _write_baselines(run, baselines(ws["test"], stats))
    result = train(model, ws["train"], ws["val"], cfg.train, run_dir=run, resume=args.resume)
    test = evaluate(model, ws["test"], cfg.train.eval_batch_size, "test")
    test.write_csv(run / "metrics_test.csv")
    test.write_horizon_csv(run / "horizon_test.csv")
    print(test.table())
    logger.info("best val MAE %.4f at epoch %d", result.best_val_mae, result.best_epoch)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    checkpoint = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint" / "best"
    if not checkpoint.is_dir():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    model, _, meta = load_model(checkpoint)
    # The checkpoint's architecture wins; the data section rebuilds the windows.
    cfg = replace(cfg, model=model.cfg)
    run = Path(cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    _, stats, ws = build_windows(cfg)
    if not np.allclose(stats.exo_mean, model.stats.exo_mean) or stats.power_mean != model.stats.power_mean:
        logger.warning("data statistics differ from those stored in the checkpoint")
    rep = evaluate(model, ws[args.split], cfg.train.eval_batch_size, args.split)
    rep.write_csv(run / f"metrics_{args.split}.csv")
    rep.write_horizon_csv(run / f"horizon_{args.split}.csv")
    print(rep.table())
    return EXIT_OK


def forecast_frame(model: Forecaster, fs: FarmSeries, stride: int = 0) -> pd.DataFrame:
    """Forecasts from lookback windows ending at the input's last row.

    With ``stride > 0`` every ``stride``-th window is forecast, counting
    back from the last one. Rows: turbine, target timestamp, horizon step, kW.
    """
    cfg = model.cfg
    H, P = cfg.lookback, cfg.horizon
    if fs.N != cfg.n_turbines or fs.C != cfg.n_exo:
        raise DataError(f"input has {fs.N} turbines x {fs.C} exogenous columns; model expects {cfg.n_turbines} x {cfg.n_exo}")
    if fs.T < H:
        raise DataError(f"input has {fs.T} steps, fewer than the lookback of {H}")
    fs = apply_zscore(fill_missing(fs), model.stats)
    ends = np.array([fs.T]) if stride <= 0 else np.arange(fs.T, H - 1, -stride)[::-1]
    step = np.timedelta64(fs.cadence_s, "s")
    starts = ends - H
    last = fs.timestamps[ends - 1]
    ahead = last[:, None] + step * np.arange(1, P + 1)  # [B, P] target times
    # Calendar rows past the input end (future_time) come from the cadence.
    calendar = [
        np.concatenate([fs.timestamps[s : s + H], a]) if cfg.future_time else fs.timestamps[s : s + H]
        for s, a in zip(starts, ahead)
    ]
    look = starts[:, None] + np.arange(H)
    batch = WindowBatch(
        X=fs.power_z[look][..., None],
        Z_s=fs.exo_z[look],
        T_idx=np.stack([temporal_indices(c, fs.cadence_s).stack() for c in calendar]),
        Y=np.zeros((len(starts), P, fs.N, 1)),
        starts=starts,
    )
    pred = model.predict(batch)[..., 0]  # [B, P, N]
    B = len(starts)
    return pd.DataFrame(
        {
            "turbine": np.tile(np.asarray(fs.turbine_ids, dtype=object), B * P),
            "timestamp": pd.to_datetime(np.repeat(ahead.reshape(-1), fs.N)),
            "horizon_step": np.tile(np.repeat(np.arange(1, P + 1), fs.N), B),
            "power_kw": pred.reshape(-1).astype(np.float64),
        }
    )


def cmd_predict(cfg: RunConfig, args) -> int:
    checkpoint = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint" / "best"
    if not checkpoint.is_dir():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    model, _, _ = load_model(checkpoint)
    src = Path(args.input)
    if not src.is_file():
        raise DataError(f"input file not found: {src}")
    fs = parse_csv(src, cfg.data.schema(), cfg.data.cadence_s)
    frame = forecast_frame(model, fs, args.stride)
    run = Path(cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    dest = run / "forecast.csv"
    frame.to_csv(dest, index=False, date_format="%Y-%m-%d %H:%M:%S", float_format="%.10g")
    logger.info("wrote %d forecast rows to %s", len(frame), dest)
    return EXIT_OK


def run_gradcheck(variant: str = "full", seed: int = 0, tol: float = 1e-3) -> nx.GradReport:
    """End-to-end finite-difference check of the toy model on real windows, float64."""
    mcfg = ModelConfig(**GRADCHECK_MODEL).with_variant(variant)
    fs = generate_synthetic(N=mcfg.n_turbines, T=2000, C=mcfg.n_exo, seed=seed)
    (train_s, _, _), stats = prepare_splits(fs, mcfg.lookback, mcfg.horizon)
    ws = make_windows(train_s, mcfg.lookback, mcfg.horizon)
    pick = np.random.default_rng(seed).choice(len(ws), size=2, replace=False)
    batch = ws.batch(np.sort(pick))
    model = Forecaster.create(mcfg, stats, seed=seed, dtype=np.float64)
    # Five-point differences keep truncation error below tolerance where
    # layer norm is sharply curved.
    return nx.grad_check(lambda: smooth_l1(model(batch), batch.Y), model.params, tol=tol, stencil=5)


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    run = Path(cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run / RESOLVED_NAME)
    variant = args.variant or cfg.model.variant
    rep = run_gradcheck(variant, cfg.train.seed)
    with open(run / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "max_rel_err", "ok"])
        for name, err, ok in rep.to_rows():
            w.writerow([name, repr(err), "yes" if ok else "no"])
    print(rep)
    if not rep.passed:
        logger.error("gradient check failed for: %s", ", ".join(rep.failures()))
        return EXIT_NUMERICAL
    logger.info("gradient check passed: %d parameters, max relative error %.2e", len(rep.errors), rep.max_error)
    return EXIT_OK


ABLATION_COLUMNS = ("variant", "epochs", "best_epoch", "val_mae_kw", "test_mae_kw", "test_rmse_kw", "parameters", "seconds")


def cmd_ablate(cfg: RunConfig, args) -> int:
    run = _prepare_run_dir(cfg)
    mcfg, stats, ws = build_windows(cfg)
    rows = []
    for variant in VARIANTS:
        t0 = time.perf_counter()
        model = Forecaster.create(mcfg.with_variant(variant), stats, seed=cfg.train.seed, dtype=cfg.train.dtype)
        result = train(model, ws["train"], ws["val"], cfg.train, run_dir=run / variant)
        test = evaluate(model, ws["test"], cfg.train.eval_batch_size, variant)
        rows.append(
            [variant, result.epochs_run, result.best_epoch, repr(result.best_val_mae),
             repr(test.mae), repr(test.rmse), model.n_parameters(), f"{time.perf_counter() - t0:.3f}"]
        )
        logger.info("%s: test MAE %.3f RMSE %.3f", variant, test.mae, test.rmse)
    with open(run / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        w.writerows(rows)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI file with [data] [model] [train] [output]")
    common.add_argument("--seed", type=int, help="override train.seed (data.synth_seed for synth)")
    common.add_argument("--variant", choices=VARIANTS, help="model variant")
    common.add_argument("--horizon", type=int, choices=HORIZONS, help="forecast steps")
    common.add_argument("--out", help="run directory (overrides [output] dir)")
    common.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"))

    parser = argparse.ArgumentParser(prog="dxformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a seeded synthetic farm CSV")
    p = sub.add_parser("train", parents=[common], help="train, checkpoint and evaluate on test")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint/last")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", help="checkpoint directory (default <out>/checkpoint/best)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p = sub.add_parser("predict", parents=[common], help="forecast from a CSV of recent observations")
    p.add_argument("--checkpoint", help="checkpoint directory (default <out>/checkpoint/best)")
    p.add_argument("--input", required=True, help="CSV in the [data] schema")
    p.add_argument("--stride", type=int, default=0, help="forecast every STRIDE-th window (0: last window only)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the toy model")
    sub.add_parser("ablate", parents=[common], help="train every variant with one seed; write ablation.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, ShapeError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalFailure as exc:
        logger.error("numerical failure: %s %s", exc, exc.detail)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
