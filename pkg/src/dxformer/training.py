"""Loss, optimizer, schedules, metrics, baselines and the train/evaluate loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NormStats, WindowSet
from .errors import ConfigError, DataError, NumericalFailure, ShapeError
from .model import Forecaster, ModelConfig
from .numerics import Value

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_mae", "val_rmse", "lr", "seconds")
SCHEDULES = ("exponential", "step", "cosine", "constant")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    Batch size, epoch budget and patience are not given by the architecture's
    authors; the defaults here are this package's own choice.
    """

    lr0: float = 5e-4
    schedule: str = "exponential"
    gamma: float = 0.95
    step_size: int = 10
    batch_size: int = 32
    eval_batch_size: int = 128
    max_epochs: int = 50
    patience: int = 8
    seed: int = 0
    precision: str = "float32"
    grad_clip: float = 0.0
    train_stride: int = 1
    val_stride: int = 1
    max_seconds: float = 0.0
    restore_best: bool = True

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"train.lr0 must be positive, got {self.lr0}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"train.schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"train.precision must be float32 or float64, got {self.precision!r}")
        for name in ("batch_size", "eval_batch_size", "max_epochs", "patience", "train_stride", "val_stride", "step_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def smooth_l1(y_hat: Value, y) -> Value:
    """Mean of ``0.5 e^2`` where ``|e| < 1`` and ``|e| - 0.5`` elsewhere."""
    y = np.asarray(y, dtype=y_hat.dtype)
    if y_hat.shape != y.shape:
        raise ShapeError(f"smooth_l1: prediction {y_hat.shape} vs target {y.shape}")
    e = y_hat.data - y
    ae = np.abs(e)
    per = np.where(ae < 1.0, 0.5 * e * e, ae - 0.5)
    n = e.size

    def backward_fn(g):
        nx._accum(y_hat, g * np.clip(e, -1.0, 1.0) / n)

    return Value(np.asarray(per.mean(dtype=np.float64), dtype=y_hat.dtype), (y_hat,), backward_fn, "smooth_l1")


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(np.asarray(p)) for k, p in params.items()},
            v={k: np.zeros_like(np.asarray(p)) for k, p in params.items()},
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place.

    All gradients are checked before anything is touched, so a non-finite
    gradient leaves the parameters and moments as they were.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient for {name}", {"parameter": name})
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * factor
    return total


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if cfg.schedule == "constant":
        return cfg.lr0
    if cfg.schedule == "exponential":
        return cfg.lr0 * cfg.gamma**epoch
    if cfg.schedule == "step":
        return cfg.lr0 * cfg.gamma ** (epoch // cfg.step_size)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * min(epoch, cfg.max_epochs) / cfg.max_epochs))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    mae: float
    rmse: float
    horizon_mae: list[float]
    horizon_rmse: list[float]
    count: int
    name: str = ""

    def table(self) -> str:
        head = f"{self.name or 'metrics'}: MAE {self.mae:.4f} kW  RMSE {self.rmse:.4f} kW  ({self.count} values)"
        rows = [f"  step {i + 1:>3}  MAE {a:10.4f}  RMSE {r:10.4f}" for i, (a, r) in enumerate(zip(self.horizon_mae, self.horizon_rmse))]
        return "\n".join([head, *rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "mae_kw", "rmse_kw", "count"])
            w.writerow([self.name, repr(self.mae), repr(self.rmse), self.count])

    def write_horizon_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon_step", "mae_kw", "rmse_kw"])
            for i, (a, r) in enumerate(zip(self.horizon_mae, self.horizon_rmse)):
                w.writerow([i + 1, repr(a), repr(r)])


class MetricAccumulator:
    """Running absolute and squared error sums per horizon step (float64)."""

    def __init__(self, horizon: int):
        self.abs = np.zeros(horizon)
        self.sq = np.zeros(horizon)
        self.n = np.zeros(horizon, dtype=np.int64)

    def update(self, pred, target) -> None:
        e = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
        if e.ndim != 4:
            raise ShapeError(f"expected [B, P, N, 1] errors, got {e.shape}")
        self.abs += np.abs(e).sum(axis=(0, 2, 3))
        self.sq += (e * e).sum(axis=(0, 2, 3))
        self.n += e.shape[0] * e.shape[2] * e.shape[3]

    def report(self, name: str = "") -> MetricReport:
        total = int(self.n.sum())
        if total == 0:
            raise DataError("cannot compute metrics over an empty dataset")
        return MetricReport(
            mae=float(self.abs.sum() / total),
            rmse=float(math.sqrt(self.sq.sum() / total)),
            horizon_mae=[float(v) for v in self.abs / self.n],
            horizon_rmse=[float(v) for v in np.sqrt(self.sq / self.n)],
            count=total,
            name=name,
        )


def evaluate(model: Forecaster, windows: WindowSet, batch_size: int = 128, name: str = "") -> MetricReport:
    if len(windows) == 0:
        raise DataError("cannot evaluate on an empty window set")
    acc = MetricAccumulator(windows.horizon)
    for _, batch in windows.iter_batches(batch_size):
        acc.update(model.predict(batch), batch.Y)
    return acc.report(name)


def baselines(windows: WindowSet, stats: NormStats, batch_size: int = 512) -> dict[str, MetricReport]:
    """Persistence (repeat last observed power) and training-mean predictors."""
    pers = MetricAccumulator(windows.horizon)
    mean = MetricAccumulator(windows.horizon)
    P = windows.horizon
    for idx, batch in windows.iter_batches(batch_size):
        last = windows.last_power(idx)  # [B, N]
        pers.update(np.repeat(last[:, None, :, None], P, axis=1), batch.Y)
        mean.update(np.full_like(batch.Y, stats.power_mean), batch.Y)
    return {"persistence": pers.report("persistence"), "train_mean": mean.report("train_mean")}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(path, model: Forecaster, adam: AdamState | None = None, train_state: dict | None = None) -> Path:
    tensors = {name: v.data for name, v in model.params.items()}
    if adam is not None:
        tensors.update({f"adam.m.{k}": a for k, a in adam.m.items()})
        tensors.update({f"adam.v.{k}": a for k, a in adam.v.items()})
    meta = {
        "model": model.cfg.to_dict(),
        "stats": model.stats.to_dict(),
        "dtype": np.dtype(model.dtype).name,
    }
    if adam is not None:
        meta["adam"] = {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
    if train_state is not None:
        meta["train_state"] = train_state
    return save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[Forecaster, AdamState | None, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model"])
    stats = NormStats.from_dict(meta["stats"])
    params = {k: Value(a, requires_grad=True, name=k) for k, a in tensors.items() if not k.startswith("adam.")}
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        adam = AdamState(
            m={k: tensors[f"adam.m.{k}"] for k in params},
            v={k: tensors[f"adam.v.{k}"] for k in params},
            step=int(a["step"]),
            beta1=a["beta1"],
            beta2=a["beta2"],
            eps=a["eps"],
        )
    return Forecaster(cfg, params, stats), adam, meta


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_val_mae: float
    best_epoch: int
    epochs_run: int
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    out_of_time: bool = False


def _write_log_row(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_COLUMNS)
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def train_step(model: Forecaster, batch, adam: AdamState, lr: float, cfg: TrainConfig, rng=None) -> float:
    """One optimizer step on one batch; returns the batch loss."""
    for v in model.params.values():
        v.zero_grad()
    loss = smooth_l1(model(batch, rng=rng), batch.Y)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalFailure("non-finite training loss", {"loss": value})
    loss.backward()
    grads = {k: v.grad for k, v in model.params.items()}
    if cfg.grad_clip > 0:
        clip_by_global_norm(grads, cfg.grad_clip)
    adam_step({k: v.data for k, v in model.params.items()}, grads, adam, lr)
    return value


def overfit(model: Forecaster, batch, steps: int = 500, lr0: float = 1e-3, gamma: float = 0.995) -> list[float]:
    """Repeatedly fit one fixed batch; returns the loss before each step.

    The learning rate decays by ``gamma`` every step so the L1-like loss can
    settle instead of oscillating around the memorized targets.
    """
    cfg = TrainConfig(lr0=lr0, gamma=gamma)
    adam = AdamState.for_params({k: v.data for k, v in model.params.items()})
    return [train_step(model, batch, adam, lr_schedule(t, cfg), cfg) for t in range(steps)]


def train(
    model: Forecaster,
    train_ws: WindowSet,
    val_ws: WindowSet,
    cfg: TrainConfig,
    run_dir=None,
    resume: bool = False,
) -> TrainResult:
    """Epoch loop with seeded shuffling, validation, best-checkpointing and early stop.

    With ``run_dir`` set, writes ``train_log.csv``, ``checkpoint/best`` and
    ``checkpoint/last`` (the latter carries optimizer state for ``resume``).
    With ``restore_best`` the model ends holding the best-validation weights.
    Shuffling for epoch ``e`` depends only on ``(seed, e)``, so a resumed run
    replays the same batches an uninterrupted one would.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "train_log.csv" if run_dir else None
    adam = AdamState.for_params({k: v.data for k, v in model.params.items()})
    start_epoch, best, best_epoch, bad = 0, math.inf, -1, 0

    if resume:
        if run_dir is None:
            raise ConfigError("resume needs a run directory")
        restored, adam_restored, meta = load_model(run_dir / "checkpoint" / "last")
        for k, v in restored.params.items():
            model.params[k].data[...] = v.data
        adam = adam_restored
        st = meta["train_state"]
        start_epoch, best, best_epoch, bad = st["next_epoch"], st["best_val_mae"], st["best_epoch"], st["bad_epochs"]
        best = math.inf if best is None else best
        if log_path and log_path.exists():
            rows = [r for r in read_log(log_path) if r["epoch"] < start_epoch]
            log_path.unlink()
            for r in rows:
                _write_log_row(log_path, r)

    result = TrainResult(best_val_mae=best, best_epoch=best_epoch, epochs_run=start_epoch)
    best_params = None
    if resume and cfg.restore_best and (run_dir / "checkpoint" / "best").exists():
        best_params = {k: v.data.copy() for k, v in load_model(run_dir / "checkpoint" / "best")[0].params.items()}
    t_start = time.perf_counter()
    n = len(train_ws)
    for epoch in range(start_epoch, cfg.max_epochs):
        t_epoch = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1]) if model.cfg.dropout > 0 else None
        total, count = 0.0, 0
        for b, (_, batch) in enumerate(train_ws.iter_batches(cfg.batch_size, order)):
            try:
                loss = train_step(model, batch, adam, lr, cfg, drop_rng)
            except NumericalFailure as exc:
                exc.detail.update(epoch=epoch, batch_index=b, window_starts=batch.starts.tolist())
                if run_dir is not None:
                    np.savez(run_dir / "nan_batch.npz", X=batch.X, Z_s=batch.Z_s, T_idx=batch.T_idx, Y=batch.Y)
                logger.error("numerical failure at epoch %d batch %d: %s", epoch, b, exc)
                raise
            total += loss * batch.size
            count += batch.size
            if cfg.max_seconds and time.perf_counter() - t_start > cfg.max_seconds:
                result.out_of_time = True
                break

        val = evaluate(model, val_ws, cfg.eval_batch_size, "val")
        row = {
            "epoch": epoch,
            "train_loss": total / max(count, 1),
            "val_mae": val.mae,
            "val_rmse": val.rmse,
            "lr": lr,
            "seconds": time.perf_counter() - t_epoch,
        }
        result.history.append(row)
        result.epochs_run = epoch + 1
        logger.info(
            "epoch %d loss %.4f val MAE %.3f RMSE %.3f lr %.2e (%.1fs)",
            epoch, row["train_loss"], val.mae, val.rmse, lr, row["seconds"],
        )
        if log_path:
            _write_log_row(log_path, row)

        if val.mae < best:
            best, best_epoch, bad = val.mae, epoch, 0
            if cfg.restore_best:
                best_params = {k: v.data.copy() for k, v in model.params.items()}
            if run_dir:
                save_model(run_dir / "checkpoint" / "best", model, train_state={"epoch": epoch, "val_mae": val.mae})
        else:
            bad += 1
        result.best_val_mae, result.best_epoch = best, best_epoch
        if run_dir:
            state = {"next_epoch": epoch + 1, "best_val_mae": best, "best_epoch": best_epoch, "bad_epochs": bad}
            save_model(run_dir / "checkpoint" / "last", model, adam, state)
        if bad >= cfg.patience:
            result.stopped_early = True
            break
        if result.out_of_time:
            break
    if cfg.restore_best and best_params is not None:
        for k, v in model.params.items():
            v.data[...] = best_params[k]
    return result
