"""Acceptance suite: one test per release criterion, one PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed even under output capture. The learning run dominates the runtime
(about five minutes on one core).
"""

import configparser
import csv
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dxformer import cli
from dxformer import numerics as nx
from dxformer.data import (
    FarmSeries,
    apply_zscore,
    fill_missing,
    fit_zscore,
    generate_synthetic,
    make_windows,
    prepare_splits,
    split_7_2_1,
)
from dxformer.errors import ContractError, DataError
from dxformer.model import VARIANTS, Forecaster, ModelConfig, ShapeLedger, dex_var_emb, en_var_emb, sex_var_emb
from dxformer.training import overfit, smooth_l1

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.ini"


@pytest.fixture
def report(capsys):
    def emit(criterion: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        assert ok, f"{criterion}: {detail}"

    return emit


@pytest.fixture(scope="module")
def default_farm():
    fs = generate_synthetic(seed=0)
    splits, stats = prepare_splits(fs, 36, 12)
    return splits, stats


def derived_ini(tmp_path, **overrides) -> Path:
    """Copy of desk.ini with ``section.key`` overrides, written under tmp_path."""
    p = configparser.ConfigParser(interpolation=None)
    p.read(DESK)
    for dotted, value in overrides.items():
        section, key = dotted.split("__")
        if value is None:
            p.remove_option(section, key)
        else:
            p[section][key] = str(value)
    out = tmp_path / "acceptance.ini"
    with open(out, "w") as fh:
        p.write(fh)
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _op_cases():
    rng = np.random.default_rng(0)

    def leaf(*shape):
        return nx.Value(rng.normal(size=shape), requires_grad=True)

    x, y, w = leaf(3, 4), leaf(3, 4), leaf(4, 5)
    gamma, beta, table = leaf(4), leaf(4), leaf(6, 3)
    shifted = nx.Value(rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))), requires_grad=True)
    bias = leaf(5)
    return {
        "add": ({"x": x, "y": y}, lambda: nx.add(x, y)),
        "mul": ({"x": x, "y": y}, lambda: nx.mul(x, y)),
        "matmul": ({"x": x, "w": w}, lambda: nx.matmul(x, w)),
        "linear": ({"x": x, "w": w, "b": bias}, lambda: nx.linear(x, w, bias)),
        "relu": ({"x": shifted}, lambda: nx.relu(shifted)),
        "gelu": ({"x": x}, lambda: nx.gelu(x)),
        "softmax": ({"x": x}, lambda: nx.softmax_lastdim(x)),
        "layer_norm": ({"x": x, "gamma": gamma, "beta": beta}, lambda: nx.layer_norm(x, gamma, beta)),
        "transpose": ({"x": x}, lambda: nx.transpose(x, 0, 1)),
        "reshape": ({"x": x}, lambda: nx.reshape(x, (2, 6))),
        "concat": ({"x": x, "y": y}, lambda: nx.concat([x, y], axis=0)),
        "slice": ({"x": x}, lambda: nx.slice_(x, (slice(1, 3), slice(None)))),
        "broadcast": ({"b": gamma}, lambda: nx.broadcast_to(gamma, (3, 4))),
        "sum": ({"x": x}, lambda: nx.reduce_sum(x, axis=1, keepdims=True)),
        "mean": ({"x": x}, lambda: nx.reduce_mean(x, axis=0)),
        "embedding": ({"table": table}, lambda: nx.embedding(table, np.array([[0, 5], [2, 2]]))),
    }


def test_gradient_suite(report):
    t0 = time.perf_counter()
    op_errors = {}
    for name, (params, build) in _op_cases().items():
        readout = np.random.default_rng(len(name)).normal(size=build().shape)
        rep = nx.grad_check(lambda: nx.reduce_sum(nx.mul(build(), readout)), params, tol=1e-4)
        op_errors[name] = (rep.max_error, rep.passed)
    worst_op = max(e for e, _ in op_errors.values())
    ops_ok = all(ok for _, ok in op_errors.values())

    e2e = cli.run_gradcheck("full", seed=0, tol=1e-3)
    seconds = time.perf_counter() - t0
    ok = ops_ok and e2e.passed and seconds < 120
    report(
        "gradient suite",
        ok,
        f"{len(op_errors)} ops max rel err {worst_op:.2e} (tol 1e-4); end-to-end toy {len(e2e.errors)} parameters "
        f"max rel err {e2e.max_error:.2e} (tol 1e-3); {seconds:.1f}s (limit 120s)",
    )


# ---------------------------------------------------------------------------
# structure probes
# ---------------------------------------------------------------------------


def test_shape_ledger_all_variants(report, default_farm):
    (train_s, _, _), stats = default_farm
    batch = make_windows(train_s, 36, 12).batch([0, 777])
    failures, sites = {}, 0
    for variant in VARIANTS:
        cfg = ModelConfig().with_variant(variant)
        model = Forecaster.create(cfg, stats, seed=0)
        ledger = ShapeLedger(strict=False)
        out = model(batch, ledger=ledger)
        ledger.check("output", out, (2, 12, 8, 1))
        failures[variant] = list(ledger.failures)
        sites += len(ledger.entries)
    bad = {k: v for k, v in failures.items() if v}
    report("shape ledger", not bad, f"{sites} shape assertions over {len(VARIANTS)} configurations, failures: {bad or 'none'}")


def test_equivariance_and_independence(report, default_farm):
    (train_s, _, _), stats = default_farm
    cfg = ModelConfig()
    model = Forecaster.create(cfg, stats, seed=0)
    batch = make_windows(train_s, 36, 12).batch([5, 1234])
    perm = np.random.default_rng(0).permutation(cfg.n_turbines)
    permuted = replace(batch, X=batch.X[:, :, perm], Z_s=batch.Z_s[:, :, perm], Y=batch.Y[:, :, perm])
    equiv = float(np.abs(model.predict(permuted) - model.predict(batch)[:, :, perm]).max())

    p = model.params
    # Endogenous tokens: moving turbine 3's series changes only turbine 3.
    X2 = batch.X.copy()
    X2[:, :, 3] += 1.0
    a, b = en_var_emb(p, cfg, nx.const(batch.X)).data, en_var_emb(p, cfg, nx.const(X2)).data
    endo_ok = np.array_equal(np.delete(a, 3, axis=1), np.delete(b, 3, axis=1)) and not np.array_equal(a[:, 3], b[:, 3])
    # Static exogenous tokens: moving channel 1 changes only channel 1's token.
    Z2 = batch.Z_s.copy()
    Z2[..., 1] += 1.0
    a, b = sex_var_emb(p, cfg, nx.const(batch.Z_s)).data, sex_var_emb(p, cfg, nx.const(Z2)).data
    static_ok = np.array_equal(a[:, :, 0], b[:, :, 0]) and not np.array_equal(a[:, :, 1], b[:, :, 1])
    # Dynamic exogenous tokens: one calendar channel perturbed, the rest untouched.
    Zd = np.random.default_rng(1).normal(size=(2, cfg.dyn_len, cfg.n_turbines, cfg.dyn_channels))
    Zd2 = Zd.copy()
    Zd2[..., 7] += 1.0
    a, b = dex_var_emb(p, cfg, nx.const(Zd)).data, dex_var_emb(p, cfg, nx.const(Zd2)).data
    dyn_ok = np.array_equal(np.delete(a, 7, axis=2), np.delete(b, 7, axis=2)) and not np.array_equal(a[:, :, 7], b[:, :, 7])

    no_edv = Forecaster.create(cfg.with_variant("no_edv"), stats, seed=0)
    other = replace(batch, T_idx=np.roll(batch.T_idx, 17, axis=1) % np.array([144, 12, 366]))
    invariant = np.array_equal(no_edv.predict(batch), no_edv.predict(other))
    used = not np.array_equal(model.predict(batch), model.predict(other))

    ok = equiv <= 1e-5 and endo_ok and static_ok and dyn_ok and invariant and used
    report(
        "equivariance/independence",
        ok,
        f"permutation discrepancy {equiv:.2e} kW (limit 1e-5); channel independence endogenous={endo_ok} "
        f"static={static_ok} dynamic={dyn_ok}; no_edv timestamp-invariant={invariant} (full model sensitive={used})",
    )


# ---------------------------------------------------------------------------
# learning
# ---------------------------------------------------------------------------


def test_learning_criterion(report, tmp_path):
    cfg = cli.load_config(DESK)
    assert cfg.train.batch_size == 32 and cfg.train.max_epochs <= 50 and cfg.train.seed == 0
    assert (cfg.data.synth_turbines, cfg.data.synth_steps, cfg.data.synth_seed) == (8, 20000, 0)
    assert cfg.model.horizon == 12 and cfg.model.variant == "full"
    run = tmp_path / "desk"
    t0 = time.perf_counter()
    rc = cli.main(["train", "--config", str(DESK), "--out", str(run), "--log-level", "WARNING"])
    seconds = time.perf_counter() - t0
    assert rc == 0
    model_mae = float(read_csv(run / "metrics_test.csv")[0]["mae_kw"])
    persistence = {r["name"]: float(r["mae_kw"]) for r in read_csv(run / "baselines.csv")}["persistence"]
    gain = 1.0 - model_mae / persistence
    epochs = len(read_csv(run / "train_log.csv"))
    ok = gain >= 0.20 and seconds <= 600 and epochs <= 50
    report(
        "learning criterion",
        ok,
        f"test MAE {model_mae:.2f} kW vs persistence {persistence:.2f} kW: {100 * gain:.1f}% lower (need >= 20%); "
        f"{epochs} epochs, {seconds:.0f}s (limit 600s)",
    )


def test_ablation_smoke(report, tmp_path):
    ini = derived_ini(tmp_path, train__max_epochs=2, train__max_seconds=None)
    run = tmp_path / "ablate"
    rc = cli.main(["ablate", "--config", str(ini), "--out", str(run), "--log-level", "WARNING"])
    rows = read_csv(run / "ablation.csv") if rc == 0 else []
    finite = all(
        math.isfinite(float(r[k])) for r in rows for k in ("val_mae_kw", "test_mae_kw", "test_rmse_kw")
    )
    logs_finite = all(
        all(math.isfinite(float(v)) for row in read_csv(run / variant / "train_log.csv") for v in row.values())
        for variant in VARIANTS
    ) if rc == 0 else False
    shape_ok = [r["variant"] for r in rows] == list(VARIANTS) and all(int(r["epochs"]) == 2 for r in rows)
    header_ok = bool(rows) and list(rows[0]) == list(cli.ABLATION_COLUMNS)
    ok = rc == 0 and finite and logs_finite and shape_ok and header_ok
    report(
        "ablation smoke matrix",
        ok,
        f"exit {rc}; {len(rows)} rows x 2 epochs; all metrics and log values finite={finite and logs_finite}; "
        f"header={header_ok}",
    )


def test_tiny_overfit(report, default_farm):
    (train_s, _, _), stats = default_farm
    batch = make_windows(train_s, 36, 12, stride=500).batch(np.arange(8))
    cfg = replace(cli.load_config(DESK).model, dropout=0.0)
    model = Forecaster.create(cfg, stats, seed=0, dtype=np.float32)
    losses = overfit(model, batch, steps=500)
    final = smooth_l1(model(batch), batch.Y).item()
    ratio = final / losses[0]
    report(
        "tiny-overfit",
        ratio < 0.01,
        f"500 steps on 8 windows: loss {losses[0]:.2f} -> {final:.3f} ({100 * ratio:.2f}% of initial, need < 1%)",
    )


def test_determinism(report, tmp_path):
    ini = derived_ini(
        tmp_path,
        train__precision="float64",
        train__max_epochs=2,
        train__train_stride=16,
        train__val_stride=8,
        train__max_seconds=None,
        model__d_model=16,
        model__n_layers=1,
    )
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(ini), "--out", str(tmp_path / name), "--log-level", "WARNING"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    ck_files = [f"checkpoint/{k}/{f}" for k in ("best", "last") for f in ("manifest.txt", "payload.bin", "meta.json")]
    metric_files = ["metrics_test.csv", "horizon_test.csv", "baselines.csv"]
    diff = [f for f in ck_files + metric_files if (a / f).read_bytes() != (b / f).read_bytes()]
    log_a = [{k: v for k, v in r.items() if k != "seconds"} for r in read_csv(a / "train_log.csv")]
    log_b = [{k: v for k, v in r.items() if k != "seconds"} for r in read_csv(b / "train_log.csv")]
    ok = not diff and log_a == log_b
    report(
        "determinism",
        ok,
        f"{len(ck_files)} checkpoint files and {len(metric_files)} metric CSVs compared byte-for-byte; "
        f"differences: {diff or 'none'}; training logs (excluding wall time) equal={log_a == log_b}",
    )


# ---------------------------------------------------------------------------
# pipeline hand examples
# ---------------------------------------------------------------------------


def _series(power, exo=None):
    power = np.asarray(power, dtype=float)
    power = power[:, None] if power.ndim == 1 else power
    T, N = power.shape
    exo = np.zeros((T, N, 1)) + np.arange(T)[:, None, None] if exo is None else np.asarray(exo, dtype=float)
    stamps = (np.datetime64("2021-01-01", "s") + np.arange(T) * np.timedelta64(600, "s")).astype("datetime64[s]")
    mask = np.concatenate([np.isnan(power)[:, :, None], np.isnan(exo)], axis=2)
    return FarmSeries([f"t{i}" for i in range(N)], stamps, power, exo, ("x",), mask)


def test_pipeline_hand_examples(report):
    nan = np.nan
    checks = {}
    checks["fill [1,-,-,4] -> [1,1,1,4]"] = fill_missing(_series([1, nan, nan, 4])).power[:, 0].tolist() == [1, 1, 1, 4]
    checks["fill [-,-,3] -> [3,3,3]"] = fill_missing(_series([nan, nan, 3])).power[:, 0].tolist() == [3, 3, 3]
    checks["fill [-,2,-] -> [2,2,2]"] = fill_missing(_series([nan, 2, nan])).power[:, 0].tolist() == [2, 2, 2]

    tr, va, te = split_7_2_1(_series(np.arange(100.0)), 1, 1)
    checks["split T=100 -> 70/20/10"] = (tr.T, va.T, te.T) == (70, 20, 10)
    try:
        split_7_2_1(_series(np.arange(10.0)), 36, 12)
        checks["split T=10 H=36 -> error"] = False
    except (DataError, ContractError):
        checks["split T=10 H=36 -> error"] = True

    col = _series([2.0, 4.0], exo=np.array([[[5.0]], [[5.0]]]))
    stats = fit_zscore(col)
    z = apply_zscore(col, stats)
    checks["zscore [2,4] -> [-1,1]"] = (stats.power_mean, stats.power_std) == (3.0, 1.0) and z.power_z[:, 0].tolist() == [-1.0, 1.0]
    checks["zscore constant [5,5] -> [0,0] flagged"] = z.exo_z[:, 0, 0].tolist() == [0.0, 0.0] and stats.flagged == ("x",)

    def n_windows(T):
        s = _series(np.arange(float(T)))
        return len(make_windows(apply_zscore(s, fit_zscore(s)), 36, 12))

    checks["windows T=100 H=36 P=12 -> 53"] = n_windows(100) == 53
    checks["windows T=48 H=36 P=12 -> 1"] = n_windows(48) == 1
    failed = [k for k, v in checks.items() if not v]
    report("pipeline unit suite", not failed, f"{len(checks) - len(failed)}/{len(checks)} hand examples exact; failed: {failed or 'none'}")
