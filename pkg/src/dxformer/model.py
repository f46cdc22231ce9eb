"""Dual-stream transformer forecaster over endogenous power and two kinds of exogenous input.

Every turbine's power series becomes one token, every static covariate
(wind speed, temperature, ...) one token per turbine, and every channel of
the learnable calendar embedding one more. An exogenous block attends over
covariate tokens and then across turbines; an endogenous block attends
across turbines and then fuses that turbine's exogenous tokens through a
residual MLP. A small MLP head reads the endogenous token.

Tensors carry a leading batch axis: ``[B, N, tokens, D]`` inside the blocks.
Parameters live in a flat ``dict[str, Value]``; the functions here are pure
given that dict.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import numerics as nx
from .data import NormStats, WindowBatch
from .errors import ConfigError, NumericalFailure, ShapeError
from .numerics import Value

VARIANTS = ("full", "rep_by_attn", "no_dev", "no_edv", "no_esc", "no_esvc", "no_evc")
_FLAGS = VARIANTS[1:]

ModelParams = dict  # name -> Value


@dataclass(frozen=True)
class ModelConfig:
    n_turbines: int = 8
    n_exo: int = 2
    time_emb_dim: int = 16
    d_model: int = 64
    n_layers: int = 3
    lookback: int = 36
    horizon: int = 12
    n_heads: int = 4
    ffn_mult: int = 4
    activation: str = "relu"
    slots_per_day: int = 144
    future_time: bool = False
    dropout: float = 0.0
    ln_eps: float = 1e-5
    rep_by_attn: bool = False
    no_dev: bool = False
    no_edv: bool = False
    no_esc: bool = False
    no_esvc: bool = False
    no_evc: bool = False

    def __post_init__(self):
        for name in ("n_turbines", "n_exo", "time_emb_dim", "d_model", "n_layers", "lookback", "horizon", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"activation must be relu or gelu, got {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        active = [f for f in _FLAGS if getattr(self, f)]
        if len(active) > 1:
            raise ConfigError(f"at most one ablation flag may be set, got {active}")
        if self.no_dev and self.dyn_len != self.lookback:
            raise ConfigError("no_dev shares one embedding for both exogenous kinds; needs future_time off")

    @property
    def dyn_channels(self) -> int:
        """Width of the concatenated calendar features (three tables)."""
        return 3 * self.time_emb_dim

    @property
    def dyn_len(self) -> int:
        return self.lookback + (self.horizon if self.future_time else 0)

    @property
    def n_ex_tokens(self) -> int:
        return self.n_exo + (0 if self.no_edv else self.dyn_channels)

    @property
    def variant(self) -> str:
        for f in _FLAGS:
            if getattr(self, f):
                return f
        return "full"

    def with_variant(self, name: str) -> "ModelConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
        flags = {f: f == name for f in _FLAGS}
        return replace(self, **flags)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class _Init:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params: ModelParams = {}

    def _add(self, name, arr):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        self.params[name] = Value(np.ascontiguousarray(arr, dtype=self.dtype), requires_grad=True, name=name)

    def affine(self, name, d_in, d_out):
        bound = 1.0 / math.sqrt(d_in)
        self._add(f"{name}.w", self.rng.uniform(-bound, bound, size=(d_in, d_out)))
        self._add(f"{name}.b", np.zeros(d_out))

    def norm(self, name, d):
        self._add(f"{name}.gamma", np.ones(d))
        self._add(f"{name}.beta", np.zeros(d))

    def table(self, name, rows, width):
        self._add(name, self.rng.normal(0.0, 0.02, size=(rows, width)))

    def residual_mlp(self, name, d_in, d_out):
        self.affine(f"{name}.fc1", d_in, d_out)
        self.affine(f"{name}.fc2", d_out, d_out)
        if d_in != d_out:
            self.affine(f"{name}.proj", d_in, d_out)

    def attention(self, name, d):
        for part in ("q", "k", "v", "o"):
            self.affine(f"{name}.{part}", d, d)

    def ffn(self, name, d, mult):
        self.affine(f"{name}.fc1", d, mult * d)
        self.affine(f"{name}.fc2", mult * d, d)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Seeded initialization: uniform(+-1/sqrt(fan_in)) weights, zero biases,
    normal(0, 0.02) calendar tables, unit layer-norm gains."""
    D = cfg.d_model
    init = _Init(seed, dtype)
    init.residual_mlp("emb.en", cfg.lookback, D)
    init.residual_mlp("emb.sex", cfg.lookback, D)
    if not cfg.no_edv:
        if not cfg.no_dev:
            init.residual_mlp("emb.dex", cfg.dyn_len, D)
        init.table("time.diurnal", cfg.slots_per_day, cfg.time_emb_dim)
        init.table("time.monthly", 12, cfg.time_emb_dim)
        init.table("time.yearly", 366, cfg.time_emb_dim)
    fused_width = (1 + cfg.n_ex_tokens) * D
    for layer in range(cfg.n_layers):
        ex = f"layers.{layer}.ex"
        if not (cfg.no_evc or cfg.no_esvc):
            init.attention(f"{ex}.var_attn", D)
            init.norm(f"{ex}.var_ln", D)
        if not (cfg.no_esc or cfg.no_esvc):
            init.attention(f"{ex}.sp_attn", D)
            init.norm(f"{ex}.sp_ln", D)
        init.ffn(f"{ex}.ffn", D, cfg.ffn_mult)
        init.norm(f"{ex}.ffn_ln", D)

        en = f"layers.{layer}.en"
        init.attention(f"{en}.sp_attn", D)
        init.norm(f"{en}.sp_ln", D)
        if cfg.rep_by_attn:
            init.attention(f"{en}.cross_attn", D)
            init.norm(f"{en}.cross_ln", D)
        else:
            init.residual_mlp(f"{en}.fuse", fused_width, D)
        init.ffn(f"{en}.ffn", D, cfg.ffn_mult)
        init.norm(f"{en}.ffn_ln", D)
    init.affine("head.fc1", D, D)
    init.affine("head.fc2", D, cfg.horizon)
    return init.params


# ---------------------------------------------------------------------------
# shape ledger
# ---------------------------------------------------------------------------


class ShapeLedger:
    """Records and asserts intermediate shapes during a debug forward pass."""

    def __init__(self, strict: bool = True):
        self.strict = strict
        self.entries: list[tuple[str, tuple, tuple]] = []
        self.failures: list[str] = []

    def check(self, site: str, value: Value, expected) -> Value:
        expected = tuple(expected)
        self.entries.append((site, value.shape, expected))
        if value.shape != expected:
            msg = f"{site}: got {value.shape}, expected {expected}"
            self.failures.append(msg)
            if self.strict:
                raise ShapeError(msg)
        return value


def _ck(ledger, site, value, expected):
    return value if ledger is None else ledger.check(site, value, expected)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _lin(p: ModelParams, name: str, x: Value) -> Value:
    return nx.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def residual_mlp(p: ModelParams, name: str, x: Value, act: str = "relu") -> Value:
    """Two affine layers with an activation between, plus a skip path that is
    the identity when widths agree and an affine projection otherwise."""
    h = _lin(p, f"{name}.fc2", nx.activation(_lin(p, f"{name}.fc1", x), act))
    skip = _lin(p, f"{name}.proj", x) if f"{name}.proj.w" in p else x
    return nx.add(h, skip)


def feed_forward(p: ModelParams, name: str, x: Value, act: str = "relu") -> Value:
    return _lin(p, f"{name}.fc2", nx.activation(_lin(p, f"{name}.fc1", x), act))


def attention(p: ModelParams, name: str, query: Value, memory: Value, n_heads: int) -> Value:
    """Multi-head scaled dot-product attention on ``[S, tokens, D]`` inputs."""
    S, Tq, D = query.shape
    Tk = memory.shape[1]
    dh = D // n_heads

    def heads(x, T):
        return nx.transpose(nx.reshape(x, (S, T, n_heads, dh)), 1, 2)

    q = heads(_lin(p, f"{name}.q", query), Tq)
    k = heads(_lin(p, f"{name}.k", memory), Tk)
    v = heads(_lin(p, f"{name}.v", memory), Tk)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, 2, 3)), 1.0 / math.sqrt(dh))
    ctx = nx.matmul(nx.softmax_lastdim(scores), v)
    ctx = nx.reshape(nx.transpose(ctx, 1, 2), (S, Tq, D))
    return _lin(p, f"{name}.o", ctx)


def _self_attention_4d(p, name, x, n_heads):
    """Self-attention along axis 2 of ``[A, B, T, D]``, independently per (A, B)."""
    A, B, T, D = x.shape
    flat = nx.reshape(x, (A * B, T, D))
    return nx.reshape(attention(p, name, flat, flat, n_heads), (A, B, T, D))


def _post_norm(p, name, x, sub, cfg, rng):
    return nx.layer_norm(nx.add(x, nx.dropout(sub, cfg.dropout, rng)), p[f"{name}.gamma"], p[f"{name}.beta"], cfg.ln_eps)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def _series_tokens(x: Value) -> Value:
    """``[B, time, N, K]`` -> ``[B, N, K, time]``: each channel's series on the last axis."""
    return nx.transpose(nx.transpose(x, 1, 2), 2, 3)


def en_var_emb(p: ModelParams, cfg: ModelConfig, X: Value) -> Value:
    """Per-turbine power series ``[B, H, N, 1]`` to one token each, ``[B, N, 1, D]``."""
    if X.ndim != 4 or X.shape[1] != cfg.lookback or X.shape[3] != 1:
        raise ShapeError(f"endogenous input {X.shape} does not match [B, {cfg.lookback}, N, 1]")
    return residual_mlp(p, "emb.en", _series_tokens(X), cfg.activation)


def sex_var_emb(p: ModelParams, cfg: ModelConfig, Z_s: Value) -> Value:
    if Z_s.ndim != 4 or Z_s.shape[1] != cfg.lookback:
        raise ShapeError(f"static exogenous input {Z_s.shape} does not match [B, {cfg.lookback}, N, C]")
    if Z_s.shape[3] != cfg.n_exo:
        raise ShapeError(f"static exogenous input has {Z_s.shape[3]} columns, model expects {cfg.n_exo}")
    return residual_mlp(p, "emb.sex", _series_tokens(Z_s), cfg.activation)


def build_dynamic_features(p: ModelParams, cfg: ModelConfig, T_idx: np.ndarray, n_turbines: int) -> Value:
    """Look up the diurnal, monthly and yearly tables and concatenate them.

    ``T_idx`` is ``[B, H', 3]`` (slot, month, day of year). The result is
    broadcast over turbines: ``[B, H', N, 3 * time_emb_dim]``.
    """
    T_idx = np.asarray(T_idx)
    if T_idx.ndim != 3 or T_idx.shape[1:] != (cfg.dyn_len, 3):
        raise ShapeError(f"temporal index {T_idx.shape} does not match [B, {cfg.dyn_len}, 3]")
    parts = [
        nx.embedding(p["time.diurnal"], T_idx[..., 0]),
        nx.embedding(p["time.monthly"], T_idx[..., 1]),
        nx.embedding(p["time.yearly"], T_idx[..., 2]),
    ]
    feats = nx.concat(parts, axis=-1)
    B, Hd, Cd = feats.shape
    return nx.broadcast_to(nx.reshape(feats, (B, Hd, 1, Cd)), (B, Hd, n_turbines, Cd))


def dex_var_emb(p: ModelParams, cfg: ModelConfig, Z_d: Value) -> Value:
    if Z_d.shape[1] != cfg.dyn_len:
        raise ShapeError(f"dynamic exogenous length {Z_d.shape[1]} != {cfg.dyn_len}")
    # Under no_dev both exogenous kinds go through the static embedding.
    name = "emb.sex" if cfg.no_dev else "emb.dex"
    return residual_mlp(p, name, _series_tokens(Z_d), cfg.activation)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def ext_block_forward(
    p: ModelParams,
    cfg: ModelConfig,
    h_ex: Value,
    layer: int,
    ledger: ShapeLedger | None = None,
    rng: np.random.Generator | None = None,
) -> Value:
    """Exogenous block: attention over covariate tokens, then across turbines, then FFN.

    Each sublayer is post-norm, ``LN(x + sublayer(x))``.
    """
    B, N, Tx, D = h_ex.shape
    if Tx != cfg.n_ex_tokens or D != cfg.d_model:
        raise ShapeError(f"exogenous state {h_ex.shape} does not match [B, N, {cfg.n_ex_tokens}, {cfg.d_model}]")
    pre = f"layers.{layer}.ex"
    site = f"layer{layer}.ex"
    h = h_ex
    if not (cfg.no_evc or cfg.no_esvc):
        h = _post_norm(p, f"{pre}.var_ln", h, _self_attention_4d(p, f"{pre}.var_attn", h, cfg.n_heads), cfg, rng)
    _ck(ledger, f"{site}.variable", h, (B, N, Tx, D))
    if not (cfg.no_esc or cfg.no_esvc):
        t = nx.transpose(h, 1, 2)
        _ck(ledger, f"{site}.spatial_in", t, (B, Tx, N, D))
        t = _post_norm(p, f"{pre}.sp_ln", t, _self_attention_4d(p, f"{pre}.sp_attn", t, cfg.n_heads), cfg, rng)
        _ck(ledger, f"{site}.spatial", t, (B, Tx, N, D))
        h = nx.transpose(t, 1, 2)
    ff = nx.dropout(feed_forward(p, f"{pre}.ffn", h, cfg.activation), cfg.dropout, rng)
    h = nx.layer_norm(nx.add(h, ff), p[f"{pre}.ffn_ln.gamma"], p[f"{pre}.ffn_ln.beta"], cfg.ln_eps)
    return _ck(ledger, f"{site}.out", h, (B, N, Tx, D))


def ent_block_forward(
    p: ModelParams,
    cfg: ModelConfig,
    h_en: Value,
    h_ex: Value,
    layer: int,
    ledger: ShapeLedger | None = None,
    rng: np.random.Generator | None = None,
    spatial: bool = True,
) -> Value:
    """Endogenous block: attention across turbines, per-turbine fusion with the
    exogenous tokens, then FFN.

    Fusion flattens the turbine's endogenous token and all of its exogenous
    tokens into one vector and maps it back to ``d_model`` with a residual
    MLP; under ``rep_by_attn`` it is cross-attention instead. ``spatial=False``
    skips the turbine attention (test harness only).
    """
    B, N, one, D = h_en.shape
    if one != 1 or D != cfg.d_model:
        raise ShapeError(f"endogenous state {h_en.shape} does not match [B, N, 1, {cfg.d_model}]")
    if h_ex.shape[:2] != (B, N):
        raise ShapeError(f"endogenous {h_en.shape} and exogenous {h_ex.shape} disagree on batch/turbines")
    Tx = h_ex.shape[2]
    pre = f"layers.{layer}.en"
    site = f"layer{layer}.en"

    h = h_en
    if spatial:
        t = nx.transpose(h_en, 1, 2)
        _ck(ledger, f"{site}.spatial_in", t, (B, 1, N, D))
        t = _post_norm(p, f"{pre}.sp_ln", t, _self_attention_4d(p, f"{pre}.sp_attn", t, cfg.n_heads), cfg, rng)
        _ck(ledger, f"{site}.spatial", t, (B, 1, N, D))
        h = nx.transpose(t, 1, 2)

    if cfg.rep_by_attn:
        q = nx.reshape(h, (B * N, 1, D))
        mem = nx.reshape(h_ex, (B * N, Tx, D))
        cross = nx.reshape(attention(p, f"{pre}.cross_attn", q, mem, cfg.n_heads), (B, N, 1, D))
        h = _post_norm(p, f"{pre}.cross_ln", h, cross, cfg, rng)
    else:
        fused_in = nx.concat([nx.reshape(h, (B, N, D)), nx.reshape(h_ex, (B, N, Tx * D))], axis=-1)
        _ck(ledger, f"{site}.fusion_in", fused_in, (B, N, (1 + cfg.n_ex_tokens) * D))
        h = nx.reshape(residual_mlp(p, f"{pre}.fuse", fused_in, cfg.activation), (B, N, 1, D))
    _ck(ledger, f"{site}.fusion", h, (B, N, 1, D))

    ff = nx.dropout(feed_forward(p, f"{pre}.ffn", h, cfg.activation), cfg.dropout, rng)
    h = nx.layer_norm(nx.add(h, ff), p[f"{pre}.ffn_ln.gamma"], p[f"{pre}.ffn_ln.beta"], cfg.ln_eps)
    return _ck(ledger, f"{site}.out", h, (B, N, 1, D))


def forecast_head(p: ModelParams, cfg: ModelConfig, h_en: Value) -> Value:
    """``[B, N, 1, D]`` -> ``[B, P, N, 1]`` in normalized units."""
    B, N, _, D = h_en.shape
    x = nx.reshape(h_en, (B, N, D))
    y = _lin(p, "head.fc2", nx.activation(_lin(p, "head.fc1", x), cfg.activation))
    return nx.reshape(nx.transpose(y, 1, 2), (B, cfg.horizon, N, 1))


def forward(
    batch: WindowBatch,
    p: ModelParams,
    cfg: ModelConfig,
    power_mean: float = 0.0,
    power_std: float = 1.0,
    ledger: ShapeLedger | None = None,
    rng: np.random.Generator | None = None,
) -> Value:
    """Full forecast ``[B, P, N, 1]`` in kW."""
    dtype = next(iter(p.values())).dtype
    X = nx.const(np.asarray(batch.X, dtype=dtype))
    Z_s = nx.const(np.asarray(batch.Z_s, dtype=dtype))
    B, H, N, _ = X.shape
    D = cfg.d_model
    if N != cfg.n_turbines:
        raise ShapeError(f"batch has {N} turbines, model configured for {cfg.n_turbines}")

    v_en = _ck(ledger, "emb.endogenous", en_var_emb(p, cfg, X), (B, N, 1, D))
    v_sex = _ck(ledger, "emb.static", sex_var_emb(p, cfg, Z_s), (B, N, cfg.n_exo, D))
    if cfg.no_edv:
        h_ex = v_sex
    else:
        z_d = build_dynamic_features(p, cfg, batch.T_idx, N)
        _ck(ledger, "emb.calendar", z_d, (B, cfg.dyn_len, N, cfg.dyn_channels))
        v_dex = _ck(ledger, "emb.dynamic", dex_var_emb(p, cfg, z_d), (B, N, cfg.dyn_channels, D))
        h_ex = nx.concat([v_dex, v_sex], axis=2)
    _ck(ledger, "ex.init", h_ex, (B, N, cfg.n_ex_tokens, D))

    h_en = v_en
    for layer in range(cfg.n_layers):
        h_ex = ext_block_forward(p, cfg, h_ex, layer, ledger, rng)
        h_en = ent_block_forward(p, cfg, h_en, h_ex, layer, ledger, rng)

    y = _ck(ledger, "head", forecast_head(p, cfg, h_en), (B, cfg.horizon, N, 1))
    out = nx.add(nx.scale(y, power_std), power_mean)
    if not np.all(np.isfinite(out.data)):
        raise NumericalFailure("model produced non-finite forecasts", {"stage": "forward"})
    return out


class Forecaster:
    """Config, parameters and the power statistics needed to report kW."""

    def __init__(self, cfg: ModelConfig, params: ModelParams, stats: NormStats):
        self.cfg = cfg
        self.params = params
        self.stats = stats

    @classmethod
    def create(cls, cfg: ModelConfig, stats: NormStats, seed: int = 0, dtype=np.float64) -> "Forecaster":
        return cls(cfg, init_params(cfg, seed, dtype), stats)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def __call__(self, batch: WindowBatch, ledger=None, rng=None) -> Value:
        return forward(batch, self.params, self.cfg, self.stats.power_mean, self.stats.power_std, ledger, rng)

    def predict(self, batch: WindowBatch) -> np.ndarray:
        return self(batch).data

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())
