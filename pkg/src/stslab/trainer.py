"""Online training of the attention model on fresh batches.

Every step draws a new batch (and, for the stochastic policy, a new
encoding), so the loop is a Monte-Carlo version of population gradient
descent. Everything random flows from four labelled streams, which makes a
run a pure function of its config.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import (EXACT, ONE_HOT, PAIRWISE, RADEMACHER, DEFAULT_MAX_ATTEMPTS,
                       PosEncoding, RipSampler, one_hot_pe)
from .errors import (ConfigError, DivergenceError, NotApplicableError,
                     PeSamplingFailedError)
from .model import (FixedPE, ModelParams, Nested, ResamplePerStep, _forward, batch_gradients,
                    batch_pass, cosine_diagnostics, extract_scalars, ground_truth,
                    query_encodings, s_plus_measured)
from .numerics import RngStream
from .task import Batch, TaskConfig, sample_batch

DIVERGENCE_LIMIT = 1e6
EVAL_CHUNK = 1024


# --- config ------------------------------------------------------------------

@dataclass
class PeConfig:
    kind: str = RADEMACHER
    d_e: int = 60
    delta: float = 0.1
    threshold: float | None = None
    mode: str = PAIRWISE
    max_attempts: int = DEFAULT_MAX_ATTEMPTS


@dataclass
class EstimatorConfig:
    kind: str = "surrogate"
    n_outer: int = 4
    n_inner: int = 4


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AnnealConfig:
    step: int = 50_000
    factor: float = 1.0 / 3.0


@dataclass
class InitConfig:
    kind: str = "zero"
    sigma: float | None = None   # None means 1/sqrt(d + d_e)


@dataclass
class EvalConfig:
    n_eval: int = 1024
    T2_list: list = field(default_factory=list)
    q2_list: list = field(default_factory=list)
    T_max: int = 400


@dataclass
class FcnConfig:
    widths: list = field(default_factory=lambda: [15])
    depth: int = 3
    activation: str = "relu"
    bias: bool = False
    qhot: bool = False
    steps: int = 10_000
    batch: int = 256
    eta: float = 1e-3
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("adam"))
    n_eval: int = 100_000
    n_adversarial: int = 20
    transformer_checkpoint: str | None = None


@dataclass
class TrainConfig:
    task: TaskConfig = field(default_factory=lambda: TaskConfig(50, 3, 5))
    pe: PeConfig = field(default_factory=PeConfig)
    pe_policy: str = "resample"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eta: float = 1.0
    anneal: AnnealConfig | None = None
    steps: int = 1000
    batch: int = 256
    init: InitConfig = field(default_factory=InitConfig)
    seed: int = 0
    x_query: str = "zero"
    log_every: int = 100
    eval: EvalConfig = field(default_factory=EvalConfig)
    fcn: FcnConfig | None = None
    heatmap_steps: list = field(default_factory=lambda: [0, 100, 500])

    def __post_init__(self):
        self.validate()

    def validate(self):
        T = self.task.T
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.steps < 1 or self.batch < 1 or self.log_every < 1:
            raise ConfigError("steps, batch and log_every must be >= 1")
        if self.pe.kind not in (ONE_HOT, RADEMACHER):
            raise ConfigError(f"unknown pe.kind {self.pe.kind!r}")
        if self.pe.mode not in (PAIRWISE, EXACT):
            raise ConfigError(f"unknown pe.mode {self.pe.mode!r}")
        if self.pe_policy not in ("fixed", "resample"):
            raise ConfigError(f"unknown pe_policy {self.pe_policy!r}")
        if self.pe.kind == ONE_HOT and self.pe_policy != "fixed":
            raise ConfigError("one-hot encodings are deterministic; use pe_policy 'fixed'")
        if self.pe.kind == ONE_HOT and self.pe.d_e != T:
            raise ConfigError(f"one-hot encoding needs d_e == T ({T}), got {self.pe.d_e}")
        if self.estimator.kind not in ("surrogate", "nested"):
            raise ConfigError(f"unknown estimator {self.estimator.kind!r}")
        if self.estimator.kind == "nested" and self.pe_policy != "resample":
            raise ConfigError("the nested estimator needs pe_policy 'resample'")
        if self.optimizer.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer.kind!r}")
        if self.init.kind not in ("zero", "gaussian"):
            raise ConfigError(f"unknown init {self.init.kind!r}")
        if self.x_query not in ("zero", "gaussian"):
            raise ConfigError(f"unknown x_query policy {self.x_query!r}")
        if any(T2 > self.eval.T_max for T2 in self.eval.T2_list):
            raise ConfigError("every eval.T2_list entry must be <= eval.T_max")
        if any(q2 < self.task.q for q2 in self.eval.q2_list):
            raise ConfigError("eval q2 values must be >= task.q")
        if self.eval.T2_list and self.pe.kind == ONE_HOT:
            raise ConfigError("one-hot encodings have no longer-sequence evaluation (d_e = T)")
        if self.eval.n_eval < 1:
            raise ConfigError("eval.n_eval must be >= 1")

    @property
    def ood_pairs(self) -> list:
        q2s = self.eval.q2_list or [self.task.q]
        return [(int(T2), int(q2)) for T2 in self.eval.T2_list for q2 in q2s]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        try:
            return _build(cls, raw, "")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path, overrides=()) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        for item in overrides:
            apply_override(raw, item)
        return cls.from_dict(raw)


_NESTED = {"task": TaskConfig, "pe": PeConfig, "estimator": EstimatorConfig,
           "optimizer": OptimizerConfig, "anneal": AnnealConfig, "init": InitConfig,
           "eval": EvalConfig, "fcn": FcnConfig}


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kw = {}
    for k, v in raw.items():
        sub = _NESTED.get(k)
        if sub is not None and v is not None and sub is not cls:
            kw[k] = _build(sub, v, f"{where}{k}.")
        else:
            kw[k] = v
    return cls(**kw)


def apply_override(raw: dict, item: str):
    """Apply ``a.b.c=value`` to a raw config dict; value parsed as JSON if possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, val = item.split("=", 1)
    try:
        val = json.loads(val)
    except json.JSONDecodeError:
        pass
    node = raw
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} walks into a non-object")
    node[parts[-1]] = val


# --- optimizers ----------------------------------------------------------------

def _lr(eta, anneal, t):
    if anneal is not None and t >= anneal.step:
        return eta * anneal.factor
    return eta


class Sgd:
    def __init__(self, eta: float, anneal: AnnealConfig | None = None):
        self.eta, self.anneal = eta, anneal

    def step(self, arrays, grads, t: int):
        lr = _lr(self.eta, self.anneal, t)
        for a, g in zip(arrays, grads):
            a -= lr * g


class Adam:
    def __init__(self, eta: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 anneal: AnnealConfig | None = None):
        self.eta, self.b1, self.b2, self.eps, self.anneal = eta, beta1, beta2, eps, anneal
        self.m = self.v = None
        self.k = 0

    def step(self, arrays, grads, t: int):
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.k += 1
        lr = _lr(self.eta, self.anneal, t)
        c1, c2 = 1 - self.b1 ** self.k, 1 - self.b2 ** self.k
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            a -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(opt: OptimizerConfig, eta: float, anneal: AnnealConfig | None = None):
    if opt.kind == "sgd":
        return Sgd(eta, anneal)
    return Adam(eta, opt.beta1, opt.beta2, opt.eps, anneal)


# --- setup helpers -------------------------------------------------------------

def sampler_for(cfg: TrainConfig, T: int | None = None, q: int | None = None) -> RipSampler:
    return RipSampler(cfg.pe.d_e, T or cfg.task.T, q or cfg.task.q, cfg.pe.delta,
                      cfg.pe.mode, cfg.pe.threshold, cfg.pe.max_attempts, cfg.pe.kind)


def initial_params(cfg: TrainConfig) -> ModelParams:
    d, d_e = cfg.task.d, cfg.pe.d_e
    if cfg.init.kind == "zero":
        return ModelParams.zeros(d, d_e)
    sigma = cfg.init.sigma if cfg.init.sigma is not None else 1.0 / np.sqrt(d + d_e)
    rng = RngStream(cfg.seed, "init")
    D = d + d_e
    return ModelParams(rng.normal((D, D)) * sigma, rng.normal((d, D)) * sigma)


def make_policy(cfg: TrainConfig, fixed_pe: PosEncoding | None = None):
    if cfg.pe_policy == "fixed":
        return FixedPE(fixed_pe)
    sampler = sampler_for(cfg)
    if cfg.estimator.kind == "nested":
        return Nested(sampler, cfg.estimator.n_outer, cfg.estimator.n_inner)
    return ResamplePerStep(sampler)


def fixed_encoding(cfg: TrainConfig) -> PosEncoding:
    """The run's fixed encoding: one-hot, or the first T columns of a T_max draw
    (so longer-sequence evaluation can slice further prefixes of it)."""
    if cfg.pe.kind == ONE_HOT:
        return one_hot_pe(cfg.task.T)
    T_full = max(cfg.task.T, cfg.eval.T_max if cfg.eval.T2_list else cfg.task.T)
    return sampler_for(cfg, T_full).draw(RngStream(cfg.seed, "pe"))


def _x_query(cfg: TrainConfig, rng: RngStream, n: int):
    if cfg.x_query == "zero":
        return None
    return rng.normal((n, cfg.task.d))


def draw_stack(sampler: RipSampler, rng: RngStream, n: int) -> np.ndarray:
    """n independent encodings stacked as (n, d_e, T)."""
    return np.stack([sampler.draw(rng).E for _ in range(n)])


# --- evaluation -----------------------------------------------------------------

def _losses_fresh_E(params, batch: Batch, sampler: RipSampler, rng: RngStream, xq=None):
    out = np.empty(len(batch))
    for lo in range(0, len(batch), EVAL_CHUNK):
        hi = min(lo + EVAL_CHUNK, len(batch))
        sub = Batch(batch.X[lo:hi], batch.Y[lo:hi], batch.target[lo:hi])
        E = draw_stack(sampler, rng, hi - lo)
        Ey = query_encodings(E, sub.Y, sampler.kind)
        xqs = np.zeros(sub.X.shape[:2]) if xq is None else xq[lo:hi]
        p = _forward(params, sub.X, E, Ey, xqs)
        out[lo:hi] = 0.5 * np.sum((sub.target - p.out) ** 2, axis=1)
    return out


def _fixed_losses(params, batch: Batch, pe: PosEncoding, xq=None):
    out = np.empty(len(batch))
    for lo in range(0, len(batch), EVAL_CHUNK * 8):
        hi = min(lo + EVAL_CHUNK * 8, len(batch))
        sub = Batch(batch.X[lo:hi], batch.Y[lo:hi], batch.target[lo:hi])
        p = batch_pass(params, sub, pe, None if xq is None else xq[lo:hi])
        out[lo:hi] = 0.5 * np.sum((sub.target - p.out) ** 2, axis=1)
    return out


def _mean_se(v: np.ndarray):
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def policy_losses(params: ModelParams, batch: Batch, pe_policy, rng: RngStream, xq=None):
    """Per-sample losses; stochastic policies draw a fresh encoding per sample."""
    if isinstance(pe_policy, FixedPE):
        return _fixed_losses(params, batch, pe_policy.pe, xq)
    return _losses_fresh_E(params, batch, pe_policy.sampler, rng, xq)


def estimate_loss(params: ModelParams, cfg: TrainConfig, n_eval: int, pe_policy,
                  rng: RngStream | None = None):
    """(mean, std_err) of the loss over n_eval fresh samples."""
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    rng = rng or RngStream(cfg.seed, "eval", (1,))
    batch = sample_batch(rng.child(0), cfg.task, n_eval)
    xq = _x_query(cfg, rng.child(1), n_eval)
    return _mean_se(policy_losses(params, batch, pe_policy, rng.child(2), xq))


def ood_policy(cfg: TrainConfig, pe_policy, T2: int, q2: int):
    """Policy at length T2: a prefix of the fixed encoding, or fresh length-T2 draws."""
    if isinstance(pe_policy, FixedPE):
        if pe_policy.pe.kind == ONE_HOT:
            raise NotApplicableError("one-hot encodings cannot be evaluated at another length")
        if T2 > pe_policy.pe.T:
            raise ConfigError(f"T2={T2} exceeds the {pe_policy.pe.T} sampled encoding columns")
        return FixedPE(pe_policy.pe.prefix(T2))
    return ResamplePerStep(sampler_for(cfg, T2, q2))


def eval_ood(params: ModelParams, cfg: TrainConfig, T2: int, q2: int, pe_policy,
             rng: RngStream | None = None, batch: Batch | None = None):
    """(mean, std_err) of the loss on length-T2 sequences with q2-subsets."""
    if T2 > cfg.eval.T_max:
        raise ConfigError(f"T2={T2} exceeds eval.T_max={cfg.eval.T_max}")
    rng = rng or RngStream(cfg.seed, "eval", (2, T2, q2))
    if batch is None:
        batch = sample_batch(rng.child(0), TaskConfig(T2, q2, cfg.task.d), cfg.eval.n_eval)
    xq = _x_query(cfg, rng.child(1), len(batch))
    pol = ood_policy(cfg, pe_policy, T2, q2)
    return _mean_se(policy_losses(params, batch, pol, rng.child(2), xq))


# --- trace ------------------------------------------------------------------------

BASE_COLUMNS = ("step", "loss", "inv_loss", "cos_w", "cos_v", "c_hat", "alpha_hat",
                "s_plus_hat", "offblock_ratio")


@dataclass
class TrainTrace:
    columns: tuple
    rows: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    fixed_pe: PosEncoding | None = None

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def last(self, name: str) -> float:
        return float(self.column(name)[-1])


def ood_column(T2: int, q2: int) -> str:
    return f"ood_T{T2}_q{q2}"


class _Monitor:
    """Fixed validation sets plus the per-log metric computation."""

    def __init__(self, cfg: TrainConfig, policy, ood_source=None):
        """``ood_source`` holds all T_max columns when ``policy`` is a prefix."""
        self.cfg, self.policy = cfg, policy
        ood_source = ood_source or policy
        base = RngStream(cfg.seed, "eval")
        self.val = sample_batch(base.child(0), cfg.task, cfg.eval.n_eval)
        self.val_xq = _x_query(cfg, base.child(1), cfg.eval.n_eval)
        self.ood = []
        for T2, q2 in cfg.ood_pairs:
            b = sample_batch(base.child(2, T2, q2), TaskConfig(T2, q2, cfg.task.d), cfg.eval.n_eval)
            xq = _x_query(cfg, base.child(3, T2, q2), cfg.eval.n_eval)
            self.ood.append((T2, q2, b, xq, ood_policy(cfg, ood_source, T2, q2)))
        self.gt = ground_truth(cfg.task.d, cfg.pe.d_e, cfg.pe.kind)
        self.columns = BASE_COLUMNS + tuple(ood_column(T2, q2) for T2, q2 in cfg.ood_pairs)

    def row(self, params: ModelParams, step: int) -> tuple:
        rng = RngStream(self.cfg.seed, "eval", (4, step))
        losses, S = self._val_pass(params, rng.child(0))
        loss = float(losses.mean())
        cos_w, cos_v = cosine_diagnostics(params, self.gt)
        c_hat, alpha_hat, ratio = extract_scalars(params, self.cfg.pe.kind)
        vals = [step, loss, 1.0 / max(loss, 1e-300), cos_w, cos_v, c_hat, alpha_hat,
                s_plus_measured(S, self.val.Y), ratio]
        for k, (T2, q2, b, xq, pol) in enumerate(self.ood):
            vals.append(float(policy_losses(params, b, pol, rng.child(1, k), xq).mean()))
        return tuple(vals)

    def _val_pass(self, params, rng):
        b, xq = self.val, self.val_xq
        if isinstance(self.policy, FixedPE):
            p = batch_pass(params, b, self.policy.pe, xq)
            return 0.5 * np.sum((b.target - p.out) ** 2, axis=1), p.S
        E = draw_stack(self.policy.sampler, rng, len(b))
        Ey = query_encodings(E, b.Y, self.policy.sampler.kind)
        p = _forward(params, b.X, E, Ey, np.zeros(b.X.shape[:2]) if xq is None else xq)
        return 0.5 * np.sum((b.target - p.out) ** 2, axis=1), p.S


# --- training loop ------------------------------------------------------------------

def train(cfg: TrainConfig, snapshots=(), fixed_pe: PosEncoding | None = None):
    """Run ``cfg.steps`` online updates; returns (params, trace).

    Rows are logged after 0, log_every, 2*log_every, ... updates and after
    the last one. ``snapshots`` lists update counts at which copies of the
    parameters are kept in ``trace.snapshots``.
    """
    try:
        if fixed_pe is None and cfg.pe_policy == "fixed":
            fixed_pe = fixed_encoding(cfg)
        full = make_policy(cfg, fixed_pe)
        policy = full
        if isinstance(full, FixedPE) and full.pe.T != cfg.task.T:
            policy = FixedPE(full.pe.prefix(cfg.task.T))
        monitor = _Monitor(cfg, policy, full)
    except PeSamplingFailedError as exc:
        raise PeSamplingFailedError(str(exc), trace=None) from exc

    params = initial_params(cfg)
    opt = make_optimizer(cfg.optimizer, cfg.eta, cfg.anneal)
    trace = TrainTrace(monitor.columns)
    want = set(int(s) for s in snapshots)
    data, pe_rng = RngStream(cfg.seed, "data"), RngStream(cfg.seed, "pe", (1,))

    def log(t):
        row = monitor.row(params, t)
        trace.rows.append(row)
        if not np.isfinite(row[1]) or row[1] > DIVERGENCE_LIMIT:
            raise DivergenceError(f"loss {row[1]:.3g} at step {t}", trace=trace)

    for t in range(cfg.steps + 1):
        if t in want:
            trace.snapshots[t] = params.copy()
        if t % cfg.log_every == 0 or t == cfg.steps:
            log(t)
        if t == cfg.steps:
            break
        batch = sample_batch(data.child(t), cfg.task, cfg.batch)
        xq = _x_query(cfg, data.child(t, 1), cfg.batch)
        try:
            grads, losses = batch_gradients(params, batch, policy, pe_rng.child(t), xq)
        except PeSamplingFailedError as exc:
            raise PeSamplingFailedError(str(exc), trace=trace) from exc
        step_loss = float(losses.mean())
        if not np.isfinite(step_loss) or step_loss > DIVERGENCE_LIMIT:
            raise DivergenceError(f"batch loss {step_loss:.3g} at step {t}", trace=trace)
        opt.step([params.W, params.V], [grads.dW, grads.dV], t)
    trace.fixed_pe = fixed_pe
    return params, trace


@dataclass(frozen=True)
class FreezeReport:
    fixed_loss: float
    fixed_se: float
    stochastic_loss: float
    stochastic_se: float

    @property
    def ratio(self) -> float:
        return self.fixed_loss / max(self.stochastic_loss, 1e-300)


def freeze_and_retest(params: ModelParams, cfg: TrainConfig, n_eval: int | None = None,
                      rng: RngStream | None = None) -> FreezeReport:
    """Draw one fresh encoding, fix it, and compare losses on the same samples."""
    if cfg.pe_policy != "resample":
        raise ConfigError("freeze_and_retest expects a stochastic-policy config")
    n_eval = n_eval or cfg.eval.n_eval
    rng = rng or RngStream(cfg.seed, "eval", (5,))
    pe = sampler_for(cfg).draw(rng.child(0))
    batch = sample_batch(rng.child(1), cfg.task, n_eval)
    xq = _x_query(cfg, rng.child(2), n_eval)
    fixed = _mean_se(_fixed_losses(params, batch, pe, xq))
    stoch = _mean_se(_losses_fresh_E(params, batch, sampler_for(cfg), rng.child(3), xq))
    return FreezeReport(fixed[0], fixed[1], stoch[0], stoch[1])
