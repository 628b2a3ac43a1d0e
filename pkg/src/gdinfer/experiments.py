"""Simulation driver: configuration files, presets, replications and CSV output."""

from __future__ import annotations

import dataclasses
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from . import gd, inference
from .numerics import RngStream
from .onsager import OnsagerEstimates
from .problem import (DesignSpec, InvalidConfig, LossSpec, ModelSpec, NoiseSpec, ProblemInstance,
                      ProxSpec, SignalSpec, generate_instance)
from .state_evolution import StateEvolution

# stream layout inside one replication
INSTANCE_STREAM = 0
INIT_STREAM = 10
SE_STREAM = 20


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "single_index"
    link: str = "identity"
    loss: str = "squared"
    loss_delta: float = 1.0
    prox: str = "identity"
    prox_lambda: float = 0.1
    design: str = "gaussian"
    design_df: float = 10.0
    noise: str = "gaussian"
    noise_param: float = 1.0
    signal: str = "half_normal"
    signal_param: float = 5.0
    m: int = 1200
    n: int = 1000
    eta: float = 0.3
    iterations: int = 50
    init: str = "gaussian"
    seed: int = 2024
    reps: int = 1000
    alpha: float = 0.05
    mc_samples: int = 100_000
    bias: str = "linear"  # linear | generic | one_bit_squared
    signal_strength: str = "known"  # known | estimate
    metric: str = "loss"  # loss | squared | half_squared
    oracle: bool = False
    qq_iterations: str = "last"  # "last" or comma-separated iterations
    threads: int = 1
    strict: bool = False

    # -- derived specs ---------------------------------------------------

    def specs(self):
        try:
            return dict(
                design=DesignSpec(self.design, self.m, self.n, self.design_df),
                signal=SignalSpec(self.signal, self.signal_param),
                noise=NoiseSpec(self.noise, self.noise_param),
                model=ModelSpec(self.model, self.link),
                loss=LossSpec(self.loss, self.loss_delta, self.link),
                prox=ProxSpec(self.prox, self.prox_lambda if self.prox == "l1" else 0.0),
            )
        except InvalidConfig:
            raise
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc

    def validate(self) -> "ExperimentConfig":
        self.specs()
        if self.iterations < 1:
            raise InvalidConfig("iterations must be at least 1")
        if not 0 < self.alpha < 1:
            raise InvalidConfig("alpha must lie in (0, 1)")
        if self.eta <= 0:
            raise InvalidConfig("eta must be positive")
        if self.bias not in ("linear", "generic", "one_bit_squared"):
            raise InvalidConfig(f"unknown bias mode {self.bias!r}")
        if self.signal_strength not in ("known", "estimate"):
            raise InvalidConfig("signal_strength must be 'known' or 'estimate'")
        if self.metric not in ("loss", "squared", "half_squared"):
            raise InvalidConfig(f"unknown metric {self.metric!r}")
        if self.init not in ("gaussian", "zero"):
            raise InvalidConfig(f"unknown init {self.init!r}")
        if self.threads < 1:
            raise InvalidConfig("threads must be at least 1")
        return self

    def qq_list(self) -> list[int]:
        if self.qq_iterations.strip() == "last":
            return [self.iterations]
        try:
            its = [int(x) for x in self.qq_iterations.split(",") if x.strip()]
        except ValueError as exc:
            raise InvalidConfig(f"bad qq_iterations {self.qq_iterations!r}") from exc
        if any(not 1 <= t <= self.iterations for t in its):
            raise InvalidConfig("qq_iterations outside 1..iterations")
        return its


# config keys use dots where field names use underscores
_DOTTED = {"loss_delta": "loss.delta", "prox_lambda": "prox.lambda", "design_df": "design.df",
           "noise_param": "noise.param", "signal_param": "signal.param"}
_KEY_TO_FIELD = {v: k for k, v in _DOTTED.items()}


PRESETS: dict[str, dict] = {
    "linear": dict(),
    "pseudo_huber": dict(loss="pseudo_huber", noise="student_t", noise_param=2.0),
    "sigmoid": dict(link="sigmoid", loss="single_index_squared", noise_param=0.1, eta=1.5, bias="generic"),
    "x_plus_sin": dict(link="x_plus_sin", loss="single_index_squared", noise_param=0.1, eta=0.2,
                       bias="generic"),
    "logistic": dict(model="one_bit", loss="logistic", noise="logistic", eta=0.2, bias="generic"),
    "one_bit": dict(model="one_bit", loss="squared", eta=0.2, bias="one_bit_squared",
                    signal_strength="estimate"),
    "loocv": dict(m=120, n=100, eta=0.2, noise_param=0.1, metric="half_squared", iterations=50),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig(**{**PRESETS[name], **overrides}).validate()


def _coerce(f: dataclasses.Field, raw: str):
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise InvalidConfig(f"bad value for {f.name}: {raw!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; ``preset`` seeds defaults."""
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    values: dict = {}
    base = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key == "preset":
            base = raw
            continue
        name = _KEY_TO_FIELD.get(key, key)
        if name not in by_name:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        values[name] = _coerce(by_name[name], raw)
    if base is not None:
        return preset(base, **values)
    return ExperimentConfig(**values).validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{_DOTTED.get(f.name, f.name)} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# replication building blocks


def build_instance(cfg: ExperimentConfig, rep: int = 0) -> tuple[ProblemInstance, np.ndarray]:
    root = RngStream(cfg.seed, rep)
    inst = generate_instance(eta=cfg.eta, rng=root.child(INSTANCE_STREAM), **cfg.specs())
    init = gd.initial_point(cfg.init, cfg.n, root.child(INIT_STREAM))
    return inst, init


def inference_options(cfg: ExperimentConfig, inst: ProblemInstance) -> dict:
    strength = None
    if cfg.bias in ("generic", "one_bit_squared"):
        if cfg.signal_strength == "estimate":
            strength = inference.signal_strength_onebit(inst.A, inst.Y, inst.phi)
        else:
            strength = inst.signal_strength
    return dict(alpha=cfg.alpha, bias_mode=cfg.bias, signal_strength=strength,
                metric=cfg.metric, strict=cfg.strict)


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.9g" % float(v)


# ---------------------------------------------------------------------------
# run


TRAJECTORY_HEADER = ["iter", "gen_err_hat", "sigma_db", "b_db", "ci_len", "tau_diag", "rho_diag",
                     "sigma_db_gen"]


def cmd_run(cfg: ExperimentConfig, out_dir: str = ".") -> str:
    inst, init = build_instance(cfg, 0)
    _, _, report = inference.run_with_inference(inst, cfg.iterations, init, **inference_options(cfg, inst))
    rows = [[r.t, r.gen_err, r.sigma_db, r.b_db, r.ci_len, r.tau_diag, r.rho_diag, r.sigma_db_gen]
            for r in report.records]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "trajectory.csv")
    _write_csv(path, TRAJECTORY_HEADER, rows)
    return path


# ---------------------------------------------------------------------------
# experiment (replications)


@dataclass
class RepResult:
    rep: int
    coverage: np.ndarray  # per iteration, fraction of coordinates covered
    ci_len: np.ndarray
    gen_err: np.ndarray
    sigma_db: np.ndarray
    sigma_db_gen: np.ndarray
    b_db: np.ndarray
    std_first: np.ndarray  # (mu_db_1 - b mu*_1) / sigma_db per iteration
    signal_strength: float


def replicate(cfg: ExperimentConfig, rep: int) -> RepResult:
    inst, init = build_instance(cfg, rep)
    opts = inference_options(cfg, inst)
    T = cfg.iterations
    res = RepResult(rep, *(np.full(T, np.nan) for _ in range(7)),
                    signal_strength=opts["signal_strength"] or np.nan)
    est = OnsagerEstimates(inst, T)
    inf = inference.Inferencer(inst, est, keep_vectors=False, **opts)

    def collect(traj, _inst):
        rec = inf.report.records[-1]
        i = rec.t - 1
        res.gen_err[i] = rec.gen_err
        res.sigma_db_gen[i] = rec.sigma_db_gen
        if rec.available:
            res.coverage[i] = np.mean((rec.ci_lo <= inst.mu_star) & (inst.mu_star <= rec.ci_hi))
            res.ci_len[i] = rec.ci_len
            res.sigma_db[i] = rec.sigma_db
            res.b_db[i] = rec.b_db
            if rec.sigma_db > 0:
                res.std_first[i] = (rec.mu_db[0] - rec.b_db * inst.mu_star[0]) / rec.sigma_db
        inf.report.records[-1] = dataclasses.replace(rec, ci_lo=None, ci_hi=None)

    gd.run(inst, T, init, hooks=[est, inf, collect])
    return res


def _replicate_star(args):
    return replicate(*args)


def run_replications(cfg: ExperimentConfig, reps: int | None = None, threads: int | None = None):
    """All replications, returned in replication order regardless of scheduling."""
    B = cfg.reps if reps is None else reps
    W = cfg.threads if threads is None else threads
    jobs = [(cfg, r) for r in range(B)]
    if W <= 1:
        return [replicate(c, r) for c, r in jobs]
    with ProcessPoolExecutor(max_workers=W) as pool:
        return list(pool.map(_replicate_star, jobs, chunksize=max(1, B // (4 * W))))


COVERAGE_HEADER = ["iter", "coverage", "ci_len", "gen_err_hat", "gen_err_oracle", "sigma_db", "b_db"]
QQ_HEADER = ["iter", "rep", "std_first"]


def oracle_evolution(cfg: ExperimentConfig, rep: int = 0, inst: ProblemInstance | None = None,
                     init: np.ndarray | None = None) -> StateEvolution:
    """Unadvanced state evolution seeded from replication ``rep``'s population."""
    if inst is None:
        inst, init = build_instance(cfg, rep)
    return StateEvolution.from_instance(inst, init, N=cfg.mc_samples,
                                        rng=RngStream(cfg.seed, rep).child(SE_STREAM))


def oracle_curve(cfg: ExperimentConfig, rep: int = 0) -> np.ndarray:
    """Oracle generalization error under the configured metric, from replication ``rep``'s population."""
    inst, init = build_instance(cfg, rep)
    se = oracle_evolution(cfg, rep, inst, init)
    H = inference.resolve_metric(cfg.metric, inst)
    out = np.zeros(cfg.iterations)
    for t in range(1, cfg.iterations + 1):
        se.advance()
        out[t - 1] = se.oracle_gen_error(t, H)
    return out


def cmd_experiment(cfg: ExperimentConfig, out_dir: str = ".") -> tuple[str, str]:
    if cfg.reps < 2:
        raise InvalidConfig("experiment needs reps >= 2")
    results = run_replications(cfg)
    T = cfg.iterations
    oracle = oracle_curve(cfg) if cfg.oracle else np.full(T, np.nan)
    stack = lambda name: np.array([getattr(r, name) for r in results])
    with np.errstate(invalid="ignore"):
        cov = np.nanmean(stack("coverage"), axis=0)
        ci = np.nanmean(stack("ci_len"), axis=0)
        ge = np.nanmean(stack("gen_err"), axis=0)
        sd = np.nanmean(stack("sigma_db"), axis=0)
        bd = np.nanmean(stack("b_db"), axis=0)
    rows = [[t + 1, cov[t], ci[t], ge[t], oracle[t], sd[t], bd[t]] for t in range(T)]
    os.makedirs(out_dir, exist_ok=True)
    cpath = os.path.join(out_dir, "coverage.csv")
    _write_csv(cpath, COVERAGE_HEADER, rows)
    qrows = [[t, r.rep, r.std_first[t - 1]] for t in cfg.qq_list() for r in results]
    qpath = os.path.join(out_dir, "qq.csv")
    _write_csv(qpath, QQ_HEADER, qrows)
    return cpath, qpath


# ---------------------------------------------------------------------------
# state evolution


def se_header(T: int) -> list[str]:
    return (["iter"] + [f"tau_{s}" for s in range(1, T + 1)] + [f"rho_{s}" for s in range(1, T + 1)]
            + ["delta", "sigma_z_diag", "sigma_w_diag", "b_db", "sigma_db", "gen_err"])


def cmd_se(cfg: ExperimentConfig, out_dir: str = ".") -> str:
    inst, init = build_instance(cfg, 0)
    se = oracle_evolution(cfg, 0, inst, init)
    H = inference.resolve_metric(cfg.metric, inst)
    T = cfg.iterations
    nan = float("nan")
    rows = [[0] + [0.0] * (2 * T) + [nan, se.sigma_z[0, 0], nan, nan, nan, nan]]
    for t in range(1, T + 1):
        se.advance()
        try:
            b, s = se.oracle_debias_params(t)
        except ArithmeticError:
            if cfg.strict:
                raise
            b, s = nan, nan
        tau = np.zeros(T)
        rho = np.zeros(T)
        tau[:t] = se.tau[t - 1, :t]
        rho[:t] = se.rho[t - 1, :t]
        rows.append([t, *tau, *rho, se.delta[t - 1], se.sigma_z[t, t], se.sigma_w[t - 1, t - 1],
                     b, s, se.oracle_gen_error(t, H)])
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "se.csv")
    _write_csv(path, se_header(T), rows)
    return path


# ---------------------------------------------------------------------------
# leave-one-out comparison


def timed_estimate_path(inst: ProblemInstance, T: int, init: np.ndarray, H=inference.half_squared_error):
    """GD with the Onsager estimator and the generalization-error estimate only,
    returning the per-iteration estimates and cumulative wall time."""
    est = OnsagerEstimates(inst, T)
    out = np.zeros(T)
    elapsed = np.zeros(T)
    t0 = time.perf_counter()
    traj = gd.start(inst, init)
    for t in range(T):
        gd.gd_step(traj, inst)
        est.update(traj)
        out[t] = inference.gen_error_estimate(inference.z_hat(traj, est.rho[:t + 1, :t + 1]), inst.Y, H)
        t1 = time.perf_counter()
        elapsed[t] = t1 - t0
        t0 = t1
    return out, np.cumsum(elapsed)


LOOCV_HEADER = ["iter", "gen_err_hat", "gen_err_loo", "time_ratio"]


def loocv_comparison(cfg: ExperimentConfig, rep: int = 0):
    inst, init = build_instance(cfg, rep)
    if inst.loss.kind != "squared" or inst.prox.kind != "identity":
        raise InvalidConfig("loocv comparison needs squared loss without regularization")
    T = cfg.iterations
    hat, t_hat = timed_estimate_path(inst, T, init)
    loo, t_loo = inference.loocv_gen_error(inst, T, init, return_times=True)
    return hat, loo, t_loo / t_hat


def cmd_loocv(cfg: ExperimentConfig, out_dir: str = ".") -> str:
    hat, loo, ratio = loocv_comparison(cfg)
    rows = [[t + 1, hat[t], loo[t], ratio[t]] for t in range(cfg.iterations)]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "loocv.csv")
    _write_csv(path, LOOCV_HEADER, rows)
    return path
