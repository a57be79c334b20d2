"""Config-driven experiments: run checks, fit decay rates, write reports."""

from __future__ import annotations

import json
import math
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from .chain_core import (
    FilteringModel,
    conditional_pi_constants,
    energy,
    invariant_measure,
    load_model,
    model_from_dict,
    model_to_dict,
    variance,
)
from .duality import (
    check_backward_variance_inequality,
    check_beta_weighted_inequality,
    filter_stability_bound,
    prop3_diagnostics,
    rt_estimators,
    simulate_dual_ensembles,
    stochastic_stability_bound,
)
from .simulate import kolmogorov_forward

CHECKS = ("pi_constants", "counterexample", "stochastic_stability", "prop3", "backward_ineq", "beta_ineq", "rt",
          "theorem1", "rate_regression")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Experiment description.

    ``model`` is a path to a model JSON file or an inline model dict; relative
    paths resolve against ``base_dir``.  Priors are probability vectors or the
    keyword ``"invariant"``.  ``T`` is the horizon of the dual checks and
    defaults to the largest horizon.
    """

    model: str | dict
    mu: list | str = "invariant"
    mu_bar: list | str = "invariant"
    f: list = field(default_factory=list)
    horizons: list = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    dt: float = 1e-3
    n_trials: int = 1000
    seed: int = 0
    checks: list = field(default_factory=lambda: ["pi_constants"])
    name: str = "experiment"
    T: float | None = None
    c: float | None = None
    n_windows: int = 4
    beta_kinds: list = field(default_factory=lambda: ["min_row", "exact_rayleigh"])
    rate_window: list | None = None
    series_points: int = 16
    probe_pi: list | None = None
    probe_F: list | None = None
    base_dir: str = "."

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigError("n_trials must be at least 1")
        if not self.horizons or any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise ConfigError("horizons must be a nonempty increasing list")
        if self.horizons[0] <= 0:
            raise ConfigError("horizons must be positive")
        unknown = set(self.checks) - set(CHECKS)
        if unknown:
            raise ConfigError(f"unknown checks {sorted(unknown)}; choose from {list(CHECKS)}")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        data = dict(data)
        data.setdefault("base_dir", str(base_dir))
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def load_model(self) -> FilteringModel:
        if isinstance(self.model, dict):
            return model_from_dict(self.model)
        path = Path(self.model)
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        if not path.exists():
            raise ConfigError(f"model file {path} does not exist")
        return load_model(path)

    def resolve_prior(self, value, model: FilteringModel) -> np.ndarray:
        if isinstance(value, str):
            if value != "invariant":
                raise ConfigError(f"prior must be a vector or 'invariant', got {value!r}")
            return invariant_measure(model.generator)
        return np.asarray(value, dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


@dataclass(frozen=True)
class RateEstimate:
    slope: float
    intercept: float
    r_squared: float
    window: tuple
    slope_se: float
    n_points: int

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_decay_rate(times, values, window=None) -> RateEstimate:
    """OLS fit of log(value) against T on the window (default [T_max/2, T_max])."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if window is None:
        window = (times.max() / 2, times.max())
    lo, hi = window
    sel = (times >= lo - 1e-12) & (times <= hi + 1e-12)
    t, v = times[sel], values[sel]
    bad = t[~(v > 0)]
    if bad.size:
        raise ValueError(f"nonpositive values at horizons {bad.tolist()}")
    if t.size < 3:
        raise ValueError(f"need at least 3 points in window [{lo}, {hi}], got {t.size}")
    y = np.log(v)
    X = np.column_stack([t, np.ones_like(t)])
    (slope, intercept), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ np.array([slope, intercept])
    sxx = np.sum((t - t.mean()) ** 2)
    sst = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 1.0
    se = math.sqrt(float(resid @ resid) / (t.size - 2) / sxx)
    return RateEstimate(float(slope), float(intercept), float(min(max(r2, 0.0), 1.0)), (float(lo), float(hi)),
                        se, int(t.size))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


@dataclass
class ExperimentReport:
    config: dict
    model: dict
    checks: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)   # name -> {"columns": [...], "rows": [[...]]}

    def verdicts(self) -> dict:
        return {name: res.get("verdict") for name, res in self.checks.items()}

    @property
    def passed(self) -> bool:
        return all(v is not False for v in self.verdicts().values())

    def to_dict(self) -> dict:
        return {"config": self.config, "model": self.model, "checks": self.checks, "verdicts": self.verdicts(),
                "passed": self.passed}

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json"]
        written[0].write_text(dumps(self.to_dict()))
        for name, s in self.series.items():
            p = out / f"{name}.csv"
            lines = [",".join(s["columns"])] + [",".join(repr(float(v)) for v in row) for row in s["rows"]]
            p.write_text("\n".join(lines) + "\n")
            written.append(p)
        manifest = {
            "name": self.config["name"],
            "seed": self.config["seed"],
            "n_trials": self.config["n_trials"],
            "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
            "verdicts": self.verdicts(),
            "files": [p.name for p in written],
        }
        (out / "manifest.json").write_text(dumps(manifest))
        return written + [out / "manifest.json"]


def _all_pass(items) -> bool:
    return all(bool(i) for i in items)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run the configured checks in order.

    A failing check records its error and a False verdict; later checks still
    run.
    """
    model = config.load_model()
    A = model.generator
    mu = config.resolve_prior(config.mu, model)
    mu_bar = config.resolve_prior(config.mu_bar, model)
    fs = [np.asarray(f, dtype=float) for f in config.f] or [np.eye(model.dim)[0]]
    report = ExperimentReport(config.to_dict(), model_to_dict(model))
    consts = conditional_pi_constants(A, mu_bar)
    positive = [k for k in consts.CERTIFYING if getattr(consts, k) > 0]
    T = config.T if config.T is not None else config.horizons[-1]
    state: dict = {}

    def c_certified():
        """The conditional constant used for certification; 0 when none is positive."""
        if not positive:
            return 0.0
        return config.c if config.c is not None else consts.best_conditional()

    def dual_ensembles():
        if "dual" not in state:
            state["dual"] = simulate_dual_ensembles(
                model, mu, mu_bar, T, config.n_trials, config.seed, config.dt, config.n_windows, n_inner=1,
                beta_kinds=tuple(config.beta_kinds))
        return state["dual"]

    def series_horizons():
        Tmax = config.horizons[-1]
        grid = np.round(np.linspace(0, Tmax, config.series_points + 1)[1:] / config.dt) * config.dt
        return sorted(set(config.horizons) | set(float(g) for g in grid))

    def check_pi_constants():
        return {"invariant_measure": invariant_measure(A), "constants": consts.to_dict(),
                "certifying_positive": positive, "irreducible": A.is_irreducible()}

    def check_counterexample():
        pi = np.asarray(config.probe_pi if config.probe_pi is not None else mu_bar, dtype=float)
        F = np.asarray(config.probe_F if config.probe_F is not None else fs[0], dtype=float)
        enr, var = energy(pi, A, F), variance(pi, F)
        return {"probe_pi": pi, "probe_F": F, "conditional_energy": enr, "conditional_variance": var,
                "standard_c0": consts.standard_c0, "invariant_measure": invariant_measure(A),
                "prop1_constants": {k: getattr(consts, k) for k in consts.CERTIFYING + ("min_row_average",)},
                "conditional_pi_fails": bool(var > 0 and enr <= 1e-12 * var),
                "certified_rate": None if not positive else consts.best_conditional()}

    def check_stochastic_stability():
        out, ok = [], []
        grid = np.array(series_horizons())
        traj = kolmogorov_forward(A, mu, np.concatenate([[0.0], grid]))
        for i, f in enumerate(fs):
            reps = [stochastic_stability_bound(A, mu_bar, mu, f, h) for h in config.horizons]
            ok += [r.verdict for r in reps]
            err = np.abs(traj.distributions[1:] @ f - mu_bar @ f)
            report.series[f"stochastic_stability_f{i}"] = {"columns": ["T", "abs_error"],
                                                           "rows": np.column_stack([grid, err]).tolist()}
            entry = {"f": f, "reports": [r.to_dict() for r in reps]}
            try:
                entry["rate"] = estimate_decay_rate(grid, err, config.rate_window).to_dict()
            except ValueError as exc:
                entry["rate_error"] = str(exc)
            out.append(entry)
        return {"functions": out, "verdict": _all_pass(ok)}

    def check_prop3():
        diags = prop3_diagnostics(model, mu, mu_bar, T, config.n_trials, ensembles=dual_ensembles())
        checks = [d for d in diags if d.role == "check"]
        return {"diagnostics": [d.to_dict() for d in diags], "verdict": _all_pass(d.verdict for d in checks),
                "gamma_candidate_passes": _all_pass(d.verdict for d in diags if d.role == "finding")}

    def check_backward_ineq():
        c = config.c if config.c is not None else consts.best_conditional()
        r = check_backward_variance_inequality(model, mu, mu_bar, T, config.n_trials, c,
                                               ensembles=dual_ensembles())
        return {"report": r.to_dict(), "verdict": r.verdict}

    def check_beta_ineq():
        reps = [check_beta_weighted_inequality(model, mu, mu_bar, T, config.n_trials, k, ensembles=dual_ensembles())
                for k in config.beta_kinds]
        return {"reports": [r.to_dict() for r in reps], "verdict": _all_pass(r.verdict for r in reps)}

    def check_rt():
        r = rt_estimators(model, mu, mu_bar, T, config.n_trials, ensembles=dual_ensembles())
        return {"estimate": r.to_dict(), "verdict": r.verdict}

    def theorem1_results():
        if "thm1" not in state:
            c = c_certified()
            state["thm1"] = [filter_stability_bound(model, mu, mu_bar, f, config.horizons, config.n_trials,
                                                    c=c, seed=config.seed, dt=config.dt,
                                                    series_horizons=series_horizons())
                             for f in fs]
        return state["thm1"]

    def check_theorem1():
        if not positive:
            return {"certified": False, "certified_rate": None, "verdict": False,
                    "reason": "no positive conditional Poincare constant; no rate is certified"}
        out, ok = [], []
        for i, (f, res) in enumerate(zip(fs, theorem1_results())):
            report.series[f"l1_error_f{i}"] = {
                "columns": ["T", "l1_mean", "l1_se"],
                "rows": np.column_stack([res.series_horizons, res.l1_mean, res.l1_se]).tolist()}
            ok += [r.verdict for r in res.reports]
            out.append({"f": f, **res.to_dict()})
        return {"functions": out, "certified": True, "certified_rate": c_certified(), "verdict": _all_pass(ok)}

    def check_rate_regression():
        if not positive:
            return {"certified_rate": None, "verdict": False,
                    "reason": "no positive conditional Poincare constant; no rate is certified"}
        c = c_certified()
        out, ok = [], []
        for f, res in zip(fs, theorem1_results()):
            est = estimate_decay_rate(res.series_horizons, res.l1_mean, config.rate_window)
            bound = -c / 2 + 3 * est.slope_se
            ok.append(est.slope <= bound)
            out.append({"f": f, "rate": est.to_dict(), "slope_bound": bound, "verdict": est.slope <= bound})
        return {"functions": out, "certified_rate": c / 2, "verdict": _all_pass(ok)}

    runners = {"pi_constants": check_pi_constants, "counterexample": check_counterexample,
               "stochastic_stability": check_stochastic_stability, "prop3": check_prop3,
               "backward_ineq": check_backward_ineq, "beta_ineq": check_beta_ineq, "rt": check_rt,
               "theorem1": check_theorem1, "rate_regression": check_rate_regression}
    for name in config.checks:
        try:
            res = runners[name]()
        except Exception as exc:  # surfaced per check; later checks still run
            res = {"error": f"{type(exc).__name__}: {exc}", "verdict": False}
        res.setdefault("verdict", None)
        report.checks[name] = _jsonable(res)
    return report


EXAMPLE1_MODEL = {"dim": 2, "rates": [[-1.0, 1.0], [2.0, -2.0]], "h": [[1.0], [0.0]], "R": [[1.0]]}
CYCLE_MODEL = {"dim": 4, "rates": (np.roll(np.eye(4), 1, axis=1) - np.eye(4)).tolist(),
               "h": [[1.0], [0.0], [1.0], [0.0]], "R": [[1.0]]}

PRESETS = {
    "example1": dict(
        name="example1", model=EXAMPLE1_MODEL, mu=[0.9, 0.1], f=[[1.0, 0.0]], horizons=[0.5, 1.0, 2.0, 4.0],
        T=2.0, dt=1e-3, n_trials=10_000, c=3.0,
        checks=["pi_constants", "stochastic_stability", "prop3", "backward_ineq", "beta_ineq", "rt", "theorem1",
                "rate_regression"]),
    "counterexample": dict(
        name="counterexample", model=CYCLE_MODEL, mu=[0.7, 0.1, 0.1, 0.1], f=[[1.0, 1.0, -1.0, -1.0]],
        horizons=[0.5, 1.0, 2.0, 3.0], dt=1e-2, n_trials=1000, probe_pi=[0.5, 0.0, 0.5, 0.0],
        probe_F=[1.0, 1.0, -1.0, -1.0], checks=["pi_constants", "counterexample", "stochastic_stability",
                                                 "theorem1"]),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    data = {**PRESETS[name], **{k: v for k, v in overrides.items() if v is not None}}
    return ExperimentConfig.from_dict(data)
