"""Experiment harness: configs, presets, seed fan-out, CSV bundles.

Configs are INI files parsed strictly: unknown sections or keys are
rejected, seeds are always explicit, and reruns of the same config write
byte-identical files. `--jobs` only changes how seeds are distributed
over processes, never the output, so it stays out of the manifest.

Modes
-----
angles       full runs, per-seed angle traces plus mean/min/max
calibrate    wg tables with shadow real steps, aggregated over seeds
sample       accelerated vs full runs: error traces, PSNR, NFE, speedup
refine       PSNR-vs-bias sweep plus golden refinement of the bias
ablate-skip  accelerated runs vs skipping the same iterations outright
report       angles + calibrate + sample in one bundle
"""

from __future__ import annotations

import configparser
import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError
from .ltc import (
    AccelerationPlan,
    accelerated_sample,
    angle_trace,
    calibrate_wg,
    detect_interval,
    golden_section_max,
)
from .metrics import (
    RunReport,
    aggregate,
    end_error,
    nfe_speedup,
    psnr,
    write_csv,
)
from .model import DiagGmmDenoiser, PointMassDenoiser, RecordedTraceDenoiser
from .sampler import initial_noise, make_timesteps, sample_full, sample_skipping
from .schedule import PhiMode, build_linear_beta

MODES = ("angles", "calibrate", "sample", "refine", "ablate-skip", "report")

_SECTIONS = {
    "schedule": {"t_train", "beta_start", "beta_end"},
    "sampling": {"steps"},
    "denoiser": {"kind", "dim", "mu", "weights", "means", "variances", "manifest"},
    "plan": {"interval", "r", "tau", "bias", "phi_mode", "per_seed_wg",
             "calibration_seed"},
    "bias": {"lo", "hi", "search"},
    "run": {"seeds", "out", "jobs"},
}

_KINDS = ("point", "gmm", "gmm-bench", "trace")


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description."""

    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 40
    kind: str = "gmm-bench"
    dim: int = 16
    mu: tuple = ()
    weights: tuple = ()
    means: tuple = ()
    variances: tuple = ()
    manifest: str = ""
    interval: object = (13, 39)          # (a, b) | "auto" | None
    r: int = 2
    tau: float = 0.1
    bias: object = 0.0                   # float | "refine"
    phi_mode: str = "sqrt_snr"
    per_seed_wg: bool = False
    calibration_seed: int = -1           # -1: first seed
    bias_lo: float = -0.05
    bias_hi: float = 0.10
    bias_search: str = "grid"
    seeds: tuple = tuple(range(20))
    out: str = ""
    jobs: int = 1

    def canonical_lines(self) -> list[str]:
        """Deterministic key=value lines; execution-only keys excluded."""
        skip = {"out", "jobs"}
        lines = []
        for f in fields(self):
            if f.name in skip:
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"config.{f.name}={v}")
        return sorted(lines)

    def fingerprint(self) -> str:
        text = "\n".join(self.canonical_lines())
        return hashlib.sha256(text.encode("ascii")).hexdigest()


PRESETS = {
    "sd2-ddim-40": ExperimentConfig(steps=40, interval=(13, 39)),
    "sd2-ddim-50": ExperimentConfig(steps=50, interval=(11, 49)),
    "sd2-ddim-100": ExperimentConfig(steps=100, interval=(21, 99)),
    "fig2-trace": ExperimentConfig(steps=40, interval=(12, 38), per_seed_wg=True),
    "fig4-bias": ExperimentConfig(steps=40, interval=(12, 38), bias="refine",
                                  seeds=tuple(range(10))),
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        )
    return PRESETS[name]


def _parse_floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise ConfigError(f"expected comma-separated floats, got {text!r}") from None


def _parse_matrix(text: str) -> tuple:
    return tuple(_parse_floats(row) for row in text.split(";") if row.strip() != "")


def _parse_interval(text: str):
    t = text.strip().lower()
    if t in ("auto", "none"):
        return t if t == "auto" else None
    parts = _parse_floats(text)
    if len(parts) != 2:
        raise ConfigError(f"interval must be 'a,b', 'auto' or 'none', got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_bias(text: str):
    t = text.strip().lower()
    if t == "refine":
        return "refine"
    try:
        return float(t)
    except ValueError:
        raise ConfigError(f"bias must be a number or 'refine', got {text!r}") from None


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def parse_config(path: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay an INI file onto a base config, rejecting unknown keys."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as f:
            cp.read_file(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None

    cfg = base if base is not None else ExperimentConfig()
    updates: dict = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in cp.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                updates.update(_convert(section, key, value))
            except ConfigError:
                raise
            except ValueError:
                raise ConfigError(
                    f"bad value for {section}.{key}: {value!r}") from None
    return validate_config(replace(cfg, **updates))


def _convert(section: str, key: str, value: str) -> dict:
    if (section, key) == ("schedule", "t_train"):
        return {"t_train": int(value)}
    if (section, key) == ("schedule", "beta_start"):
        return {"beta_start": float(value)}
    if (section, key) == ("schedule", "beta_end"):
        return {"beta_end": float(value)}
    if (section, key) == ("sampling", "steps"):
        return {"steps": int(value)}
    if (section, key) == ("denoiser", "kind"):
        return {"kind": value.strip()}
    if (section, key) == ("denoiser", "dim"):
        return {"dim": int(value)}
    if (section, key) == ("denoiser", "mu"):
        return {"mu": _parse_floats(value)}
    if (section, key) == ("denoiser", "weights"):
        return {"weights": _parse_floats(value)}
    if (section, key) == ("denoiser", "means"):
        return {"means": _parse_matrix(value)}
    if (section, key) == ("denoiser", "variances"):
        return {"variances": _parse_matrix(value)}
    if (section, key) == ("denoiser", "manifest"):
        return {"manifest": value.strip()}
    if (section, key) == ("plan", "interval"):
        return {"interval": _parse_interval(value)}
    if (section, key) == ("plan", "r"):
        return {"r": int(value)}
    if (section, key) == ("plan", "tau"):
        return {"tau": float(value)}
    if (section, key) == ("plan", "bias"):
        return {"bias": _parse_bias(value)}
    if (section, key) == ("plan", "phi_mode"):
        return {"phi_mode": value.strip()}
    if (section, key) == ("plan", "per_seed_wg"):
        return {"per_seed_wg": _parse_bool(value)}
    if (section, key) == ("plan", "calibration_seed"):
        return {"calibration_seed": int(value)}
    if (section, key) == ("bias", "lo"):
        return {"bias_lo": float(value)}
    if (section, key) == ("bias", "hi"):
        return {"bias_hi": float(value)}
    if (section, key) == ("bias", "search"):
        return {"bias_search": value.strip()}
    if (section, key) == ("run", "seeds"):
        return {"seeds": tuple(int(v) for v in _parse_floats(value))}
    if (section, key) == ("run", "out"):
        return {"out": value.strip()}
    if (section, key) == ("run", "jobs"):
        return {"jobs": int(value)}
    raise ConfigError(f"unhandled key {section}.{key}")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.kind not in _KINDS:
        raise ConfigError(f"unknown denoiser kind {cfg.kind!r}; known: {_KINDS}")
    if cfg.kind == "point" and not cfg.mu:
        raise ConfigError("denoiser kind 'point' requires mu")
    if cfg.kind == "gmm" and not (cfg.weights and cfg.means and cfg.variances):
        raise ConfigError("denoiser kind 'gmm' requires weights, means, variances")
    if cfg.kind == "trace" and not cfg.manifest:
        raise ConfigError("denoiser kind 'trace' requires manifest")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    if cfg.phi_mode not in tuple(m.value for m in PhiMode):
        raise ConfigError(f"unknown phi_mode {cfg.phi_mode!r}")
    if cfg.bias_search not in ("grid", "binary"):
        raise ConfigError(f"unknown bias search {cfg.bias_search!r}")
    if not cfg.bias_lo <= cfg.bias_hi:
        raise ConfigError(f"empty bias interval [{cfg.bias_lo}, {cfg.bias_hi}]")
    if cfg.calibration_seed != -1 and cfg.calibration_seed not in cfg.seeds:
        raise ConfigError(
            f"calibration_seed {cfg.calibration_seed} is not among the seeds")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be at least 1")
    return cfg


def benchmark_gmm(schedule, dim: int = 16) -> DiagGmmDenoiser:
    """The frozen mixture used by the canned experiments.

    Three well-separated components with asymmetric weights and broad
    anisotropic covariances; parameters are drawn once from a fixed
    generator so every caller sees the same distribution. The scales are
    chosen so a 40-iteration run shows the studied phases: directional
    oscillation while the state commits to a mode, then a long coherent
    stretch where consecutive transitions stay nearly parallel.
    """
    rng = np.random.default_rng(20240601)
    means = rng.uniform(-4.5, 4.5, size=(3, dim))
    variances = rng.uniform(0.6, 1.4, size=(3, dim))
    return DiagGmmDenoiser([0.5, 0.3, 0.2], means, variances, schedule)


def build_denoiser(cfg: ExperimentConfig, schedule, seed: int):
    if cfg.kind == "point":
        return PointMassDenoiser(np.asarray(cfg.mu), schedule)
    if cfg.kind == "gmm":
        return DiagGmmDenoiser(np.asarray(cfg.weights), np.asarray(cfg.means),
                               np.asarray(cfg.variances), schedule)
    if cfg.kind == "gmm-bench":
        return benchmark_gmm(schedule, cfg.dim)
    return RecordedTraceDenoiser.from_manifest(cfg.manifest, seed)


def _base_plan(cfg: ExperimentConfig, interval) -> AccelerationPlan:
    b = cfg.bias if isinstance(cfg.bias, float) else 0.0
    return AccelerationPlan(interval=interval, r=cfg.r, tau=cfg.tau,
                            bias=b, phi_mode=PhiMode(cfg.phi_mode))


def _resolve_interval(cfg: ExperimentConfig, schedule, ts) -> object:
    if cfg.interval != "auto":
        return cfg.interval
    seed = cfg.seeds[0] if cfg.calibration_seed == -1 else cfg.calibration_seed
    den = build_denoiser(cfg, schedule, seed)
    full = sample_full(den, schedule, initial_noise(den.dim, seed), ts, seed=seed)
    trace = angle_trace(full)
    pos = detect_interval(trace, cfg.tau)
    if pos is None:
        return None
    a, b = trace.iteration_interval(pos)
    return a, min(b, len(ts) - 2)  # final iteration is always real


def _seed_task(args):
    """Per-seed work unit; top-level so process pools can pickle it."""
    cfg, plan, seed, needs, bias_grid = args
    schedule = build_linear_beta(cfg.t_train, cfg.beta_start, cfg.beta_end)
    ts = make_timesteps(cfg.t_train, cfg.steps)
    den = build_denoiser(cfg, schedule, seed)
    x0 = initial_noise(den.dim, seed)
    out = {"seed": seed}
    full = sample_full(den, schedule, x0, ts, seed=seed)
    n = full.iterations
    if "angles" in needs:
        out["angles"] = angle_trace(full).angles
    cal = None
    if "wg" in needs or (plan is not None and plan.wg is None
                         and plan.selected()):
        cal = calibrate_wg(den, schedule, x0, ts, plan, seed=seed)
        out["wg"] = np.array([cal.wg[i] for i in plan.selected()])
        err, rel = end_error(full.final, cal.trajectory.final)
        out["cal_row"] = (seed, cal.trajectory.nfe, n, 1.0,
                          psnr(full.final, cal.trajectory.final), err, rel)
    if "accel" in needs or bias_grid is not None:
        plan_eff = plan if plan.wg is not None else plan.with_wg(
            cal.wg if cal is not None else {})
        acc = accelerated_sample(den, schedule, x0, ts, plan_eff, seed=seed)
        diffs = np.linalg.norm(full.states - acc.states, axis=1)
        norms = np.linalg.norm(full.states, axis=1)
        out["err_abs"] = diffs
        out["err_rel"] = 100.0 * diffs / np.where(norms == 0.0, np.inf, norms)
        err, rel = end_error(full.final, acc.final)
        out["row"] = (seed, acc.nfe, n, nfe_speedup(n, acc.nfe),
                      psnr(full.final, acc.final), err, rel)
        if "skip" in needs:
            skip = sample_skipping(den, schedule, x0, ts,
                                   set(plan_eff.selected()), seed=seed)
            out["skip"] = (psnr(full.final, acc.final),
                           psnr(full.final, skip.final), acc.nfe, skip.nfe)
        if bias_grid is not None:
            vals = []
            for b in bias_grid:
                t = accelerated_sample(den, schedule, x0, ts,
                                       replace(plan_eff, bias=float(b)))
                vals.append(psnr(full.final, t.final))
            out["bias_psnr"] = np.array(vals)
    return out


def _fan_out(cfg, plan, needs, bias_grid=None):
    tasks = [(cfg, plan, seed, needs, bias_grid) for seed in cfg.seeds]
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_seed_task, tasks))
    else:
        results = [_seed_task(t) for t in tasks]
    return sorted(results, key=lambda r: r["seed"])


def _calibrated_plan(cfg: ExperimentConfig, base: AccelerationPlan):
    """Calibrate wg once on the calibration seed unless per-seed is on."""
    if not base.selected():
        return base.with_wg({})
    if cfg.per_seed_wg:
        return base  # workers calibrate their own
    seed = cfg.seeds[0] if cfg.calibration_seed == -1 else cfg.calibration_seed
    schedule = build_linear_beta(cfg.t_train, cfg.beta_start, cfg.beta_end)
    ts = make_timesteps(cfg.t_train, cfg.steps)
    den = build_denoiser(cfg, schedule, seed)
    cal = calibrate_wg(den, schedule, initial_noise(den.dim, seed), ts, base,
                       seed=seed)
    return base.with_wg(cal.wg)


def _write_manifest(out_dir: str, mode: str, cfg: ExperimentConfig,
                    results: dict, files: dict) -> None:
    lines = [f"mode={mode}", f"fingerprint={cfg.fingerprint()}"]
    lines += cfg.canonical_lines()
    lines += [f"result.{k}={v}" for k, v in sorted(results.items())]
    lines += [f"file.{name}={digest}" for name, digest in sorted(files.items())]
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def _digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def run(cfg: ExperimentConfig, mode: str) -> RunReport:
    """Execute one mode and write its CSV bundle into cfg.out."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; known: {', '.join(MODES)}")
    if not cfg.out:
        raise ConfigError("no output directory configured")
    validate_config(cfg)
    out_dir = cfg.out
    os.makedirs(out_dir, exist_ok=True)

    schedule = build_linear_beta(cfg.t_train, cfg.beta_start, cfg.beta_end)
    ts = make_timesteps(cfg.t_train, cfg.steps)
    n = len(ts) - 1
    interval = _resolve_interval(cfg, schedule, ts)
    base = _base_plan(cfg, interval)
    base.validate(n, require_wg=False)

    needs = {
        "angles": frozenset({"angles"}),
        "calibrate": frozenset({"wg"}),
        "sample": frozenset({"accel"}),
        "refine": frozenset({"accel"}),
        "ablate-skip": frozenset({"accel", "skip"}),
        "report": frozenset({"angles", "wg", "accel"}),
    }[mode]

    plan = _calibrated_plan(cfg, base)
    report = RunReport(fingerprint=cfg.fingerprint(), mode=mode, seeds=cfg.seeds)
    files: dict = {}
    result_lines: dict = {}
    if cfg.interval == "auto":
        result_lines["interval"] = (
            "none" if interval is None else f"{interval[0]},{interval[1]}")

    def emit(name: str, schema: str, rows) -> None:
        path = os.path.join(out_dir, name)
        write_csv(path, schema, rows)
        files[name] = _digest(path)

    # Resolve the bias first so every CSV below reflects the chosen value.
    if mode == "refine" or cfg.bias == "refine":
        grid = np.linspace(cfg.bias_lo, cfg.bias_hi, 11)
        pre = _fan_out(cfg, plan, frozenset(), grid)
        mean, lo, hi = aggregate([r["bias_psnr"] for r in pre])
        rows = list(zip(grid, mean, lo, hi))
        emit("psnr_summary.csv", "psnr_summary", rows)
        report.psnr_stats = rows
        bias_star = _refine_on_mean(cfg, plan, grid, mean)
        report.bias = bias_star
        result_lines["bias"] = repr(bias_star)
        plan = replace(plan, bias=bias_star)

    results = _fan_out(cfg, plan, needs)

    if "angles" in needs:
        iters = np.arange(2, n + 1)
        for r in results:
            emit(f"angle_seed{r['seed']}.csv", "angle",
                 list(zip(iters, r["angles"])))
        mean, lo, hi = aggregate([r["angles"] for r in results])
        emit("angle_mean.csv", "angle", list(zip(iters, mean)))
        emit("angle_min.csv", "angle", list(zip(iters, lo)))
        emit("angle_max.csv", "angle", list(zip(iters, hi)))
        report.angle_stats = (iters, mean, lo, hi)

    if "wg" in needs:
        sel = np.asarray(base.selected(), dtype=np.int64)
        mean, lo, hi = aggregate([r["wg"] for r in results])
        emit("latent_wg_summary.csv", "latent_wg_summary",
             list(zip(sel, mean, lo, hi)))
        report.wg_stats = (sel, mean, lo, hi)
        report.rows = [r["cal_row"] for r in results]

    if "accel" in needs:
        positions = np.arange(n + 1)
        mean, lo, hi = aggregate([r["err_rel"] for r in results])
        emit("error_summary.csv", "error_summary",
             list(zip(positions, mean, lo, hi)))
        report.error_stats = (positions, mean, lo, hi)
        mean_a, lo_a, hi_a = aggregate([r["err_abs"] for r in results])
        emit("error_abs_summary.csv", "error_summary",
             list(zip(positions, mean_a, lo_a, hi_a)))
        report.error_abs_stats = (positions, mean_a, lo_a, hi_a)
        report.rows = [r["row"] for r in results]

    if "skip" in needs:
        emit("ablation.csv", "ablation",
             [(r["seed"],) + r["skip"] for r in results])

    if mode == "angles":
        # A full run compared to itself: unit speedup, zero end error.
        report.rows = [(r["seed"], n, n, 1.0, 99.0, 0.0, 0.0) for r in results]
    emit("report.csv", "report", report.rows)

    _write_manifest(out_dir, mode, cfg, result_lines, files)
    report.files = files
    return report


def _refine_on_mean(cfg: ExperimentConfig, plan: AccelerationPlan,
                    grid: np.ndarray, grid_mean: np.ndarray) -> float:
    """Golden refinement of the seed-mean PSNR around the best grid bias."""
    cache = {float(b): float(v) for b, v in zip(grid, grid_mean)}

    def mean_psnr(b: float) -> float:
        b = float(b)
        if b not in cache:
            results = _fan_out(cfg, plan, frozenset(), np.array([b]))
            cache[b] = float(np.mean(
                [float(r["bias_psnr"][0]) for r in results]))
        return cache[b]

    if 0.0 not in cache and cfg.bias_lo <= 0.0 <= cfg.bias_hi:
        mean_psnr(0.0)
    if cfg.bias_search == "grid":
        k = int(np.argmax(grid_mean))
        lo = float(grid[max(k - 1, 0)])
        hi = float(grid[min(k + 1, len(grid) - 1)])
        golden_section_max(mean_psnr, lo, hi, tol=1e-5)
    else:
        golden_section_max(mean_psnr, cfg.bias_lo, cfg.bias_hi, tol=1e-5)
    return max(cache, key=lambda b: (cache[b], -abs(b)))
