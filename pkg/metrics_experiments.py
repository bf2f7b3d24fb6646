# Forecasting and planning metrics plus the experiment suites
# Each suite evaluates trained models on generated scenes with per-scene
# (or per-episode) random streams, aggregates with standard errors and
# t-based confidence intervals, and emits CSV tables with a JSON manifest.

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from cem_planner import CemConfig, PlanMode, cem_optimize, plan_spec_for, predictor_for
from cvae import CvaeModel, decode_from_noise
from didactic_sim import Dataset, SimConfig, generate_dataset, shift_distribution, travel_distance_histogram
from errors import UsageError, require
from risk_biaser import BiaserModel, biased_forecasts, robot_future, unbiased_costs
from risk_measures import cvar_mc
from store import ArtifactStore
from streams import child_seed, parallel_map, scene_rng
from ttc_cost import TtcParams, batch_trajectory_cost, trajectory_ttc_cost

logger = logging.getLogger(__name__)


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class ExperimentConfig:
    """Sizes and grids of the experiment suites (desk-scale defaults)."""
    n_train: int = 20000
    n_val: int = 500
    episodes: int = 100
    ref_samples: int = 4096
    eval_sigmas: Tuple[float, ...] = (0.0, 0.3, 0.5, 0.8, 0.95, 1.0)
    risk_curve_sigmas: Tuple[float, ...] = (0.8, 0.95, 1.0)
    risk_curve_ks: Tuple[int, ...] = (1, 2, 4, 8, 16)
    planning_sigmas: Tuple[float, ...] = (0.8, 0.95)
    planning_ks: Tuple[int, ...] = (1, 2, 4, 16, 64)
    timing_ks: Tuple[int, ...] = (1, 16, 64)
    timing_repeats: int = 3
    shift_scale: float = 0.75
    include_shift: bool = True

    def __post_init__(self):
        for name in ("n_train", "n_val", "episodes", "ref_samples", "timing_repeats"):
            require(getattr(self, name) >= 1, name, f"must be at least 1, got {getattr(self, name)}")
        for name in ("eval_sigmas", "risk_curve_sigmas", "planning_sigmas"):
            require(all(0.0 <= s <= 1.0 for s in getattr(self, name)), name, "entries must lie in [0, 1]")
        for name in ("risk_curve_ks", "planning_ks", "timing_ks"):
            require(all(k >= 1 for k in getattr(self, name)), name, "entries must be at least 1")
        require(self.shift_scale > 0, "shift_scale", f"must be positive, got {self.shift_scale}")


# ============================================================================
# METRICS
# ============================================================================

def fde(forecast: np.ndarray, gt: np.ndarray):
    """Distance between final positions; batched over leading dims of forecast."""
    forecast = np.asarray(forecast, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if forecast.shape[-2] != gt.shape[-2]:
        raise UsageError(f"forecast has {forecast.shape[-2]} steps, ground truth {gt.shape[-2]}")
    dist = np.linalg.norm(forecast[..., -1, :] - gt[..., -1, :], axis=-1)
    return float(dist) if np.ndim(dist) == 0 else dist


def min_fde(forecasts: np.ndarray, gt: np.ndarray) -> float:
    """Minimum FDE over K forecasts (K, T, 2)."""
    forecasts = np.asarray(forecasts, dtype=np.float64)
    if forecasts.ndim != 3 or forecasts.shape[0] == 0:
        raise UsageError("min_fde needs at least one forecast of shape (T, 2)")
    return float(np.min(fde(forecasts, gt)))


def ade(forecast: np.ndarray, gt: np.ndarray):
    forecast = np.asarray(forecast, dtype=np.float64)
    if forecast.shape[-2] != np.shape(gt)[-2]:
        raise UsageError("forecast and ground truth differ in length")
    return np.linalg.norm(forecast - gt, axis=-1).mean(axis=-1)


def standard_error(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(stats.sem(values)) if values.size > 1 else float("nan")


def ci_half_width(values: np.ndarray, level: float = 0.95) -> float:
    """Half-width of the t-based confidence interval of the mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float("nan")
    return float(stats.t.ppf(0.5 + level / 2.0, values.size - 1) * stats.sem(values))


# ============================================================================
# RISK ESTIMATION ERROR
# ============================================================================

class EstimatorMethod(Enum):
    BIASED = "biased"  # mean cost of K biased samples
    UNBIASED_MC = "unbiased_mc"  # tail-mean CVaR of K unbiased samples


@dataclass
class RiskErrorStats:
    method: EstimatorMethod
    sigma: float
    k: int
    signed_mean: float
    abs_mean: float
    signed_se: float
    abs_se: float
    q05: float
    q95: float
    n_scenes: int


def _scene_risk_errors(cvae: CvaeModel, biaser: BiaserModel, dataset: Dataset, index: int, sigma: float,
                       ks: Sequence[int], ref_n: int, seed: int, ttc: TtcParams) -> Tuple[np.ndarray, np.ndarray]:
    """Per-K signed errors of both estimators on one scene; nested sample prefixes."""
    rng = scene_rng(seed, "risk-error", index)
    x, y_robot = dataset.x[index], dataset.y_robot[index]
    reference = float(cvar_mc(unbiased_costs(cvae, x, y_robot, rng.standard_normal((ref_n, cvae.latent_dim)), ttc), sigma))
    k_max = max(ks)
    biased = biased_forecasts(biaser, x, sigma, y_robot, rng.standard_normal((k_max, cvae.latent_dim)))
    biased_costs = batch_trajectory_cost(biased, robot_future(cvae, y_robot), cvae.dt, ttc)
    plain_costs = unbiased_costs(cvae, x, y_robot, rng.standard_normal((k_max, cvae.latent_dim)), ttc)
    biased_err = np.array([biased_costs[:k].mean() - reference for k in ks])
    plain_err = np.array([cvar_mc(plain_costs[:k], sigma) - reference for k in ks])
    return biased_err, plain_err


def _summarise(method: EstimatorMethod, sigma: float, k: int, errors: np.ndarray) -> RiskErrorStats:
    return RiskErrorStats(
        method=method,
        sigma=sigma,
        k=k,
        signed_mean=float(np.mean(errors)),
        abs_mean=float(np.mean(np.abs(errors))),
        signed_se=standard_error(errors),
        abs_se=standard_error(np.abs(errors)),
        q05=float(np.quantile(errors, 0.05)),
        q95=float(np.quantile(errors, 0.95)),
        n_scenes=int(errors.size),
    )


def risk_error_stats(cvae: CvaeModel, biaser: BiaserModel, dataset: Dataset, sigma: float, ks: Sequence[int],
                     ref_n: int, seed: int, threads: Optional[int] = None,
                     ttc: TtcParams = TtcParams()) -> List[RiskErrorStats]:
    """Signed/absolute error of both risk estimators against a ref_n-sample reference, per K."""
    if not ks:
        raise UsageError("need at least one sample count K")
    per_scene = parallel_map(
        lambda i: _scene_risk_errors(cvae, biaser, dataset, i, sigma, ks, ref_n, seed, ttc),
        range(len(dataset)), threads,
    )
    biased = np.stack([b for b, _ in per_scene])
    plain = np.stack([p for _, p in per_scene])
    out = []
    for j, k in enumerate(ks):
        out.append(_summarise(EstimatorMethod.BIASED, sigma, k, biased[:, j]))
        out.append(_summarise(EstimatorMethod.UNBIASED_MC, sigma, k, plain[:, j]))
    return out


def run_risk_curves(cvae: CvaeModel, biaser: BiaserModel, dataset: Dataset, sigmas: Sequence[float],
                    ks: Sequence[int], ref_n: int, seed: int, threads: Optional[int] = None,
                    ttc: TtcParams = TtcParams()) -> pd.DataFrame:
    """Risk-error curves: method, sigma, K, err_mean, err_q05, err_q95."""
    rows = []
    for sigma in sigmas:
        logger.info("risk curves at sigma=%.2f over %d scenes", sigma, len(dataset))
        for s in risk_error_stats(cvae, biaser, dataset, sigma, ks, ref_n, seed, threads, ttc):
            rows.append({"method": s.method.value, "sigma": s.sigma, "K": s.k,
                         "err_mean": s.signed_mean, "err_q05": s.q05, "err_q95": s.q95})
    return pd.DataFrame(rows, columns=["method", "sigma", "K", "err_mean", "err_q05", "err_q95"])


# ============================================================================
# FORECAST EVALUATION
# ============================================================================

@dataclass
class ForecastEvalRow:
    """One row of the forecasting table; sigma None is the unbiased model."""
    sigma: Optional[float]
    minfde16: float
    fde1: float
    risk_err4: float
    risk_abs_err4: float
    se_minfde16: float
    se_fde1: float
    se_risk_err4: float
    se_risk_abs_err4: float


FORECAST_COLUMNS = ["sigma", "minfde16", "fde1", "risk_err4", "risk_abs_err4",
                    "se_minfde16", "se_fde1", "se_risk_err4", "se_risk_abs_err4"]


def _scene_forecast_metrics(cvae: CvaeModel, biaser: BiaserModel, dataset: Dataset, index: int,
                            sigmas: Sequence[float], ref_n: int, seed: int, ttc: TtcParams) -> np.ndarray:
    """(1 + len(sigmas), 3) array of minFDE(16), FDE(1), signed risk error(4); first row unbiased."""
    x, y, y_robot = dataset.x[index], dataset.y[index], dataset.y_robot[index]
    ref_rng = scene_rng(seed, "forecast-eval", "reference", index)
    ref_costs = unbiased_costs(cvae, x, y_robot, ref_rng.standard_normal((ref_n, cvae.latent_dim)), ttc)
    noise = scene_rng(seed, "forecast-eval", "samples", index).standard_normal((16, cvae.latent_dim))

    unbiased = decode_from_noise(cvae, x, noise)
    rows = [[min_fde(unbiased, y), fde(unbiased[0], y), float("nan")]]
    future = robot_future(cvae, y_robot)
    for sigma in sigmas:
        forecasts = biased_forecasts(biaser, x, sigma, y_robot, noise)
        estimate = batch_trajectory_cost(forecasts[:4], future, cvae.dt, ttc).mean()
        rows.append([min_fde(forecasts, y), fde(forecasts[0], y), estimate - cvar_mc(ref_costs, sigma)])
    return np.array(rows)


def run_forecast_eval(cvae: CvaeModel, biaser: BiaserModel, dataset: Dataset, sigmas: Sequence[float],
                      seed: int, ref_n: int = 4096, threads: Optional[int] = None,
                      ttc: TtcParams = TtcParams()) -> List[ForecastEvalRow]:
    """Unbiased row plus one row per sigma, averaged over the scenes of ``dataset``."""
    per_scene = np.stack(parallel_map(
        lambda i: _scene_forecast_metrics(cvae, biaser, dataset, i, sigmas, ref_n, seed, ttc),
        range(len(dataset)), threads,
    ))
    rows = []
    for j, sigma in enumerate([None] + list(sigmas)):
        minfde16, fde1, err = per_scene[:, j, 0], per_scene[:, j, 1], per_scene[:, j, 2]
        has_risk = sigma is not None
        rows.append(ForecastEvalRow(
            sigma=sigma,
            minfde16=float(minfde16.mean()),
            fde1=float(fde1.mean()),
            risk_err4=float(err.mean()) if has_risk else float("nan"),
            risk_abs_err4=float(np.abs(err).mean()) if has_risk else float("nan"),
            se_minfde16=standard_error(minfde16),
            se_fde1=standard_error(fde1),
            se_risk_err4=standard_error(err) if has_risk else float("nan"),
            se_risk_abs_err4=standard_error(np.abs(err)) if has_risk else float("nan"),
        ))
    logger.info("forecast evaluation over %d scenes and %d risk levels", len(dataset), len(sigmas))
    return rows


def forecast_table(rows: Sequence[ForecastEvalRow]) -> pd.DataFrame:
    records = []
    for row in rows:
        record = dataclasses.asdict(row)
        record["sigma"] = "unbiased" if row.sigma is None else row.sigma
        records.append(record)
    return pd.DataFrame(records, columns=FORECAST_COLUMNS)


TRAVEL_DISTANCE_COLUMNS = ["sigma", "bin_left", "bin_right", "count", "mean_cost"]


def _scene_forecast_samples(cvae: CvaeModel, biaser: BiaserModel, dataset: Dataset, index: int,
                            sigmas: Sequence[float], seed: int, ttc: TtcParams) -> np.ndarray:
    """(1 + len(sigmas), 16, 2) travel distance and cost per forecast; first row unbiased."""
    x, y_robot = dataset.x[index], dataset.y_robot[index]
    noise = scene_rng(seed, "forecast-eval", "samples", index).standard_normal((16, cvae.latent_dim))
    future = robot_future(cvae, y_robot)
    predictors = [decode_from_noise(cvae, x, noise)]
    predictors += [biased_forecasts(biaser, x, sigma, y_robot, noise) for sigma in sigmas]
    return np.stack([
        np.stack([np.linalg.norm(f[:, -1] - x[-1], axis=-1), batch_trajectory_cost(f, future, cvae.dt, ttc)], axis=-1)
        for f in predictors
    ])


def run_forecast_travel_distances(cvae: CvaeModel, biaser: BiaserModel, dataset: Dataset, sigmas: Sequence[float],
                                  seed: int, bins: int = 40, threads: Optional[int] = None,
                                  ttc: TtcParams = TtcParams()) -> pd.DataFrame:
    """Histogram of forecast travel distances with the mean cost per bin.

    Uses the same 16 samples per scene as ``run_forecast_eval``. All
    predictors share bin edges over [0, max distance]; empty bins have a NaN
    mean cost.
    """
    require(bins >= 1, "bins", f"must be at least 1, got {bins}")
    samples = np.stack(parallel_map(
        lambda i: _scene_forecast_samples(cvae, biaser, dataset, i, sigmas, seed, ttc),
        range(len(dataset)), threads,
    ))
    upper = float(samples[..., 0].max()) or 1.0
    frames = []
    for j, sigma in enumerate([None] + list(sigmas)):
        distances, costs = samples[:, j, :, 0].ravel(), samples[:, j, :, 1].ravel()
        frame = travel_distance_histogram(distances, bins, (0.0, upper))
        cost_sums, _ = np.histogram(distances, bins=bins, range=(0.0, upper), weights=costs)
        counts = frame["count"].to_numpy()
        frame["mean_cost"] = np.divide(cost_sums, counts, out=np.full(bins, np.nan), where=counts > 0)
        frame.insert(0, "sigma", "unbiased" if sigma is None else sigma)
        frames.append(frame)
    logger.info("forecast travel distances over %d scenes and %d risk levels", len(dataset), len(sigmas))
    return pd.DataFrame(pd.concat(frames, ignore_index=True), columns=TRAVEL_DISTANCE_COLUMNS)


# ============================================================================
# PLANNING EXPERIMENT
# ============================================================================

@dataclass
class PlanningRow:
    mode: PlanMode
    sigma: float
    k: int
    ttc_mean: float
    ttc_ci: float
    track_mean: float
    track_ci: float
    n_episodes: int


@dataclass
class PlanningReport:
    rows: List[PlanningRow]
    speed_scale: float = 1.0
    per_episode: Dict[Tuple[str, float, int], np.ndarray] = field(default_factory=dict)  # (mode, sigma, K) -> (E, 2)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"mode": r.mode.value, "sigma": r.sigma, "K": r.k, "ttc_mean": r.ttc_mean, "ttc_ci": r.ttc_ci,
              "track_mean": r.track_mean, "track_ci": r.track_ci, "n_episodes": r.n_episodes} for r in self.rows],
            columns=["mode", "sigma", "K", "ttc_mean", "ttc_ci", "track_mean", "track_ci", "n_episodes"],
        )

    def row(self, mode: PlanMode, sigma: float, k: int) -> PlanningRow:
        for r in self.rows:
            if r.mode is mode and r.sigma == sigma and r.k == k:
                return r
        raise KeyError((mode.value, sigma, k))


def planning_conditions(config: ExperimentConfig, biaser_available: bool = True) -> List[Tuple[PlanMode, float, int]]:
    """Risk-neutral unbiased (sigma 0), then risk-sensitive unbiased and risk-neutral biased per sigma."""
    conditions = [(PlanMode.RISK_NEUTRAL_UNBIASED, 0.0, k) for k in config.planning_ks]
    for sigma in config.planning_sigmas:
        for k in config.planning_ks:
            conditions.append((PlanMode.RISK_SENSITIVE_UNBIASED, sigma, k))
            if biaser_available:
                conditions.append((PlanMode.RISK_NEUTRAL_BIASED, sigma, k))
    return conditions


def run_episode(cvae: CvaeModel, biaser: Optional[BiaserModel], scenes: Dataset, episode: int,
                conditions: Sequence[Tuple[PlanMode, float, int]], cem: CemConfig, seed: int,
                ttc: TtcParams) -> np.ndarray:
    """Ground-truth TTC cost and tracking cost of the executed plan per condition, shape (C, 2).

    Every condition of an episode reuses the same random stream.
    """
    scene = scenes.scene(episode)
    steps = len(scene.y)
    rows = []
    for mode, sigma, k in conditions:
        rng = scene_rng(seed, "episode", episode)
        spec = plan_spec_for(mode, sigma, scene.robot_past, steps, scene.y.dt, cem)
        result = cem_optimize(
            np.zeros(steps), spec, dataclasses.replace(cem, n_pred_samples=k),
            predictor_for(mode, sigma, cvae, biaser), scene.x.positions, scene.robot_past, rng, ttc,
        )
        rows.append([trajectory_ttc_cost(scene.y, result.trajectory, ttc), result.tracking_term])
    return np.array(rows)


def run_planning_experiment(cvae: CvaeModel, biaser: Optional[BiaserModel], sim: SimConfig,
                            config: ExperimentConfig, cem: CemConfig, seed: int, shifted: bool = False,
                            episodes: Optional[int] = None, threads: Optional[int] = None,
                            ttc: TtcParams = TtcParams()) -> PlanningReport:
    """Plan every episode under every condition and score the executed plans.

    With ``shifted`` the pedestrians of the test episodes walk at
    ``config.shift_scale`` times their nominal speed.
    """
    n = episodes or config.episodes
    scene_config = shift_distribution(sim, config.shift_scale) if shifted else sim
    scenes = generate_dataset(n, scene_config, seed=child_seed(scene_rng(seed, "planning-scenes")), threads=threads)
    conditions = planning_conditions(config, biaser is not None)
    logger.info("planning %d episodes x %d conditions (speed scale %.2f)", n, len(conditions), scene_config.speed_scale)
    per_episode = np.stack(parallel_map(
        lambda e: run_episode(cvae, biaser, scenes, e, conditions, cem, seed, ttc), range(n), threads,
    ))
    rows, raw = [], {}
    for c, (mode, sigma, k) in enumerate(conditions):
        ttc_values, track_values = per_episode[:, c, 0], per_episode[:, c, 1]
        rows.append(PlanningRow(
            mode=mode, sigma=sigma, k=k,
            ttc_mean=float(ttc_values.mean()), ttc_ci=ci_half_width(ttc_values),
            track_mean=float(track_values.mean()), track_ci=ci_half_width(track_values),
            n_episodes=n,
        ))
        raw[(mode.value, sigma, k)] = per_episode[:, c]
    return PlanningReport(rows=rows, speed_scale=scene_config.speed_scale, per_episode=raw)


def run_timing(cvae: CvaeModel, biaser: Optional[BiaserModel], sim: SimConfig, cem: CemConfig, ks: Sequence[int],
               seed: int, repeats: int = 3, sigma: float = 0.95, ttc: TtcParams = TtcParams()) -> pd.DataFrame:
    """Median planner wall-clock per K for each predictor, with the R^2 of a linear fit in K."""
    scene = generate_dataset(1, sim, seed=seed).scene(0)
    steps = len(scene.y)
    modes = [PlanMode.RISK_SENSITIVE_UNBIASED] + ([PlanMode.RISK_NEUTRAL_BIASED] if biaser is not None else [])
    rows = []
    for mode in modes:
        spec = plan_spec_for(mode, sigma, scene.robot_past, steps, scene.y.dt, cem)
        predictor = predictor_for(mode, sigma, cvae, biaser)
        seconds = []
        for k in ks:
            samples = []
            for r in range(repeats):
                rng = scene_rng(seed, "timing", r)
                start = time.perf_counter()
                cem_optimize(np.zeros(steps), spec, dataclasses.replace(cem, n_pred_samples=k), predictor,
                             scene.x.positions, scene.robot_past, rng, ttc)
                samples.append(time.perf_counter() - start)
            seconds.append(float(np.median(samples)))
        fit_r2 = float(stats.linregress(np.asarray(ks, dtype=float), seconds).rvalue ** 2) if len(ks) > 2 else float("nan")
        for k, s in zip(ks, seconds):
            rows.append({"mode": mode.value, "K": k, "seconds": s, "fit_r2": fit_r2})
        logger.info("timing %s: %s s (linear fit R^2 %.3f)", mode.value, ", ".join(f"{s:.3f}" for s in seconds), fit_r2)
    return pd.DataFrame(rows, columns=["mode", "K", "seconds", "fit_r2"])


# ============================================================================
# REPORTS
# ============================================================================

@dataclass
class Report:
    """Named tables plus the configuration and seed that produced them."""
    name: str
    tables: Dict[str, pd.DataFrame]
    config: Dict
    seed: int


def config_hash(config: Dict) -> str:
    """Git-style blob SHA-1 of the canonical JSON encoding of ``config``."""
    data = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def emit_report(report: Report, store: ArtifactStore) -> List[str]:
    """Write one CSV per table and ``{name}_manifest.json``; returns the written paths."""
    tables = {name: frame for name, frame in report.tables.items() if not frame.empty}
    if not tables:
        raise UsageError(f"report {report.name!r} has no rows; nothing written")
    written = [str(store.write_table(name, frame)) for name, frame in sorted(tables.items())]
    manifest = {
        "report": report.name,
        "seed": report.seed,
        "config_hash": config_hash(report.config),
        "config": report.config,
        "tables": [f"{name}.csv" for name in sorted(tables)],
    }
    written.append(str(store.write_json(f"{report.name}_manifest", manifest)))
    return written


# ============================================================================
# SERVICE - experiment suites over the artifacts of one run
# ============================================================================

# suites whose tables depend only on config and seed (timing reads the wall clock)
REPRODUCIBLE_SUITES = ("forecast", "risk", "planning")


class ExperimentRunner:
    """Runs the suites against the models and datasets held by an ArtifactStore."""

    def __init__(self, store: ArtifactStore, sim: SimConfig, experiments: ExperimentConfig, cem: CemConfig,
                 ttc: TtcParams, seed: int, config_dict: Dict, threads: Optional[int] = None):
        self.store = store
        self.sim = sim
        self.experiments = experiments
        self.cem = cem
        self.ttc = ttc
        self.seed = seed
        self.config_dict = config_dict
        self.threads = threads

    def _models(self, need_biaser: bool = True) -> Tuple[CvaeModel, Optional[BiaserModel]]:
        cvae = self.store.load_cvae()
        if not need_biaser:
            return cvae, None
        return cvae, self.store.load_biaser(cvae)

    def _validation(self) -> Dataset:
        dataset = self.store.load_dataset("val")
        return dataset.subset(slice(0, min(len(dataset), self.experiments.n_val)))

    def _emit(self, name: str, tables: Dict[str, pd.DataFrame]) -> List[str]:
        return emit_report(Report(name=name, tables=tables, config=self.config_dict, seed=self.seed), self.store)

    def forecast_eval(self) -> List[str]:
        cvae, biaser = self._models()
        validation = self._validation()
        rows = run_forecast_eval(cvae, biaser, validation, self.experiments.eval_sigmas, self.seed,
                                 self.experiments.ref_samples, self.threads, self.ttc)
        distances = run_forecast_travel_distances(cvae, biaser, validation, self.experiments.eval_sigmas,
                                                  self.seed, threads=self.threads, ttc=self.ttc)
        return self._emit("forecast", {"forecast_eval": forecast_table(rows), "forecast_travel_distance": distances})

    def risk_curves(self, sigmas: Optional[Sequence[float]] = None, ks: Optional[Sequence[int]] = None) -> List[str]:
        cvae, biaser = self._models()
        frame = run_risk_curves(cvae, biaser, self._validation(), sigmas or self.experiments.risk_curve_sigmas,
                                ks or self.experiments.risk_curve_ks, self.experiments.ref_samples, self.seed,
                                self.threads, self.ttc)
        return self._emit("risk", {"risk_curves": frame})

    def planning(self, episodes: Optional[int] = None) -> List[str]:
        cvae, biaser = self._models()
        tables = {}
        nominal = run_planning_experiment(cvae, biaser, self.sim, self.experiments, self.cem, self.seed,
                                          shifted=False, episodes=episodes, threads=self.threads, ttc=self.ttc)
        tables["planning"] = nominal.to_frame()
        if self.experiments.include_shift:
            shifted = run_planning_experiment(cvae, biaser, self.sim, self.experiments, self.cem, self.seed,
                                              shifted=True, episodes=episodes, threads=self.threads, ttc=self.ttc)
            tables["planning_shifted"] = shifted.to_frame()
        return self._emit("planning", tables)

    def timing(self) -> List[str]:
        cvae, biaser = self._models()
        frame = run_timing(cvae, biaser, self.sim, self.cem, self.experiments.timing_ks, self.seed,
                           self.experiments.timing_repeats, ttc=self.ttc)
        return self._emit("timing", {"timing": frame})

    def run_suite(self, suite: str, episodes: Optional[int] = None) -> List[str]:
        suites = {
            "forecast": self.forecast_eval,
            "risk": self.risk_curves,
            "planning": lambda: self.planning(episodes),
            "timing": self.timing,
        }
        if suite == "all":
            return [path for name in REPRODUCIBLE_SUITES for path in suites[name]()]
        if suite not in suites:
            raise UsageError(f"unknown suite {suite!r}; expected one of {', '.join(sorted(suites))}, all")
        return suites[suite]()
