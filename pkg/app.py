# Command-line application for the risk-biased forecasting and planning pipeline
# Wires data generation, training, evaluation, planning and experiment suites,
# all driven by one YAML config file and a seed.

from __future__ import annotations

import dataclasses
import logging
import math
import sys
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import click
import numpy as np
import pandas as pd

from cem_planner import PlanMode, cem_optimize, plan_spec_for, plan_trajectory_rows, predictor_for, robot_state_from_past
from cvae import encode_prior, train_cvae
from didactic_sim import generate_dataset, travel_distance_histogram
from errors import RiskBiasError, UsageError
from metrics_experiments import ExperimentRunner
from risk_biaser import LatentGrid, latent_cost_map, train_biaser
from settings import RunConfig, dump_config, parse_config
from store import ArtifactStore
from streams import child_seed, scene_rng
from ttc_cost import AgentState, GridSpec, cost_map

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
SUITES = ("forecast", "risk", "planning", "timing", "all")


# ============================================================================
# RUNTIME CONTEXT
# ============================================================================

@dataclass
class Runtime:
    """Resolved configuration and artifact store shared by the subcommands."""
    config: RunConfig
    store: ArtifactStore
    threads: Optional[int]

    @property
    def seed(self) -> int:
        return self.config.seed

    def experiments(self) -> ExperimentRunner:
        c = self.config
        return ExperimentRunner(self.store, c.sim, c.experiments, c.planner, c.ttc, c.seed, c.to_dict(), self.threads)


def configure_logging(verbose: bool):
    """Send log records to stderr so stdout stays machine-readable."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_riskbias", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._riskbias = True  # type: ignore[attr-defined]
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def parse_int_list(ctx, param, value: Optional[str]) -> Optional[Tuple[int, ...]]:
    """click callback for comma-separated sample counts such as ``1,2,4``."""
    if value is None:
        return None
    try:
        ks = tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")
    if not ks or any(k < 1 for k in ks):
        raise click.BadParameter("sample counts must be positive integers")
    return ks


def _echo_paths(paths: Sequence) -> None:
    for path in paths:
        click.echo(str(path))


# ============================================================================
# COMMAND GROUP
# ============================================================================

@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML run configuration (defaults apply when omitted).")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the config seed.")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker pool size (default: all cores).")
@click.option("--output-dir", default=None, help="Override paths.output_dir.")
@click.option("--verbose", "-v", is_flag=True, help="DEBUG logging.")
@click.pass_context
def cli(ctx, config_path, seed, threads, output_dir, verbose):
    """Risk-biased trajectory forecasting and planning."""
    configure_logging(verbose)
    config = parse_config(config_path).with_seed(seed)
    root = output_dir or config.paths.output_dir
    ctx.obj = Runtime(config=config, store=ArtifactStore(root), threads=threads)
    logger.debug("output directory %s, seed %d", root, config.seed)


@cli.command("gen-data")
@click.option("--n-train", type=click.IntRange(min=1), default=None, help="Training scenes (default: experiments.n_train).")
@click.option("--n-val", type=click.IntRange(min=1), default=None, help="Validation scenes (default: experiments.n_val).")
@click.pass_obj
def gen_data(rt: Runtime, n_train, n_val):
    """Generate the training and validation datasets."""
    c = rt.config
    written = [rt.store.write_text("config.yaml", dump_config(c))]
    for name, n in (("train", n_train or c.experiments.n_train), ("val", n_val or c.experiments.n_val)):
        dataset = generate_dataset(n, c.sim, seed=child_seed(scene_rng(c.seed, "dataset", name)), threads=rt.threads)
        written.append(rt.store.save_dataset(dataset, name))
        written.append(rt.store.write_table(f"travel_distance_{name}", travel_distance_histogram(dataset.travel_distances())))
    _echo_paths(written)


@cli.command("train-cvae")
@click.pass_obj
def train_cvae_cmd(rt: Runtime):
    """Train the forecaster on the training dataset."""
    model, curve = train_cvae(rt.store.load_dataset("train"), rt.config.cvae, rt.seed)
    _echo_paths([rt.store.save_cvae(model), rt.store.write_table("cvae_training", curve)])


@cli.command("train-biaser")
@click.pass_obj
def train_biaser_cmd(rt: Runtime):
    """Train the biased encoder against the frozen forecaster."""
    cvae = rt.store.load_cvae()
    biaser, curve = train_biaser(cvae, rt.store.load_dataset("train"), rt.config.biaser, rt.seed, rt.config.ttc)
    _echo_paths([rt.store.save_biaser(biaser), rt.store.write_table("biaser_training", curve)])


@cli.command("eval-forecast")
@click.pass_obj
def eval_forecast(rt: Runtime):
    """Forecasting and risk-estimation table on the validation set."""
    _echo_paths(rt.experiments().forecast_eval())


@cli.command("eval-risk")
@click.option("--sigma", "sigmas", type=click.FloatRange(0.0, 1.0), multiple=True,
              help="Risk level (repeatable; default: experiments.risk_curve_sigmas).")
@click.option("--k", "ks", callback=parse_int_list, default=None, help="Comma-separated sample counts, e.g. 1,2,4,8,16.")
@click.pass_obj
def eval_risk(rt: Runtime, sigmas, ks):
    """Risk-estimation error against the number of samples."""
    _echo_paths(rt.experiments().risk_curves(sigmas or None, ks))


@cli.command("plan")
@click.option("--scene", "scene_index", type=click.IntRange(min=0), default=0, help="Validation scene index.")
@click.option("--mode", type=click.Choice([m.value for m in PlanMode]), default=PlanMode.RISK_NEUTRAL_BIASED.value)
@click.option("--sigma", type=click.FloatRange(0.0, 1.0), default=0.95)
@click.option("--k", type=click.IntRange(min=1), default=None, help="Forecast samples (default: planner.n_pred_samples).")
@click.pass_obj
def plan(rt: Runtime, scene_index, mode, sigma, k):
    """Plan one validation episode and write the executed trajectory."""
    c = rt.config
    mode = PlanMode(mode)
    dataset = rt.store.load_dataset("val")
    if scene_index >= len(dataset):
        raise UsageError(f"scene {scene_index} out of range for {len(dataset)} validation scenes")
    scene = dataset.scene(scene_index)
    cvae = rt.store.load_cvae()
    biaser = rt.store.load_biaser(cvae) if mode is PlanMode.RISK_NEUTRAL_BIASED else None
    steps, dt = len(scene.y), scene.y.dt
    planner = c.planner if k is None else dataclasses.replace(c.planner, n_pred_samples=k)
    spec = plan_spec_for(mode, sigma, scene.robot_past, steps, dt, planner)
    result = cem_optimize(np.zeros(steps), spec, planner, predictor_for(mode, sigma, cvae, biaser),
                          scene.x.positions, scene.robot_past, scene_rng(rt.seed, "plan", scene_index), c.ttc)
    speed = robot_state_from_past(scene.robot_past, dt).velocity[0]
    frame = pd.DataFrame(plan_trajectory_rows(result, speed), columns=["t", "x", "y", "vx", "vy", "ax"])
    summary = {
        "mode": mode.value,
        "sigma": sigma,
        "K": planner.n_pred_samples,
        "scene": scene_index,
        "objective": result.objective,
        "risk_term": result.risk_term,
        "tracking_term": result.tracking_term,
    }
    _echo_paths([rt.store.write_table("plan", frame), rt.store.write_json("plan", summary)])


@cli.command("experiment")
@click.option("--suite", type=click.Choice(SUITES), default="all",
              help="'all' runs forecast, risk and planning; timing reads the wall clock and runs only on request.")
@click.option("--episodes", type=click.IntRange(min=1), default=None, help="Planning episodes (default: experiments.episodes).")
@click.pass_obj
def experiment(rt: Runtime, suite, episodes):
    """Run an experiment suite and emit its report."""
    _echo_paths(rt.experiments().run_suite(suite, episodes))


@cli.command("cost-map")
@click.option("--probe-speed", type=click.FloatRange(min=0.0), default=1.0, help="Probe agent speed, m/s.")
@click.option("--probe-heading", type=float, default=math.pi / 2, help="Probe agent heading, rad.")
@click.option("--resolution", type=float, default=0.5, help="Grid spacing, m.")
@click.option("--x-range", nargs=2, type=float, default=(-5.0, 60.0))
@click.option("--y-range", nargs=2, type=float, default=(-10.0, 10.0))
@click.pass_obj
def cost_map_cmd(rt: Runtime, probe_speed, probe_heading, resolution, x_range, y_range):
    """TTC cost of a probe agent over a grid around the robot at the origin."""
    robot = AgentState(position=(0.0, 0.0), velocity=(rt.config.sim.robot_speed, 0.0))
    grid = GridSpec(x_range[0], x_range[1], y_range[0], y_range[1], resolution)
    result = cost_map(robot, probe_speed, probe_heading, grid, rt.config.ttc)
    _echo_paths([rt.store.write_table("cost_map", result.to_frame())])


@cli.command("latent-map")
@click.option("--scene", "scene_index", type=click.IntRange(min=0), default=0, help="Validation scene index.")
@click.option("--sigma", "sigmas", type=click.FloatRange(0.0, 1.0), multiple=True,
              help="Risk levels of the biased ellipses (default: experiments.eval_sigmas).")
@click.option("--span", type=click.FloatRange(min=0.0, min_open=True), default=3.0, help="Half-width in prior standard deviations.")
@click.option("--size", type=click.IntRange(min=1), default=64, help="Cells per latent axis.")
@click.pass_obj
def latent_map(rt: Runtime, scene_index, sigmas, span, size):
    """Cost over the latent plane of one scene with biased-encoder ellipses."""
    dataset = rt.store.load_dataset("val")
    if scene_index >= len(dataset):
        raise UsageError(f"scene {scene_index} out of range for {len(dataset)} validation scenes")
    cvae = rt.store.load_cvae()
    biaser = rt.store.load_biaser(cvae)
    x, y_robot = dataset.x[scene_index], dataset.y_robot[scene_index]
    grid = LatentGrid.around(encode_prior(cvae, x), span, size)
    result = latent_cost_map(cvae, x, y_robot, grid, biaser, sigmas or rt.config.experiments.eval_sigmas, rt.config.ttc)
    _echo_paths([rt.store.write_table("latent_map", result.to_frame()),
                 rt.store.write_json("latent_ellipses", result.ellipses)])


# ============================================================================
# ENTRY POINT
# ============================================================================

def dispatch(argv: Sequence[str]) -> int:
    """Run one subcommand; 0 on success, 2 on usage errors, 1 otherwise.

    Failures print a single ``error: <ErrorClass>: <message>`` line on stderr.
    """
    try:
        result = cli.main(args=list(argv), prog_name="riskbias", standalone_mode=False)
    except click.exceptions.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("error: Aborted", err=True)
        return 1
    except UsageError as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return 2
    except (RiskBiasError, OSError) as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return 1
    return result if isinstance(result, int) else 0


def main(argv: Optional[List[str]] = None):
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
