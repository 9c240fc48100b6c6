import functools
import json
import os
from dataclasses import replace

import click
import numpy as np
import pandas as pd

from config.settings import load_fuzzy_terms, load_run_config
from services.base_models import EXIT_IO_ERROR, ConfigurationError, FhmError, SchemaError, UsageError
from services.data import (
    generate_synthetic, ground_truth_weights, load_csv, resolve_topology, write_csv, write_topology,
)
from services.evalmetrics import FoldScore, aggregate, direct_edge_accuracy, render_table, try_transitive_chain_accuracy
from services.fcm_reference import ACTIVATIONS, DEFAULT_MAX_ITERS, DEFAULT_TOL, ClassicFcm
from services.inverse import InverseProblem, fuzzy_query, load_query, solve, write_solution
from services.logger_config import app_logger as logger
from services.logger_config import log_event
from services.model import load_checkpoint, save_checkpoint
from services.training import cross_validate, write_report

# largest |predicted - target| invert accepts silently
OFF_TARGET_TOL = 0.02


def handle_errors(func):
    """Print service errors as `error: <module>: <message>` and exit with the error's code."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return func(*args, **kwargs)
        except FhmError as e:
            logger.error(f"{ctx.command.name} failed: {e.module}: {e}")
            click.echo(f"error: {e.module}: {e}", err=True)
            ctx.exit(e.exit_code)
        except OSError as e:
            logger.error(f"{ctx.command.name} failed with an I/O error: {e}")
            click.echo(f"error: io: {e}", err=True)
            ctx.exit(EXIT_IO_ERROR)
    return wrapper


def _run_config(ctx, **overrides):
    options = dict(ctx.obj["overrides"])
    options.update(overrides)
    return load_run_config(ctx.obj["config_path"], options)


def _artifact_dir(run) -> str:
    path = run.artifact_dir()
    os.makedirs(path, exist_ok=True)
    return path


def _topology(run):
    spec = resolve_topology(run.topology)
    if not spec.is_connected():
        logger.warning(f"Topology '{spec.name}' is not weakly connected")
    return spec.with_generator(noise=run.noise, n_samples=run.samples, seed=run.seed)


def _dataset(run, spec):
    if run.data:
        return load_csv(run.data, spec)
    return generate_synthetic(spec, folds=run.train.folds)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON file overriding defaults.json")
@click.option("--seed", type=int, help="Seed for every random draw")
@click.option("--topology", help="Built-in topology name or path to a topology JSON file")
@click.option("--data", type=click.Path(dir_okay=False), help="CSV dataset; synthetic data is generated when omitted")
@click.option("--out", "out_dir", help="Root directory for run artifacts")
@click.option("--threads", type=click.IntRange(min=1), help="Folds trained in parallel")
@click.pass_context
def cli(ctx, config_path, seed, topology, data, out_dir, threads):
    """Glass-box FCM imitation: generate, train, eval, invert and fcm-sim."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = {"seed": seed, "topology": topology, "data": data,
                            "out_dir": out_dir, "threads": threads}


@cli.command()
@click.option("--samples", type=click.IntRange(min=1), help="Number of synthetic rows")
@click.option("--noise", type=click.FloatRange(min=0.0), help="Std of the Gaussian observation noise")
@click.pass_context
@handle_errors
def generate(ctx, samples, noise):
    """Write a synthetic dataset and its topology."""
    run = _run_config(ctx, samples=samples, noise=noise)
    spec = _topology(run)
    dataset = generate_synthetic(spec)
    out = _artifact_dir(run)
    write_csv(dataset, os.path.join(out, "dataset.csv"))
    write_topology(spec, os.path.join(out, "topology.json"))
    log_event(logger, "generate", f"topology={spec.name} rows={dataset.n_rows} out={out}")
    click.echo(f"n={spec.n} N={dataset.n_rows} density={spec.density:.2f}")
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--epochs", type=click.IntRange(min=0))
@click.option("--folds", type=click.IntRange(min=2))
@click.option("--tmax", "t_max", type=click.IntRange(min=0), help="Propagation steps per forward pass")
@click.option("--samples", type=click.IntRange(min=1))
@click.option("--noise", type=click.FloatRange(min=0.0))
@click.pass_context
@handle_errors
def train(ctx, epochs, folds, t_max, samples, noise):
    """Cross-validate the network on a dataset and write checkpoints plus reports."""
    run = _run_config(ctx, epochs=epochs, folds=folds, t_max=t_max, samples=samples, noise=noise)
    spec = _topology(run)
    dataset = _dataset(run, spec)
    graph = spec.to_graph()
    cv = cross_validate(dataset, graph, run.train)

    out = _artifact_dir(run)
    for fold in cv.folds:
        save_checkpoint(os.path.join(out, f"fold-{fold.fold}.json"), fold.params, graph, run.train.model_for(graph),
                        run.seed, extra={"fold": fold.fold, "topology": spec.name})
    with open(os.path.join(out, "best_fold.json"), "w") as f:
        json.dump({"best_fold": cv.report.best_fold, "checkpoint": f"fold-{cv.report.best_fold}.json"},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    experiment = spec.experiment or spec.name
    write_report(os.path.join(out, "report.json"), cv, experiment, spec.n)
    table = render_table([(experiment, spec.n, cv.report)])
    with open(os.path.join(out, "report.txt"), "w") as f:
        f.write(table)
    log_event(logger, "train", f"topology={spec.name} out={out} runtime={cv.report.runtime:.1f}s")
    click.echo(table, nl=False)
    click.echo(f"wrote {out}")


@cli.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@handle_errors
def evaluate(ctx, checkpoint):
    """Score a saved W_fcm against the checkpoint's graph, or against --topology when given."""
    params, graph, _, meta = load_checkpoint(checkpoint)
    truth = graph
    experiment = meta.get("topology", "checkpoint")
    if ctx.obj["overrides"].get("topology"):
        spec = resolve_topology(ctx.obj["overrides"]["topology"])
        if list(spec.nodes) != list(graph.node_names):
            raise SchemaError(f"topology '{spec.name}' nodes do not match the checkpoint's nodes")
        truth = spec.to_graph()
        experiment = spec.experiment or spec.name
    learned = params.w_fcm * graph.mask
    score = FoldScore(int(meta.get("fold", 0)), direct_edge_accuracy(learned, truth.adjacency),
                      try_transitive_chain_accuracy(learned, truth.adjacency))
    click.echo(render_table([(experiment, truth.n, aggregate([score]))]), nl=False)


def _query_targets(query, graph):
    if "targets" in query:
        return {graph.node_index(node): float(value) for node, value in query["targets"].items()}
    if "fuzzy" in query:
        memberships = {**load_fuzzy_terms(), **query.get("memberships", {})}
        return fuzzy_query(query["fuzzy"], memberships, graph)
    raise UsageError("query needs a 'targets' or a 'fuzzy' section")


def _resolve_checkpoint(checkpoint, run_dir):
    if checkpoint:
        return checkpoint
    if not run_dir:
        raise UsageError("invert needs --checkpoint or --run-dir")
    pointer = os.path.join(run_dir, "best_fold.json")
    try:
        with open(pointer) as f:
            best = json.load(f)
        return os.path.join(run_dir, best["checkpoint"])
    except FileNotFoundError:
        raise UsageError(f"{run_dir} has no best_fold.json; run train first") from None
    except (json.JSONDecodeError, KeyError, TypeError):
        raise UsageError(f"{pointer} does not name a checkpoint") from None


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False),
              help="Checkpoint to invert; defaults to the best fold of --run-dir")
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False), help="Artifact directory written by train")
@click.option("--query", "query_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--lambda-soft", "lambda_soft", type=click.FloatRange(min=0.0), help="Forbidden-flow penalty weight")
@click.option("--steps", type=click.IntRange(min=2), help="Annealing steps")
@click.pass_context
@handle_errors
def invert(ctx, checkpoint, run_dir, query_path, lambda_soft, steps):
    """Find input activations that drive the queried nodes to their targets."""
    run = _run_config(ctx, lambda_soft=lambda_soft, steps=steps)
    checkpoint = _resolve_checkpoint(checkpoint, run_dir)
    params, graph, _, _ = load_checkpoint(checkpoint)
    try:
        query = load_query(query_path)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{query_path} is not valid JSON: {e}") from None
    targets = _query_targets(query, graph)
    flags = {k: v for k, v in {"lambda_soft": lambda_soft, "steps": steps}.items() if v is not None}
    try:
        schedule = replace(run.inverse, **{**query.get("schedule", {}), **flags})
    except TypeError as e:
        raise ConfigurationError(f"invalid schedule in {query_path}: {e}") from None

    solution = solve(InverseProblem.from_graph(params.w_fcm, graph, targets, schedule))
    out = _artifact_dir(run)
    path = os.path.join(out, "solution.json")
    write_solution(path, solution, graph.node_names)
    log_event(logger, "invert", f"checkpoint={checkpoint} targets={len(targets)} out={path}")
    for node in sorted(targets):
        click.echo(f"{graph.node_names[node]}: target={targets[node]:.4f} "
                   f"predicted={solution.predicted[node]:.4f}")
        gap = abs(solution.predicted[node] - targets[node])
        if gap > OFF_TARGET_TOL:
            hint = "; try late_phase=sigmoid" if schedule.late_phase == "linear" else ""
            logger.warning(f"invert missed {graph.node_names[node]} by {gap:.4f} (late_phase={schedule.late_phase})")
            click.echo(f"warning: {graph.node_names[node]} is {gap:.4f} off target{hint}", err=True)
    click.echo(f"wrote {path}")


@cli.command(name="fcm-sim")
@click.option("--start", help="Comma-separated start activations; 0.5 everywhere when omitted")
@click.option("--activation", type=click.Choice(sorted(ACTIVATIONS)), default="sigmoid", show_default=True)
@click.option("--max-iters", type=click.IntRange(min=1), default=DEFAULT_MAX_ITERS, show_default=True)
@click.option("--tol", type=click.FloatRange(min=0.0, min_open=True), default=DEFAULT_TOL, show_default=True)
@click.option("--allow-self-loops", is_flag=True)
@click.option("--clamp-roots", is_flag=True, help="Hold nodes without incoming edges at their start value")
@click.pass_context
@handle_errors
def fcm_sim(ctx, start, activation, max_iters, tol, allow_self_loops, clamp_roots):
    """Run the classical FCM of a topology and write its trajectory."""
    run = _run_config(ctx)
    spec = resolve_topology(run.topology)
    if start:
        try:
            state = np.array([float(v) for v in start.split(",")])
        except ValueError:
            raise UsageError(f"--start must be comma-separated numbers, got '{start}'") from None
    else:
        state = np.full(spec.n, 0.5)
    if state.shape != (spec.n,):
        raise UsageError(f"--start has {state.size} values for {spec.n} nodes")

    weights = ground_truth_weights(spec, np.random.default_rng(run.seed))
    fcm = ClassicFcm(weights, activation=activation, max_iters=max_iters, tol=tol,
                     allow_self_loops=allow_self_loops,
                     clamped=frozenset(spec.roots()) if clamp_roots else frozenset())
    states, converged = fcm.trajectory(state)
    frame = pd.DataFrame(np.array(states), columns=spec.nodes)
    frame.insert(0, "step", range(len(states)))
    out = _artifact_dir(run)
    path = os.path.join(out, "trajectory.csv")
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    log_event(logger, "fcm-sim", f"topology={spec.name} steps={len(states) - 1} converged={converged}")
    click.echo(f"steps={len(states) - 1} converged={str(converged).lower()}")
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    cli()
