"""Command line front end: ``gtb train | evaluate | replay | onestep | elasticity | analyze | ttest``.

Exit codes: 0 success, 1 failed replay check, 2 invalid input, 3 training abort.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import click
import torch

from gtb import analysis, fiscal, onestep, stats
from gtb.episode_log import find_logs, replay_log
from gtb.metrics import WelfareObjective
from gtb.rl.config import PROFILES, ConfigError
from gtb.rl.env import PlannerKind
from gtb.rl.policy import NonFiniteOutput
from gtb.rl.ppo import NonFiniteLoss
from gtb.rl.train import CheckpointError, Trainer, csv_text, load_checkpoint
from gtb.scenarios import ScenarioError, load_scenario

EXIT_REPLAY_FAILED = 1
EXIT_INVALID = 2
EXIT_ABORT = 3

PLANNERS = [k.value for k in PlannerKind]
OBJECTIVES = [o.value for o in WelfareObjective]


def fail(message: str, code: int = EXIT_INVALID):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def input_hash(**inputs) -> str:
    blob = json.dumps(inputs, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_csv(path: Path, rows, fields, schema: str, config_hash: str, seed) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(rows, fields, schema, config_hash, seed))


def write_run_info(out: Path, command: str, started: dt.datetime, **extra) -> None:
    """Timestamps live here so the CSVs themselves stay byte-identical across reruns."""
    info = {"command": command, "started": started.isoformat(),
            "finished": dt.datetime.now(dt.timezone.utc).isoformat(), **extra}
    out.mkdir(parents=True, exist_ok=True)
    (out / "run-info.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")


def read_csv_rows(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key.strip()] = tuple(value) if isinstance(value, list) else value
    return out


def parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        fail(f"not a comma-separated list of numbers: {text!r}")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Gather-Trade-Build economy and tax-policy experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)


seed_option = click.option("--seed", type=int, default=0, envvar="GTB_SEED", show_default=True,
                           help="Random seed (env GTB_SEED).")


# --------------------------------------------------------------------------
# training and evaluation
# --------------------------------------------------------------------------


@main.command()
@click.option("--scenario", default="open-quadrant-4-desk", show_default=True,
              help="Bundled scenario name or path to a .map file.")
@click.option("--planner", type=click.Choice(PLANNERS), default="free", show_default=True)
@click.option("--objective", type=click.Choice(OBJECTIVES), default="utilitarian", show_default=True)
@seed_option
@click.option("--steps", type=int, default=None, help="Step budget (default: the profile's total).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default="desk", show_default=True)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config field.")
@click.option("--init-checkpoint", type=click.Path(dir_okay=False, exists=True),
              help="Continue from this checkpoint (e.g. branch phase two off a shared phase one).")
def train(scenario, planner, objective, seed, steps, out, profile, overrides, init_checkpoint):
    """Train agents (and a learned planner) and write checkpoints, CSVs and episode logs."""
    started = dt.datetime.now(dt.timezone.utc)
    try:
        scen = load_scenario(scenario)
        cfg = PROFILES[profile](scen.n_agents).replace(**parse_overrides(overrides))
        trainer = Trainer(cfg, scen, planner, objective, seed, out)
        if init_checkpoint:
            trainer.load_checkpoint(init_checkpoint)
    except (ScenarioError, ConfigError, CheckpointError, TypeError) as exc:
        fail(str(exc))
    try:
        result = trainer.train(steps)
    except (NonFiniteLoss, NonFiniteOutput) as exc:
        fail(f"training aborted: {exc}", EXIT_ABORT)
    write_run_info(Path(out), "train", started, seed=seed, config_hash=trainer.config_hash,
                   steps=result.steps, stop_reason=result.stop_reason)
    click.echo(f"trained {result.steps} steps ({result.stop_reason}); config {trainer.config_hash}")


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--episodes", type=int, default=100, show_default=True)
@seed_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--planner", type=click.Choice(PLANNERS), default=None,
              help="Planner to evaluate under (default: the checkpoint's).")
@click.option("--log-every", type=int, default=25, show_default=True,
              help="Log every n-th episode of replica 0; 0 disables logs.")
def evaluate(checkpoint, episodes, seed, out, planner, log_every):
    """Roll out frozen policies and write per-episode metrics to eval.csv."""
    from gtb.rl.evaluate import evaluate as run_eval

    started = dt.datetime.now(dt.timezone.utc)
    try:
        res = run_eval(checkpoint, episodes, seed, out, planner=planner, log_every=log_every)
    except (CheckpointError, ValueError) as exc:
        fail(str(exc))
    write_run_info(Path(out), "evaluate", started, seed=seed, checkpoint=str(checkpoint))
    click.echo(f"{len(res.episodes)} episodes: productivity {res.mean('productivity'):.2f} "
               f"equality {res.mean('equality'):.4f} swf {res.mean('swf'):.2f}")


@main.command()
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True))
def replay(paths):
    """Re-simulate episode logs and verify every logged state hash."""
    logs = []
    for p in paths:
        logs.extend(find_logs(p) if Path(p).is_dir() else [Path(p)])
    if not logs:
        fail("no episode logs found")
    bad = 0
    for path in logs:
        rep = replay_log(path)
        status = "ok" if rep.ok else f"MISMATCH at t={rep.first_mismatch}"
        click.echo(f"{path}: {rep.steps} steps {status}")
        bad += not rep.ok
    if bad:
        fail(f"{bad} of {len(logs)} logs failed replay", EXIT_REPLAY_FAILED)


# --------------------------------------------------------------------------
# one-step economy
# --------------------------------------------------------------------------


def onestep_schedule(kind: str, cfg, skills, objective, e: float, iterations: int, seed: int):
    if kind == "free":
        return fiscal.free_market()
    if kind == "us-federal":
        return fiscal.us_federal_2018()
    if kind == "saez":
        return onestep.saez_schedule(cfg, e, skills)
    return onestep.learn_planner_bandit(cfg, skills, objective, iterations=iterations, seed=seed).schedule


@main.command("onestep")
@click.option("--planner-only", type=click.Choice(PLANNERS), default=None,
              help="Run a single planner instead of all four.")
@click.option("--e", "elasticity", type=float, default=None,
              help="Saez elasticity (default: the economy's implied 1/(delta-1)).")
@click.option("--objective", type=click.Choice(OBJECTIVES), default="utilitarian", show_default=True)
@click.option("--agents", type=int, default=100, show_default=True)
@click.option("--iterations", type=int, default=600, show_default=True, help="Learned-planner iterations.")
@seed_option
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Write welfare.csv and schedules.csv.")
def onestep_cmd(planner_only, elasticity, objective, agents, iterations, seed, out):
    """Compare planners in the one-step economy with best-responding agents."""
    cfg = onestep.OneStepConfig(n_agents=agents, seed=seed)
    skills = cfg.skills()
    e = cfg.implied_elasticity if elasticity is None else elasticity
    obj = WelfareObjective(objective)
    kinds = [planner_only] if planner_only else PLANNERS
    welfare_rows, schedule_rows = [], []
    for kind in kinds:
        sched = onestep_schedule(kind, cfg, skills, obj, e, iterations, seed)
        outcome = onestep.run_one_step(cfg, sched, skills, obj)
        welfare_rows.append({"planner": kind, "welfare": outcome.swf,
                             "pretax_total": float(outcome.pretax.sum()),
                             "taxes_total": float(outcome.taxes.sum())})
        for j, rate in enumerate(sched.rates):
            schedule_rows.append({"planner": kind, "bracket": j, "lower": fiscal.BRACKET_CUTOFFS[j], "rate": rate})
    by = {r["planner"]: r["welfare"] for r in welfare_rows}
    for r in welfare_rows:
        click.echo(f"{r['planner']:>11}  welfare {r['welfare']:.4f}")
    for kind in kinds:
        rates = " ".join(f"{x:.3f}" for x in (r["rate"] for r in schedule_rows if r["planner"] == kind))
        click.echo(f"{kind:>11}  rates {rates}")
    if "learned" in by and "saez" in by:
        gap = (by["saez"] - by["learned"]) / abs(by["saez"])
        click.echo(f"learned vs saez welfare gap {100 * gap:.2f}%")
    if out:
        h = input_hash(command="onestep", agents=agents, e=e, objective=objective, iterations=iterations,
                       planners=kinds)
        outp = Path(out)
        write_csv(outp / "welfare.csv", welfare_rows, ("planner", "welfare", "pretax_total", "taxes_total"),
                  "gtb.onestep.welfare/1", h, seed)
        write_csv(outp / "schedules.csv", schedule_rows, ("planner", "bracket", "lower", "rate"),
                  "gtb.onestep.schedules/1", h, seed)
        write_run_info(outp, "onestep", dt.datetime.now(dt.timezone.utc), seed=seed)


# --------------------------------------------------------------------------
# elasticity
# --------------------------------------------------------------------------


def gtb_sweep(checkpoint, rates, episodes, seed, out, adapt_steps):
    """(mean total income, rate) per flat rate, optionally after adapting agents to each rate."""
    from gtb.rl.config import TrainingConfig
    from gtb.rl.evaluate import evaluate as run_eval
    from gtb.scenarios import parse_scenario

    samples = []
    for tau in rates:
        ckpt = checkpoint
        if adapt_steps:
            blob = load_checkpoint(checkpoint)
            cfg = TrainingConfig(**blob["config"])
            adapt_dir = Path(out) / f"adapt-{tau:.2f}"
            trainer = Trainer(cfg, parse_scenario(blob["scenario_map"]), "free", blob["objective"], seed,
                              adapt_dir, log_episodes=False)
            trainer.load_checkpoint(checkpoint)
            for env in trainer.envs:
                env.schedule_override = fiscal.flat_tax(tau)
            trainer.train(trainer.steps + adapt_steps)
            ckpt = adapt_dir / "checkpoint.pt"
        res = run_eval(ckpt, episodes, seed, schedule=fiscal.flat_tax(tau))
        samples.append((res.mean("total_income"), float(tau)))
    return samples


@main.command()
@click.option("--economy", type=click.Choice(["onestep", "gtb"]), default="onestep", show_default=True)
@click.option("--rates", default="0,0.1,0.2,0.3,0.4,0.5,0.6", show_default=True, help="Flat-tax sweep grid.")
@click.option("--grid", "e_grid", default=None, help="Also grid-search the Saez elasticity over these values.")
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), help="Trained agents (gtb economy).")
@click.option("--episodes", type=int, default=8, show_default=True, help="Episodes per point (gtb economy).")
@click.option("--adapt-steps", type=int, default=0, show_default=True,
              help="Continue training at each flat rate before measuring (gtb economy).")
@click.option("--agents", type=int, default=100, show_default=True, help="Agents (one-step economy).")
@seed_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
def elasticity(economy, rates, e_grid, checkpoint, episodes, adapt_steps, agents, seed, out):
    """Flat-tax sweep, OLS elasticity estimate and optional Saez grid search."""
    started = dt.datetime.now(dt.timezone.utc)
    taus = parse_floats(rates)
    grid = parse_floats(e_grid) if e_grid else []
    outp = Path(out)
    if economy == "onestep":
        cfg = onestep.OneStepConfig(n_agents=agents, seed=seed)
        samples = onestep.flat_tax_sweep(cfg, taus)
        grid_fn = lambda e: onestep.welfare(cfg, onestep.saez_schedule(cfg, e))
        h = input_hash(command="elasticity", economy=economy, rates=taus, grid=grid, agents=agents)
    else:
        if checkpoint is None:
            fail("--checkpoint is required for the gtb economy")
        from gtb.rl.evaluate import evaluate as run_eval

        try:
            samples = gtb_sweep(checkpoint, taus, episodes, seed, outp, adapt_steps)
        except (CheckpointError, ValueError) as exc:
            fail(str(exc))
        grid_fn = lambda e: [ep["swf"] for ep in run_eval(checkpoint, episodes, seed, planner="saez",
                                                          saez_elasticity=e).episodes]
        h = input_hash(command="elasticity", economy=economy, rates=taus, grid=grid, episodes=episodes,
                       adapt_steps=adapt_steps, checkpoint=load_checkpoint(checkpoint)["config_hash"])
    try:
        fit = fiscal.estimate_elasticity_ols(samples)
    except fiscal.SingularFit as exc:
        fail(f"singular fit: {exc}")
    except ValueError as exc:
        fail(str(exc))
    rows = [{"rate": tau, "total_income": z} for z, tau in samples]
    write_csv(outp / "sweep.csv", rows, ("rate", "total_income"), "gtb.elasticity.sweep/1", h, seed)
    summary = [{"method": "ols", "elasticity": fit.elasticity, "welfare": float("nan")}]
    click.echo(f"OLS elasticity {fit.elasticity:.4f}")
    if grid:
        gs = fiscal.grid_search_elasticity(grid_fn, grid)
        summary.append({"method": "grid-search", "elasticity": gs.best, "welfare": gs.scores[gs.best][0]})
        write_csv(outp / "grid.csv", [{"e": e, "welfare_mean": m, "welfare_stderr": s}
                                      for e, (m, s) in sorted(gs.scores.items())],
                  ("e", "welfare_mean", "welfare_stderr"), "gtb.elasticity.grid/1", h, seed)
        click.echo(f"grid-search best e {gs.best:g}")
    write_csv(outp / "elasticity.csv", summary, ("method", "elasticity", "welfare"),
              "gtb.elasticity.summary/1", h, seed)
    write_run_info(outp, "elasticity", started, seed=seed)


# --------------------------------------------------------------------------
# analysis and statistics
# --------------------------------------------------------------------------


@main.command()
@click.argument("log_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--no-replay", is_flag=True, help="Skip the replay check on each log.")
def analyze(log_dir, out, no_replay):
    """Bracket histograms, per-agent incomes and transfers, and tax gaming from episode logs."""
    started = dt.datetime.now(dt.timezone.utc)
    try:
        tables, paths = analysis.load_year_tables(log_dir)
    except analysis.EmptyLogDir as exc:
        fail(str(exc))
    h = input_hash(command="analyze", logs=sorted(p.name for p in paths))
    seeds = sorted({str(json.loads(p.open().readline()).get("seed")) for p in paths})
    seed = "+".join(seeds)
    outp = Path(out)
    hist, agents, gaming, balance = [], [], [], []
    for planner in sorted(tables):
        t = tables[planner]
        hist += analysis.bracket_histogram(t)
        agents += analysis.per_agent_summary(t)
        gaming += analysis.gaming_rows(t)
        balance.append({"planner": planner, "max_abs_transfer_sum": analysis.transfers_balance(t)})
    write_csv(outp / "brackets.csv", hist, ("planner", "bracket", "lower", "upper", "count", "frequency"),
              "gtb.analyze.brackets/1", h, seed)
    write_csv(outp / "agents.csv", agents, ("planner", "agent", "build_skill", "mean_income", "mean_transfer"),
              "gtb.analyze.agents/1", h, seed)
    write_csv(outp / "gaming.csv", gaming, ("planner", "episode", "agent", "tax_minus_smoothed"),
              "gtb.analyze.gaming/1", h, seed)
    write_csv(outp / "balance.csv", balance, ("planner", "max_abs_transfer_sum"), "gtb.analyze.balance/1", h, seed)
    failed = 0
    if not no_replay:
        rows = analysis.replay_all(paths)
        failed = sum(not r["ok"] for r in rows)
        write_csv(outp / "replay.csv", rows, ("log", "steps", "ok", "first_mismatch"), "gtb.analyze.replay/1", h, seed)
    write_run_info(outp, "analyze", started, logs=len(paths))
    click.echo(f"analyzed {len(paths)} logs across {len(tables)} planners")
    if failed:
        fail(f"{failed} logs failed replay", EXIT_REPLAY_FAILED)


@main.command()
@click.option("--group", "groups", multiple=True, required=True, metavar="NAME=CSV",
              help="A group of per-seed samples: one row per seed, one column per metric.")
@click.option("--metric", "metrics", multiple=True, help="Metrics to compare (default: all shared numeric columns).")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def ttest(groups, metrics, out):
    """Welch two-sample t-tests between groups of per-seed metrics."""
    data = {}
    for g in groups:
        name, sep, path = g.partition("=")
        if not sep or not Path(path).is_file():
            fail(f"--group needs NAME=existing.csv, got {g!r}")
        rows = read_csv_rows(path)
        cols = {}
        for key in rows[0] if rows else []:
            try:
                cols[key] = [float(r[key]) for r in rows]
            except ValueError:
                continue
        if metrics:
            cols = {k: v for k, v in cols.items() if k in metrics}
        data[name] = cols
    if len(data) < 2:
        fail("need at least two groups")
    try:
        rows = stats.ttest_compare(data)
    except stats.InsufficientSamples as exc:
        fail(str(exc))
    fields = ("metric", "group_a", "group_b", "mean_a", "mean_b", "t", "df", "p", "p_floored")
    for r in rows:
        click.echo(f"{r['metric']:>14} {r['group_a']} vs {r['group_b']}: t={r['t']:.4g} p={r['p']:.3g}"
                   + (" (floored)" if r["p_floored"] else ""))
    if out:
        h = input_hash(command="ttest", groups=sorted(groups), metrics=sorted(metrics))
        write_csv(Path(out), rows, fields, "gtb.ttest/1", h, "none")


if __name__ == "__main__":
    main()
