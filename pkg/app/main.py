"""Command-line surface: run, sweep, ablation, theory, report."""

import argparse
import dataclasses
import logging
import os
import sys
from typing import List, Optional

from config import Config
from errors import ChurnLabError, ConfigurationError
from models.experiment import ExperimentFile, SweepGrid, TheoryConfig, load_experiment_file
from services.churn_metrics import select_best
from services.experiment_service import ExperimentService
from services.report_service import FORMATS, ReportService, write_rate_csv
from services.theory import (linear_k_schedule, make_problem, minimax_k_schedule, rate_experiment,
                             uniform_k_range)

logger = logging.getLogger(__name__)

DEFAULT_FORMATS = ['csv', 'table', 'jsonl']


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='churnlab', description='Prediction churn experiments')
    subparsers = parser.add_subparsers(dest='command', required=True)

    def add_common(sub, needs_config=True):
        sub.add_argument('--config', required=needs_config, help='experiment file (INI)')
        sub.add_argument('--seed', type=int, default=None, help='override the base seed')
        sub.add_argument('--out', default=None, help='output directory')
        sub.add_argument('--workers', type=int, default=None, help='parallel worker count')
        sub.add_argument('--format', action='append', choices=FORMATS, dest='formats',
                         help='report format, repeatable (default: csv, table, jsonl)')

    add_common(subparsers.add_parser('run', help='repeated-seed runs of one method'))
    sweep = subparsers.add_parser('sweep', help='grid sweep ([sweep] section or the default grid)')
    add_common(sweep)
    sweep.add_argument('--churn-metric', choices=('churn', 'churn_correct'), default='churn',
                       help='churn measure behind the Pareto flag')
    add_common(subparsers.add_parser('ablation', help='one-at-a-time k-NN label smoothing ablations'))
    add_common(subparsers.add_parser('theory', help='k-NN label rate experiment and bounds'), needs_config=False)

    report = subparsers.add_parser('report', help='re-render reports from a runs.jsonl file')
    report.add_argument('runs', help='runs.jsonl written by run/sweep/ablation')
    report.add_argument('--out', default=None, help='output directory (default: next to the runs file)')
    report.add_argument('--format', action='append', choices=FORMATS, dest='formats')
    report.add_argument('--churn-metric', choices=('churn', 'churn_correct'), default='churn')
    return parser


def _load(args) -> ExperimentFile:
    loaded = load_experiment_file(args.config)
    if args.command != 'theory' and loaded.experiment is None:
        raise ConfigurationError(f"{args.config} has no [method] section")
    if args.seed is not None and loaded.experiment is not None:
        loaded.experiment = dataclasses.replace(loaded.experiment, base_seed=args.seed)
    return loaded


def _out_dir(args, name: str) -> str:
    return args.out or os.path.join(Config.RESULTS_FOLDER, name)


def _workers(args) -> int:
    return args.workers if args.workers is not None else Config.DEFAULT_WORKERS


def cmd_run(args) -> int:
    experiment = _load(args).experiment
    out_dir = _out_dir(args, experiment.name)
    service = ExperimentService(workers=_workers(args), out_dir=out_dir)
    result = service.run_setting(experiment)

    reports = ReportService()
    formats = [fmt for fmt in (args.formats or DEFAULT_FORMATS) if fmt != 'jsonl']
    reports.write_report([result], out_dir, formats, title=experiment.name)
    print(reports.render_table([result], title=experiment.name))
    return 0


def cmd_sweep(args) -> int:
    loaded = _load(args)
    experiment = loaded.experiment
    grid = loaded.sweep or SweepGrid.default_for(experiment.method.method)
    out_dir = _out_dir(args, experiment.name)
    outcome = ExperimentService(workers=_workers(args), out_dir=out_dir).sweep(experiment, grid)
    if not outcome.results:
        raise ConfigurationError(f"Every one of the {len(outcome.failures)} grid points failed")

    reports = ReportService(churn_metric=args.churn_metric)
    formats = [fmt for fmt in (args.formats or DEFAULT_FORMATS) if fmt != 'jsonl']
    reports.write_report(outcome.results, out_dir, formats, title=experiment.name)
    print(reports.render_table(outcome.results, title=experiment.name))

    best_params, best = select_best(outcome.reports())
    print(f"Selected: {best_params} accuracy {best.accuracy_mean:.2f}, churn {best.churn_mean:.2f}")
    for point, message in outcome.failures:
        print(f"Failed: {point}: {message}")
    return 0


def cmd_ablation(args) -> int:
    experiment = _load(args).experiment
    out_dir = _out_dir(args, f"{experiment.name}_ablation")
    outcomes = ExperimentService(workers=_workers(args), out_dir=out_dir).run_ablation(experiment)

    reports = ReportService()
    results = [result for _, outcome in outcomes for result in outcome.results]
    if not results:
        raise ConfigurationError("Every ablation point failed")
    formats = [fmt for fmt in (args.formats or DEFAULT_FORMATS) if fmt != 'jsonl']
    reports.write_report(results, out_dir, formats, title=f"{experiment.name} ablations")
    for label, outcome in outcomes:
        if outcome.results:
            print(reports.render_table(outcome.results, title=label))
    return 0


def cmd_theory(args) -> int:
    theory = TheoryConfig()
    if args.config:
        theory = _load(args).theory or theory
    if args.seed is not None:
        theory = dataclasses.replace(theory, seed=args.seed)

    problem = make_problem(theory.eta, theory.dim)
    if theory.schedule == 'minimax':
        schedule = minimax_k_schedule(problem.alpha, problem.dimension)
    else:
        schedule = linear_k_schedule(theory.beta)
    result = rate_experiment(problem, schedule, theory.n_grid, theory.trials, theory.seed, delta=theory.delta,
                             grid_resolution=theory.grid_resolution, workers=_workers(args))

    out_dir = _out_dir(args, f"theory_{problem.name}_{theory.schedule}")
    os.makedirs(out_dir, exist_ok=True)
    write_rate_csv(result, os.path.join(out_dir, 'rate.csv'))

    print(f"{problem.name}, {theory.schedule} schedule, target {result.compare_to}, {result.trials} trials")
    print(result.to_frame().assign(k=result.k_values).to_string(index=False))
    for n, k in zip(result.sample_sizes, result.k_values):
        low, high = uniform_k_range(n, problem.dimension, problem.omega, problem.p_x0, problem.r0, theory.delta)
        if not low <= k <= high:
            print(f"  n={n}: k={k} outside the admissible range [{low:.0f}, {high:.0f}]")
    print(f"Fitted log-log slope: {result.slope:.3f}")
    return 0


def cmd_report(args) -> int:
    out_dir = args.out or os.path.dirname(os.path.abspath(args.runs))
    reports = ReportService(churn_metric=args.churn_metric)
    reports.rerender(args.runs, out_dir, args.formats or ['csv', 'table'])
    return 0


COMMANDS = {
    'run': cmd_run,
    'sweep': cmd_sweep,
    'ablation': cmd_ablation,
    'theory': cmd_theory,
    'report': cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ChurnLabError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
