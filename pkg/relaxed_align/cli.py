"""
Command-line entry point for relaxed-align
Distances between distribution files, single training runs, the desk-scale
accuracy table, the theory suite and the target-error bound audit.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

from relaxed_align.align import Model, TrainingDivergedError, evaluate, train
from relaxed_align.autodiff import CheckpointError
from relaxed_align.config_manager import ConfigError, ConfigManager, ExperimentConfig, VARIANT_NAMES
from relaxed_align.distributions import (
    GaussianMixtureSpec, density_ratio_sup, sample_synthetic, shifted_mixture_spec, total_variation,
)
from relaxed_align.divergences import (
    dual_divergence_discrete, get_generator, optimal_reweighting, primal_divergence, relax,
)
from relaxed_align.experiment_report import AccuracyTableReport, cell_label
from relaxed_align.export_utils import (
    read_distribution_csv, write_json, write_latent_csv, write_metrics_csv,
)
from relaxed_align.theory import (
    LAYOUTS, AnalyticModel, LabelShiftConstruction, audit_bound, label_shift_lower_bound, build_and_check_construction,
    risk_decomposition,
)
from relaxed_align.threading_classes import CellTask, run_cells
from relaxed_align.transport import classical_wasserstein, relaxed_wasserstein_dual, relaxed_wasserstein_primal

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3  # training diverged or a solver failed

RHO_GRID = [round(0.1 * i, 1) for i in range(1, 10)]
STRONG_DUALITY_TOLERANCE = 1e-6


def setup_logging(verbose: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _reweight_base(name: str, generator: str):
    if name == "tv":
        return total_variation
    if name == "wasserstein":
        return classical_wasserstein
    gen = get_generator(generator)
    return lambda p, q: primal_divergence(gen, p, q)


def cmd_distance(args, config: ConfigManager) -> int:
    p = read_distribution_csv(args.pfile)
    q = read_distribution_csv(args.qfile)
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {args.pfile} has {p.dim} coordinates, {args.qfile} has {q.dim}")

    report: Dict = {'family': args.family, 'beta': args.beta, 'ratio_sup': density_ratio_sup(p, q)}
    if args.family == "fdiv":
        gen = relax(get_generator(args.generator), args.beta)
        report['generator'] = args.generator
        report['primal'] = primal_divergence(gen, p, q)
        report['dual'] = dual_divergence_discrete(gen, p, q)
    elif args.family == "wasserstein":
        report['primal'], coupling = relaxed_wasserstein_primal(p, q, args.beta)
        report['dual'], _ = relaxed_wasserstein_dual(p, q, args.beta)
        report['feasibility_violation'] = coupling.feasibility_violation(p.mass, q.mass)
    else:
        value, weights, _ = optimal_reweighting(_reweight_base(args.base, args.generator), p, q, args.beta)
        report['base'] = args.base
        report['primal'] = value
        report['weights'] = weights.weights

    print(f"primal: {report['primal']:.12g}")
    if 'dual' in report:
        report['gap'] = abs(report['primal'] - report['dual'])
        print(f"dual:   {report['dual']:.12g}")
        print(f"gap:    {report['gap']:.3g}")
        if args.family == "wasserstein" and report['gap'] > STRONG_DUALITY_TOLERANCE:
            logger.warning(f"primal and dual disagree by {report['gap']:.3g}")
    if args.json:
        write_json(args.json, report)
    return EXIT_OK


def _mixture_spec(experiment: ExperimentConfig) -> GaussianMixtureSpec:
    if isinstance(experiment.dataset, dict):
        return GaussianMixtureSpec.from_dict(experiment.dataset)
    if isinstance(experiment.dataset, str):
        try:
            return GaussianMixtureSpec.load(Path(experiment.dataset))
        except OSError as e:
            raise ConfigError(f"cannot read dataset spec {experiment.dataset}: {e}") from e
    return shifted_mixture_spec(shift=experiment.shift, count=experiment.count, diag_as_std=experiment.diag_as_std)


def _apply_experiment_flags(args, config: ConfigManager) -> ExperimentConfig:
    config.apply_overrides('experiment', output_dir=args.output, seeds=args.seeds,
                           shift=False if args.no_shift else None)
    experiment = config.get_experiment()
    if args.steps is not None:
        experiment.train['steps'] = args.steps
    return experiment


def cmd_train(args, config: ConfigManager) -> int:
    config.apply_overrides('train', variant=args.variant, beta=args.beta, seed=args.seed, steps=args.steps,
                           lam=args.lam)
    train_config = config.get_train_config()
    experiment = config.get_experiment()
    if args.no_shift:
        experiment.shift = False
    output = Path(args.output or experiment.output_dir) / train_config.cell_name / f"seed{train_config.seed}"

    spec = _mixture_spec(experiment)
    data = sample_synthetic(spec, train_config.seed)
    eval_data = sample_synthetic(spec, train_config.seed + experiment.eval_seed_offset)
    model, metrics = train(train_config, data, eval_data=eval_data)

    result = evaluate(model, eval_data)
    model.save(output / "model.json")
    write_metrics_csv(output / "metrics.csv", metrics.step_rows())
    write_latent_csv(output / "latent.csv", result.latents, result.labels, result.domains)
    write_json(output / "summary.json", metrics.summary())
    config.save(output / "config.json")
    print(f"{train_config.cell_name} seed={train_config.seed}: "
          f"source acc {100 * result.source_accuracy:.1f}%, target acc {100 * result.target_accuracy:.1f}%")
    print(f"checkpoint: {output / 'model.json'}")
    return EXIT_OK


def cmd_table(args, config: ConfigManager) -> int:
    experiment = _apply_experiment_flags(args, config)
    experiment.validate()
    spec = _mixture_spec(experiment)
    output = Path(experiment.output_dir)

    first_seed = experiment.seeds[0]
    tasks = [CellTask(config=experiment.train_config(variant, beta, seed), spec=spec,
                      eval_seed_offset=experiment.eval_seed_offset, keep_metrics=seed == first_seed)
             for variant, beta in experiment.cells for seed in experiment.seeds]
    results = run_cells(tasks, show_progress=not args.quiet)

    for record in results:
        if record['metrics'] is None:
            continue
        stem = f"{cell_label(record['variant'], record['beta'])}_seed{record['seed']}"
        write_metrics_csv(output / "metrics" / f"{stem}.csv", record['metrics'].step_rows())
        evaluation = record['evaluation']
        write_latent_csv(output / "latents" / f"{stem}.csv", evaluation.latents, evaluation.labels,
                         evaluation.domains)

    report = AccuracyTableReport()
    report.set_results(results, dataset_name="synthetic-shift" if experiment.shift else "synthetic-no-shift")
    report.generate_csv_report(output / "accuracy_table.csv")
    report.generate_json_report(output / "accuracy_table.json")
    config.save(output / "config.json")
    print(report.format_table())
    return EXIT_OK


def _audit_data(args, config: ConfigManager, seed: int):
    """Held-out draw of the configured task, offset from the training seed like the evaluation set"""
    experiment = config.get_experiment()
    if args.no_shift:
        experiment.shift = False
    seed = seed + experiment.eval_seed_offset
    return sample_synthetic(_mixture_spec(experiment), seed), seed


def _data_summary(data, seed: int) -> Dict:
    return {'seed': seed, 'source': len(data.source()[1]), 'target': len(data.target()[1])}


def _theory_audit(model, data, config: ConfigManager) -> Dict:
    audit = audit_bound(model, data, config.get_audit_settings())
    decomposition = risk_decomposition(model, data, k=config.get_audit_settings().k)
    return {'audit': audit.to_dict(), 'risk_decomposition': decomposition.to_dict()}


def cmd_theory(args, config: ConfigManager) -> int:
    failures: List[str] = []
    lower_bounds = [{'rho_s': rs, 'rho_t': rt, 'lower_bound': label_shift_lower_bound(rs, rt)}
                    for rs in RHO_GRID for rt in RHO_GRID]

    constructions = []
    for layout in LAYOUTS:
        for rs in RHO_GRID:
            for rt in RHO_GRID:
                _, check = build_and_check_construction(rs, rt, layout=layout, samples=args.samples)
                constructions.append(check.to_dict())
                if not check.passed:
                    failures.append(f"construction {layout} rho_s={rs} rho_t={rt}")
    logger.info(f"{len(constructions) - len(failures)} of {len(constructions)} constructions passed")

    construction = LabelShiftConstruction(0.5, 0.9, layout="overlapping")
    # the construction's classes are exact, so only a zero label-noise budget is audited
    exact = replace(config.get_audit_settings(), delta2_sweep=[0.0])
    construction_audit = audit_bound(AnalyticModel(construction), construction.dataset(args.points), exact)
    if not construction_audit.consistent or construction_audit.bound_value != 0.0:
        failures.append(f"bound audit on the construction model gave {construction_audit.bound_value}")

    report = {'lower_bounds': lower_bounds, 'constructions': constructions,
              'construction_audit': construction_audit.to_dict()}
    if args.checkpoint:
        model = Model.load(args.checkpoint)
        data, seed = _audit_data(args, config, args.seed)
        report['checkpoint'] = _theory_audit(model, data, config)
        report['checkpoint']['data'] = _data_summary(data, seed)
    report['failures'] = failures

    print(f"{'rho_s':>6} {'rho_t':>6} {'gap':>7} {'min beta':>9}")
    for row in (r for r in constructions if r['layout'] == LAYOUTS[0]):
        print(f"{row['rho_s']:>6g} {row['rho_t']:>6g} {abs(row['rho_s'] - row['rho_t']):>7.2f} "
              f"{row['min_beta']:>9.4g}")
    print(f"construction audit bound: {construction_audit.bound_value:g} "
          f"(measured target error {construction_audit.measured_target_error:g})")
    if 'checkpoint' in report:
        audit = report['checkpoint']['audit']
        print(f"checkpoint audit bound: {audit['bound_value']} vs measured {audit['measured_target_error']:.4f}")
    for failure in failures:
        print(f"FAILED: {failure}")
    if args.json:
        write_json(args.json, report)
    return EXIT_CHECK_FAILED if failures else EXIT_OK


def cmd_audit(args, config: ConfigManager) -> int:
    config.apply_overrides('audit', k=args.k, seed=args.seed)
    model = Model.load(args.checkpoint)
    data, seed = _audit_data(args, config, config.get_audit_settings().seed)
    report = _theory_audit(model, data, config)
    report['data'] = _data_summary(data, seed)

    audit, decomposition = report['audit'], report['risk_decomposition']
    bound = "n/a" if audit['bound_value'] is None else f"{audit['bound_value']:.4f}"
    print(f"model: {model.variant} beta={model.beta:g}")
    print(f"bound (indicative): {bound}  measured target error: {audit['measured_target_error']:.4f}  "
          f"slack: {audit['slack']:.4f}  consistent: {audit['consistent']}")
    print(f"L >= {audit['lipschitz']:.3f}  beta={audit['beta']:g}  delta1={audit['delta1']:.3f}  "
          f"delta2={audit['delta2']:.3f}  Delta={audit['delta']:.4f}  delta3={audit['delta3']:.3f}")
    print(f"decomposition: source {decomposition['source_error']:.4f} + label mismatch "
          f"{decomposition['label_mismatch']:.4f} + shift {decomposition['distribution_shift']:.4f} "
          f"= {decomposition['total']:.4f}")
    if args.json:
        write_json(args.json, report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relaxed-align",
                                     description="Asymmetrically relaxed distribution alignment")
    parser.add_argument('-v', '--verbose', action='store_true', help="debug logging")
    parser.add_argument('-c', '--config', type=Path, help="JSON or YAML config file")
    sub = parser.add_subparsers(dest='command', required=True)

    distance = sub.add_parser('distance', help="relaxed distance between two distribution files")
    distance.add_argument('pfile', type=Path, help="target distribution CSV (coords..., mass)")
    distance.add_argument('qfile', type=Path, help="source distribution CSV")
    distance.add_argument('--family', choices=("fdiv", "wasserstein", "reweight"), default="fdiv")
    distance.add_argument('--beta', type=float, default=0.0)
    distance.add_argument('--generator', choices=("gan", "kl"), default="gan")
    distance.add_argument('--base', choices=("tv", "fdiv", "wasserstein"), default="tv",
                          help="base distance of the reweighting family")
    distance.add_argument('--json', type=Path)
    distance.set_defaults(handler=cmd_distance)

    train_cmd = sub.add_parser('train', help="train one variant and write a checkpoint")
    train_cmd.add_argument('--variant', choices=VARIANT_NAMES)
    train_cmd.add_argument('--beta', type=float)
    train_cmd.add_argument('--seed', type=int)
    train_cmd.add_argument('--steps', type=int)
    train_cmd.add_argument('--lam', type=float)
    train_cmd.add_argument('--no-shift', action='store_true')
    train_cmd.add_argument('--output', type=Path)
    train_cmd.set_defaults(handler=cmd_train)

    table_cmd = sub.add_parser('table1', aliases=['table'],
                               help="target accuracy per (variant, beta) cell over several seeds")
    table_cmd.add_argument('--output', type=str)
    table_cmd.add_argument('--seeds', type=int, nargs='+')
    table_cmd.add_argument('--steps', type=int)
    table_cmd.add_argument('--no-shift', action='store_true')
    table_cmd.add_argument('--quiet', action='store_true', help="no progress bar")
    table_cmd.set_defaults(handler=cmd_table)

    theory = sub.add_parser('theory', help="analytic checks of the label-shift results")
    theory.add_argument('--samples', type=int, default=100000, help="sampling cross-check size")
    theory.add_argument('--points', type=int, default=1000, help="per-domain points for the construction audit")
    theory.add_argument('--checkpoint', type=Path)
    theory.add_argument('--seed', type=int, default=0)
    theory.add_argument('--no-shift', action='store_true')
    theory.add_argument('--json', type=Path)
    theory.set_defaults(handler=cmd_theory)

    audit = sub.add_parser('audit', help="audit the target-error bound of a trained model")
    audit.add_argument('--checkpoint', type=Path, required=True)
    audit.add_argument('--seed', type=int)
    audit.add_argument('--k', type=int)
    audit.add_argument('--no-shift', action='store_true')
    audit.add_argument('--json', type=Path)
    audit.set_defaults(handler=cmd_audit)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    setup_logging(args.verbose)

    try:
        config = ConfigManager(args.config)
        return args.handler(args, config)
    except (ConfigError, CheckpointError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        logger.error(f"invalid input: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, RuntimeError) as e:
        logger.error(f"run failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
