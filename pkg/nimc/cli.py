"""Command-line entry point: every subcommand prints one JSON run report on stdout and writes its data files
(text matrices, CSV) under --out.
"""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from nimc.activations import moment_table, quadrature_drift, sigma_moments
from nimc.core import (ActivationKind, FactorPair, InsufficientDataError, InvalidArgumentError, NimcError, RngSeed,
                       gen_gaussian_features, gen_truth, load_factor_pair, load_features, load_observations,
                       random_factor_pair, sample_observations, save_factor_pair, save_features, save_matrix,
                       save_observations)
from nimc.hessian import (assemble_empirical_hessian, assemble_relu_fixed_hessian, bound_report, condition_numbers,
                          population_hessian_mc, spectrum, theoretical_lambda_min_bound)
from nimc.model import ReluFixedRow, loss
from nimc.optimizer import (TrainConfig, contraction_rate, parse_resample, relative_test_error, train)
from nimc.pipelines import (cluster_pipeline, gen_blob_task, gen_pu_task, pu_train_eval, recovery_grid, rmse_eval,
                            spearman_monotone)
from nimc.tensor_init import ESTIMATORS, TensorInitConfig, align_columns, tensor_initialize

logger = logging.getLogger(__name__)

# file names inside a data directory
X_FILE = 'X.txt'
Y_FILE = 'Y.txt'
U_FILE = 'U.txt'
V_FILE = 'V.txt'
OBS_FILE = 'observations.csv'
REPORT_FILE = 'report.json'

REPORT_SCHEMA = {
    'command': str,
    'config': dict,
    'seed': int,
    'wall_time': float,
    'outputs': dict,
    'metrics': dict,
}


@dataclass
class RunReport:
    command: str
    config: dict
    seed: int
    wall_time: float = 0.0
    outputs: Dict[str, str] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True)


def validate_report(report: dict) -> None:
    """Checks a parsed report against REPORT_SCHEMA.
    :param report: the decoded JSON object.
    :return: (None.) Raises InvalidArgumentError on a missing key or a wrongly typed value.
    """
    if not isinstance(report, dict):
        raise InvalidArgumentError('report must be a JSON object')
    for key, expected in REPORT_SCHEMA.items():
        if key not in report:
            raise InvalidArgumentError(f'report is missing {key!r}')
        value = report[key]
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            continue
        if not isinstance(value, expected) or isinstance(value, bool):
            raise InvalidArgumentError(f'report field {key!r} should be {expected.__name__}')
    extra = set(report) - set(REPORT_SCHEMA)
    if extra:
        raise InvalidArgumentError(f'report has unknown fields {sorted(extra)}')


def _jsonable(value):
    # numpy scalars and arrays to plain JSON; non-finite floats become null
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, (ActivationKind, Path)):
        return str(value.value if isinstance(value, ActivationKind) else value)
    return value


def configure_logging() -> None:
    name = os.environ.get('NIMC_LOG', 'WARNING').upper()
    level = logging.getLevelName(name)
    logging.basicConfig(stream=sys.stderr, level=level if isinstance(level, int) else logging.WARNING,
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s')
    if not isinstance(level, int):
        logger.warning('unknown NIMC_LOG level %r, using WARNING', name)


# ---------------------------------------------------------------------------------------------------------------
# shared inputs


def _int_list(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected a comma-separated list of integers, got {text!r}') from None


def _out_dir(args) -> Optional[Path]:
    if args.out is None:
        return None
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _synthetic(args, rng: RngSeed):
    truth = gen_truth(args.d1, args.d2, args.k, args.activation, rng.child(0), kappa=args.kappa,
                      orthonormal=args.orthonormal)
    fs = gen_gaussian_features(args.n1, args.n2, args.d1, args.d2, rng.child(1))
    obs = sample_observations(fs, truth, args.m, rng.child(2))
    return truth, fs, obs


def _load_data(args, rng: RngSeed):
    """Features, observations and (when present) the ground truth from --data, or a fresh synthetic instance."""
    if args.data is None:
        return _synthetic(args, rng)
    data = Path(args.data)
    fs = load_features(data / X_FILE, data / Y_FILE)
    obs = load_observations(data / OBS_FILE, shape=(fs.n1, fs.n2))
    truth = None
    if (data / U_FILE).exists() and (data / V_FILE).exists():
        truth = load_factor_pair(data / U_FILE, data / V_FILE, args.activation)
    return truth, fs, obs


def _perturbed(truth: FactorPair, radius: float, rng: RngSeed) -> FactorPair:
    # a point at Frobenius distance radius from the truth in a random direction
    generator = rng.generator()
    dU = generator.standard_normal(truth.U.shape)
    dV = generator.standard_normal(truth.V.shape)
    scale = radius / np.sqrt(np.sum(dU ** 2) + np.sum(dV ** 2))
    return truth.with_factors(truth.U + scale * dU, truth.V + scale * dV)


# ---------------------------------------------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args, rng, report: RunReport) -> None:
    truth, fs, obs = _synthetic(args, rng)
    out = _out_dir(args)
    if out is not None:
        save_features(fs, out / X_FILE, out / Y_FILE)
        save_factor_pair(truth, out / U_FILE, out / V_FILE)
        save_observations(obs, out / OBS_FILE)
        report.outputs.update({name: str(out / name) for name in (X_FILE, Y_FILE, U_FILE, V_FILE, OBS_FILE)})
    report.metrics.update({'n_obs': len(obs), 'distinct_cells': len(obs.distinct_cells()),
                           'observation_digest': obs.multiset_digest(),
                           'condition': condition_numbers(truth).as_dict()})


def cmd_train(args, rng, report: RunReport) -> None:
    truth, fs, obs = _load_data(args, rng)
    kind = ActivationKind.parse(args.activation)
    if args.init == 'random':
        fp0 = random_factor_pair(fs.d1, fs.d2, args.k, kind, rng.child(3))
    elif args.init == 'near':
        if truth is None:
            raise InvalidArgumentError('--init near needs the ground truth')
        fp0 = _perturbed(truth, args.init_radius, rng.child(3))
    else:
        fp0 = tensor_initialize(fs, obs, args.k, kind, rng.child(3)).factor_pair

    cfg = TrainConfig(step_size=args.eta, max_iters=args.max_iters, resample=parse_resample(args.resample),
                      tolerance=args.tolerance, n_test=args.n_test, seed=args.seed)
    fp, trace = train(fp0, truth, fs, obs, cfg, rng.child(4))

    out = _out_dir(args)
    if out is not None:
        trace.write_csv(out / 'trace.csv')
        save_factor_pair(fp, out / 'U_hat.txt', out / 'V_hat.txt')
        report.outputs.update({'trace': str(out / 'trace.csv'), 'U_hat': str(out / 'U_hat.txt'),
                               'V_hat': str(out / 'V_hat.txt')})
    report.metrics.update({'iterations': trace.last.iter, 'loss': trace.last.loss, 'step_size': trace.step_size,
                           'grad_norm': trace.last.grad_norm})
    if truth is not None:
        report.metrics['test_error'] = relative_test_error(fp, truth, cfg.n_test, rng.child(5))
        report.metrics['param_error'] = trace.last.param_error
        try:
            report.metrics['contraction_rate'] = contraction_rate(trace)
        except InsufficientDataError:
            report.metrics['contraction_rate'] = None


def cmd_hessian_probe(args, rng, report: RunReport) -> None:
    truth, fs, obs = _load_data(args, rng)
    if truth is None:
        raise InvalidArgumentError('hessian-probe needs the ground truth')
    point = truth if args.perturb == 0 else _perturbed(truth, args.perturb, rng.child(3))
    if args.fixed_row:
        hessian = assemble_relu_fixed_hessian(ReluFixedRow.from_factor_pair(point), truth, fs, obs)
    else:
        hessian = assemble_empirical_hessian(point, truth, fs, obs)
    bound = None
    if truth.activation is not ActivationKind.RELU or args.fixed_row:
        bound = theoretical_lambda_min_bound(truth)
    probe = spectrum(hessian, bound)

    report.metrics.update(probe.as_dict())
    report.metrics.update({'size': hessian.size, 'n_obs': hessian.n_obs, 'at_ground_truth': hessian.at_ground_truth,
                           'asymmetry': hessian.asymmetry, 'loss': loss(point, fs, obs).value,
                           'condition': condition_numbers(truth).as_dict()})
    if bound is not None:
        report.metrics['bounds'] = bound_report(truth)


def cmd_population_hessian(args, rng, report: RunReport) -> None:
    truth = gen_truth(args.d1, args.d2, args.k, args.activation, rng.child(0), kappa=args.kappa,
                      orthonormal=args.orthonormal)
    hessian = population_hessian_mc(truth, args.n_mc, rng.child(1))
    bound = theoretical_lambda_min_bound(truth) if truth.activation is not ActivationKind.RELU else None
    probe = spectrum(hessian, bound)
    report.metrics.update(probe.as_dict())
    report.metrics.update({'n_mc': args.n_mc, 'spectral_slack': hessian.spectral_slack,
                           'condition': condition_numbers(truth).as_dict()})
    out = _out_dir(args)
    if out is not None:
        save_matrix(hessian.H, out / 'H.txt')
        report.outputs['H'] = str(out / 'H.txt')


def cmd_tensor_init(args, rng, report: RunReport) -> None:
    truth, fs, obs = _load_data(args, rng)
    config = TensorInitConfig(restarts=args.restarts, iterations=args.iterations, sigma_max=args.sigma_max,
                              estimator=args.estimator)
    result = tensor_initialize(fs, obs, args.k, args.activation, rng.child(3), config)
    out = _out_dir(args)
    if out is not None:
        save_factor_pair(result.factor_pair, out / 'U0.txt', out / 'V0.txt')
        report.outputs.update({'U0': str(out / 'U0.txt'), 'V0': str(out / 'V0.txt')})
    report.metrics.update({'u_weights': result.u_side.weights, 'u_norms': result.u_side.norms,
                           'v_weights': result.v_side.weights, 'v_norms': result.v_side.norms,
                           'loss': loss(result.factor_pair, fs, obs).value})
    if truth is not None:
        report.metrics['u_min_cosine'] = align_columns(result.factor_pair.U, truth.U).min_cosine
        report.metrics['v_min_cosine'] = align_columns(result.factor_pair.V, truth.V).min_cosine
        report.metrics['test_error'] = relative_test_error(result.factor_pair, truth, args.n_test, rng.child(5))


def cmd_recovery_grid(args, rng, report: RunReport) -> None:
    cfg = TrainConfig(step_size=args.eta, max_iters=args.max_iters, tolerance=args.tolerance, n_test=args.n_test,
                      seed=args.seed)
    result = recovery_grid(args.activation, args.d, args.k, args.n_values, args.m_values, args.trials, cfg, rng,
                           n_jobs=args.threads)
    out = _out_dir(args)
    if out is not None:
        result.write_csv(out / 'grid.csv')
        report.outputs['grid'] = str(out / 'grid.csv')
    report.metrics.update({'success_rate': result.success_rate, 'spearman': spearman_monotone(result)})


def cmd_cluster(args, rng, report: RunReport) -> None:
    task = gen_blob_task(args.n, args.d, args.clusters, None if args.full else args.m, rng.child(0),
                         cluster_std=args.cluster_std)
    cfg = TrainConfig(step_size=args.eta, max_iters=args.max_iters, seed=args.seed)
    result = cluster_pipeline(task, cfg, args.k_latent, rng.child(1), kind=args.activation, rff_q=args.rff_q,
                              rff_sigma=args.rff_sigma)
    out = _out_dir(args)
    if out is not None:
        np.savetxt(out / 'labels.csv', np.column_stack([task.labels, result.labels]), fmt='%d', delimiter=',',
                   header='truth,predicted', comments='')
        report.outputs['labels'] = str(out / 'labels.csv')
    report.metrics.update({'error': result.error, 'n_obs': len(task.omega)})


def cmd_rmse_eval(args, rng, report: RunReport) -> None:
    fp = load_factor_pair(args.u, args.v, args.activation)
    fs = load_features(args.x, args.y)
    obs = load_observations(args.obs, shape=(fs.n1, fs.n2))
    report.metrics['rmse'] = rmse_eval(fp, fs, obs)


def cmd_pu_eval(args, rng, report: RunReport) -> None:
    task = gen_pu_task(args.n1, args.n2, args.d1, args.d2, args.k, args.density, rng.child(0), kind=args.activation)
    cfg = TrainConfig(step_size=args.eta, max_iters=args.max_iters, seed=args.seed)
    result = pu_train_eval(task, args.k, args.beta, cfg, args.r_values, rng.child(1))
    out = _out_dir(args)
    if out is not None:
        result.curve_frame().to_csv(out / 'rank_curve.csv', index=False, float_format='%.17g')
        result.pr_frame().to_csv(out / 'precision_recall.csv', index=False, float_format='%.17g')
        report.outputs.update({'rank_curve': str(out / 'rank_curve.csv'),
                               'precision_recall': str(out / 'precision_recall.csv')})
    report.metrics.update({'r_values': result.r_values, 'cumulative_rank_curve': result.cumulative_rank_curve,
                           'n_positives': len(task.positives)})


def cmd_moments(args, rng, report: RunReport) -> None:
    table = moment_table(args.activation, args.nodes, allow_linear=True)
    report.metrics.update(table.as_dict())
    report.metrics['rounded_table'] = moment_table(args.activation, args.nodes, allow_linear=True,
                                                   convention='rounded').as_dict()
    if args.activation not in ('relu', 'linear'):
        report.metrics['quadrature_drift'] = quadrature_drift(args.activation, args.nodes)
    if args.sigma is not None:
        report.metrics['sigma_moments'] = [asdict(moment) for moment in
                                           sigma_moments(args.activation, args.sigma, args.nodes)]


# ---------------------------------------------------------------------------------------------------------------
# parser


def _common(parser: argparse.ArgumentParser, activation: str = 'sigmoid', allow_linear: bool = False) -> None:
    # Linear only has a moment table; training with it is unsupported
    kinds = [kind.value for kind in ActivationKind if allow_linear or kind is not ActivationKind.LINEAR]
    parser.add_argument('--activation', choices=kinds, default=activation)
    parser.add_argument('--seed', type=int, default=0, help='controls all randomness')
    parser.add_argument('--out', default=None, help='output directory')
    parser.add_argument('--threads', type=int, default=1, help='worker count for parallel trials')
    parser.add_argument('--config', default=None, help='flat JSON object of option defaults')


def _synthetic_options(parser: argparse.ArgumentParser, data: bool = True) -> None:
    parser.add_argument('--d1', type=int, default=10)
    parser.add_argument('--d2', type=int, default=10)
    parser.add_argument('--k', type=int, default=5)
    parser.add_argument('--n1', type=int, default=100)
    parser.add_argument('--n2', type=int, default=100)
    parser.add_argument('--m', type=int, default=2000)
    parser.add_argument('--kappa', type=float, default=None, help='spread the singular values over [1, kappa]')
    parser.add_argument('--orthonormal', action='store_true', help='ground truth with orthonormal columns')
    if data:
        parser.add_argument('--data', default=None, help='directory written by gen-synthetic')


def _training_options(parser: argparse.ArgumentParser, max_iters: int = 1000) -> None:
    parser.add_argument('--eta', type=float, default=None, help='step size; probed from the Hessian if omitted')
    parser.add_argument('--max-iters', type=int, default=max_iters)
    parser.add_argument('--tolerance', type=float, default=1e-3)
    parser.add_argument('--n-test', type=int, default=100)


COMMANDS = {
    'gen-synthetic': cmd_gen_synthetic,
    'train': cmd_train,
    'hessian-probe': cmd_hessian_probe,
    'population-hessian': cmd_population_hessian,
    'tensor-init': cmd_tensor_init,
    'recovery-grid': cmd_recovery_grid,
    'cluster': cmd_cluster,
    'rmse-eval': cmd_rmse_eval,
    'pu-eval': cmd_pu_eval,
    'moments': cmd_moments,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='nimc', description='Nonlinear inductive matrix completion experiments')
    subparsers = parser.add_subparsers(dest='command', required=True)

    sub = subparsers.add_parser('gen-synthetic', help='write a synthetic instance')
    _common(sub)
    _synthetic_options(sub, data=False)

    sub = subparsers.add_parser('train', help='gradient descent from an initialization')
    _common(sub)
    _synthetic_options(sub)
    _training_options(sub)
    sub.add_argument('--resample', default='none', help="'none' or 'fresh:<m>'")
    sub.add_argument('--init', choices=['random', 'tensor', 'near'], default='random')
    sub.add_argument('--init-radius', type=float, default=0.1, help='distance from the truth for --init near')

    sub = subparsers.add_parser('hessian-probe', help='spectrum of the empirical Hessian')
    _common(sub)
    _synthetic_options(sub)
    sub.add_argument('--fixed-row', action='store_true', help='ReLU fixed-first-row parameterization')
    sub.add_argument('--perturb', type=float, default=0.0, help='distance of the evaluation point from the truth')

    sub = subparsers.add_parser('population-hessian', help='Monte-Carlo population Hessian at the truth')
    _common(sub)
    _synthetic_options(sub, data=False)
    sub.add_argument('--n-mc', type=int, default=200000)

    sub = subparsers.add_parser('tensor-init', help='third-moment tensor initialization')
    _common(sub)
    _synthetic_options(sub)
    sub.add_argument('--restarts', type=int, default=50)
    sub.add_argument('--iterations', type=int, default=100)
    sub.add_argument('--sigma-max', type=float, default=10.0)
    sub.add_argument('--estimator', choices=list(ESTIMATORS), default='regression',
                     help='how the third-moment tensors are estimated')
    sub.add_argument('--n-test', type=int, default=100)

    sub = subparsers.add_parser('recovery-grid', help='success rate over (n, m)')
    _common(sub)
    _training_options(sub, max_iters=20000)
    sub.add_argument('--d', type=int, default=10)
    sub.add_argument('--k', type=int, default=5)
    sub.add_argument('--n-values', type=_int_list, default=[10 * i for i in range(1, 11)])
    sub.add_argument('--m-values', type=_int_list, default=[100 * i for i in range(1, 21)])
    sub.add_argument('--trials', type=int, default=5)

    sub = subparsers.add_parser('cluster', help='semi-supervised clustering on Gaussian blobs')
    _common(sub, activation='relu')
    sub.add_argument('--eta', type=float, default=None)
    sub.add_argument('--max-iters', type=int, default=500)
    sub.add_argument('--n', type=int, default=150)
    sub.add_argument('--d', type=int, default=5)
    sub.add_argument('--clusters', type=int, default=3)
    sub.add_argument('--m', type=int, default=3000)
    sub.add_argument('--full', action='store_true', help='observe every similarity entry')
    sub.add_argument('--k-latent', type=int, default=5)
    sub.add_argument('--cluster-std', type=float, default=1.0)
    sub.add_argument('--rff-q', type=int, default=None)
    sub.add_argument('--rff-sigma', type=float, default=1.0)

    sub = subparsers.add_parser('rmse-eval', help='test RMSE of saved parameters')
    _common(sub)
    sub.add_argument('--u', required=True)
    sub.add_argument('--v', required=True)
    sub.add_argument('--x', required=True)
    sub.add_argument('--y', required=True)
    sub.add_argument('--obs', required=True)

    sub = subparsers.add_parser('pu-eval', help='positive-unlabeled training and ranking evaluation')
    _common(sub, activation='relu')
    sub.add_argument('--eta', type=float, default=None)
    sub.add_argument('--max-iters', type=int, default=300)
    sub.add_argument('--n1', type=int, default=100)
    sub.add_argument('--n2', type=int, default=60)
    sub.add_argument('--d1', type=int, default=10)
    sub.add_argument('--d2', type=int, default=10)
    sub.add_argument('--k', type=int, default=5)
    sub.add_argument('--density', type=float, default=0.05)
    sub.add_argument('--beta', type=float, default=0.1)
    sub.add_argument('--r-values', type=_int_list, default=[1, 5, 10, 20, 50, 100])

    sub = subparsers.add_parser('moments', help='activation moment constants')
    _common(sub, allow_linear=True)
    sub.add_argument('--nodes', type=int, default=128)
    sub.add_argument('--sigma', type=float, default=None)
    return parser


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv: Sequence[str]):
    # config values become defaults of the chosen subcommand, so explicit flags still win
    try:
        config = json.loads(Path(args.config).read_text(encoding='utf-8'))
    except (OSError, ValueError) as error:
        raise InvalidArgumentError(f'cannot read config {args.config}: {error}') from None
    if not isinstance(config, dict) or any(isinstance(value, (dict, list)) for value in config.values()):
        raise InvalidArgumentError('config must be a flat JSON object')
    subparser = next(action for action in parser._actions
                     if isinstance(action, argparse._SubParsersAction)).choices[args.command]
    known = {action.dest for action in subparser._actions}
    unknown = set(config) - known
    if unknown:
        raise InvalidArgumentError(f'unknown config keys for {args.command}: {sorted(unknown)}')
    subparser.set_defaults(**config)
    return parser.parse_args(argv)


def main(argv: Sequence[str] = None) -> int:
    """Runs one subcommand.
    :param argv: the arguments, sys.argv[1:] by default.
    :return: 0 on success, 1 on a runtime error, 2 on a usage error.
    """
    configure_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)

    try:
        if args.config is not None:
            try:
                args = _apply_config(parser, args, argv)
            except SystemExit as exit_:
                return int(exit_.code or 0)
        report = RunReport(args.command, {key: value for key, value in vars(args).items() if key != 'command'},
                           args.seed)
        start = time.perf_counter()
        COMMANDS[args.command](args, RngSeed(args.seed), report)
        report.wall_time = time.perf_counter() - start
        text = report.to_json()
        out = getattr(args, 'out', None)
        if out is not None:
            Path(out).mkdir(parents=True, exist_ok=True)
            Path(out, REPORT_FILE).write_text(text + '\n', encoding='utf-8')
        print(text)
    except (NimcError, OSError) as error:
        print(f'nimc: error: {error}', file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
