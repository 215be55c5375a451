import json

import pytest

from nimc.cli import main, validate_report
from nimc.core import InvalidArgumentError

SMALL = ['--d1', '3', '--d2', '3', '--k', '1', '--n1', '12', '--n2', '10', '--m', '40']


def _run(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured


def _report(capsys, argv):
    code, captured = _run(capsys, argv)
    assert code == 0, captured.err
    report = json.loads(captured.out)
    validate_report(report)
    return report


def test_moments_report(capsys):
    report = _report(capsys, ['moments', '--activation', 'sigmoid'])
    assert report['command'] == 'moments'
    assert report['metrics']['rho'] == pytest.approx(0.000658, abs=1e-5)
    assert report['metrics']['quadrature_drift'] < 1e-8


def test_moments_with_scale(capsys):
    report = _report(capsys, ['moments', '--activation', 'tanh', '--sigma', '2.0'])
    assert [moment['q'] for moment in report['metrics']['sigma_moments']] == [0, 1, 2, 3, 4]


def test_usage_errors_exit_with_two(capsys):
    assert _run(capsys, ['moments', '--no-such-flag'])[0] == 2
    assert _run(capsys, [])[0] == 2
    assert _run(capsys, ['train', '--init', 'magic'])[0] == 2


def test_report_is_written(tmp_path, capsys):
    report = _report(capsys, ['moments', '--activation', 'relu', '--out', str(tmp_path)])
    assert json.loads((tmp_path / 'report.json').read_text(encoding='utf-8')) == report


@pytest.mark.parametrize('change', [
    lambda report: report.pop('metrics'),
    lambda report: report.update(extra=1),
    lambda report: report.update(seed='0'),
    lambda report: report.update(seed=True),
    lambda report: report.update(config=[]),
])
def test_validate_report_rejects(change):
    report = {'command': 'train', 'config': {}, 'seed': 0, 'wall_time': 0.5, 'outputs': {}, 'metrics': {}}
    validate_report(report)
    change(report)
    with pytest.raises(InvalidArgumentError):
        validate_report(report)


def test_validate_report_accepts_integer_time():
    validate_report({'command': 'moments', 'config': {}, 'seed': 3, 'wall_time': 0, 'outputs': {}, 'metrics': {}})


def test_train_trace_is_reproducible(tmp_path, capsys):
    argv = ['train', *SMALL, '--eta', '0.2', '--max-iters', '15', '--seed', '4']
    first = _report(capsys, argv + ['--out', str(tmp_path / 'a')])
    second = _report(capsys, argv + ['--out', str(tmp_path / 'b')])
    trace_a = (tmp_path / 'a' / 'trace.csv').read_bytes()
    assert trace_a == (tmp_path / 'b' / 'trace.csv').read_bytes()
    assert trace_a.decode('utf-8').splitlines()[0] == 'iter,loss,param_error,test_error,grad_norm'
    assert first['metrics'] == second['metrics']
    assert (tmp_path / 'a' / 'U_hat.txt').read_bytes() == (tmp_path / 'b' / 'U_hat.txt').read_bytes()


def test_generated_truth_has_zero_rmse(tmp_path, capsys):
    data = tmp_path / 'data'
    report = _report(capsys, ['gen-synthetic', *SMALL, '--seed', '2', '--out', str(data)])
    assert report['metrics']['n_obs'] == 40
    for name in ('X.txt', 'Y.txt', 'U.txt', 'V.txt', 'observations.csv'):
        assert (data / name).exists()
    report = _report(capsys, ['rmse-eval', '--u', str(data / 'U.txt'), '--v', str(data / 'V.txt'),
                              '--x', str(data / 'X.txt'), '--y', str(data / 'Y.txt'),
                              '--obs', str(data / 'observations.csv')])
    assert report['metrics']['rmse'] <= 1e-12


def test_train_from_saved_data(tmp_path, capsys):
    data = tmp_path / 'data'
    _report(capsys, ['gen-synthetic', *SMALL, '--out', str(data)])
    report = _report(capsys, ['train', '--data', str(data), '--k', '1', '--init', 'near', '--init-radius', '0.05',
                              '--eta', '0.2', '--max-iters', '10'])
    assert report['metrics']['param_error'] is not None
    assert report['metrics']['iterations'] <= 10


def test_hessian_probe_at_truth(capsys):
    report = _report(capsys, ['hessian-probe', '--d1', '3', '--d2', '3', '--k', '2', '--n1', '20', '--n2', '20',
                              '--m', '200'])
    metrics = report['metrics']
    assert metrics['at_ground_truth'] is True
    assert metrics['size'] == 12
    assert metrics['lambda_min'] > -1e-12
    assert metrics['lambda_max'] >= metrics['lambda_min']
    assert metrics['theoretical_lower_bound'] > 0


def test_config_defaults_yield_to_flags(tmp_path, capsys):
    config = tmp_path / 'config.json'
    config.write_text(json.dumps({'max_iters': 3, 'eta': 0.2}), encoding='utf-8')
    from_config = _report(capsys, ['train', *SMALL, '--config', str(config)])
    assert from_config['metrics']['iterations'] == 3
    assert from_config['metrics']['step_size'] == 0.2
    overridden = _report(capsys, ['train', *SMALL, '--config', str(config), '--max-iters', '2'])
    assert overridden['metrics']['iterations'] == 2


def test_unknown_config_key_is_a_runtime_error(tmp_path, capsys):
    config = tmp_path / 'config.json'
    config.write_text(json.dumps({'learning_rate': 0.1}), encoding='utf-8')
    code, captured = _run(capsys, ['train', *SMALL, '--config', str(config)])
    assert code == 1
    assert captured.err.splitlines()[-1].startswith('nimc: error:')


def test_tensor_init_rejects_relu(capsys):
    code, captured = _run(capsys, ['train', *SMALL, '--activation', 'relu', '--init', 'tensor'])
    assert code == 1
    assert captured.err.splitlines()[-1].startswith('nimc: error:')
    assert captured.out == ''


def test_recovery_grid_ignores_thread_count(capsys):
    argv = ['recovery-grid', '--d', '2', '--k', '1', '--n-values', '5', '--m-values', '20,40', '--trials', '2',
            '--max-iters', '5', '--eta', '0.5', '--n-test', '20']
    serial = _report(capsys, argv + ['--threads', '1'])
    parallel = _report(capsys, argv + ['--threads', '2'])
    assert serial['metrics']['success_rate'] == parallel['metrics']['success_rate']
    assert set(serial['metrics']['spearman']) == {'n', 'm'}


def test_training_commands_refuse_linear(capsys):
    assert _run(capsys, ['train', *SMALL, '--activation', 'linear', '--eta', '0.01'])[0] == 2
    assert _run(capsys, ['cluster', '--activation', 'linear'])[0] == 2
    assert _run(capsys, ['pu-eval', '--activation', 'linear'])[0] == 2
    report = _report(capsys, ['moments', '--activation', 'linear'])
    assert report['metrics']['rho'] == 0.0


def test_moments_reports_both_relu_tables(capsys):
    metrics = _report(capsys, ['moments', '--activation', 'relu'])['metrics']
    assert metrics['beta11'] == pytest.approx(0.3989422804014327, abs=1e-15)
    assert metrics['rounded_table']['beta11'] == 0.5
    assert metrics['rounded_table']['rho'] == -0.0625


def test_short_run_has_no_contraction_rate(capsys):
    data = ['train', *SMALL, '--init', 'near', '--eta', '0.2', '--max-iters', '2']
    assert _report(capsys, data)['metrics']['contraction_rate'] is None


def _rmse_argv(tmp_path, capsys):
    data = tmp_path / 'data'
    _report(capsys, ['gen-synthetic', *SMALL, '--seed', '5', '--out', str(data)])
    return ['rmse-eval', '--u', str(data / 'U.txt'), '--v', str(data / 'V.txt'), '--x', str(data / 'X.txt'),
            '--y', str(data / 'Y.txt'), '--obs', str(data / 'observations.csv')]


SUBCOMMANDS = {
    'gen-synthetic': ['gen-synthetic', *SMALL],
    'train': ['train', *SMALL, '--eta', '0.2', '--max-iters', '10'],
    'hessian-probe': ['hessian-probe', '--d1', '3', '--d2', '3', '--k', '2', '--n1', '20', '--n2', '20',
                      '--m', '200'],
    'population-hessian': ['population-hessian', '--d1', '2', '--d2', '2', '--k', '1', '--n-mc', '2000'],
    'tensor-init': ['tensor-init', '--d1', '3', '--d2', '3', '--k', '1', '--n1', '60', '--n2', '60', '--m', '3000',
                    '--restarts', '3', '--iterations', '20'],
    'recovery-grid': ['recovery-grid', '--d', '2', '--k', '1', '--n-values', '5', '--m-values', '20,40',
                      '--trials', '2', '--max-iters', '5', '--eta', '0.5', '--n-test', '20'],
    'cluster': ['cluster', '--n', '30', '--d', '3', '--clusters', '2', '--m', '300', '--max-iters', '10'],
    'pu-eval': ['pu-eval', '--n1', '30', '--n2', '20', '--d1', '3', '--d2', '3', '--k', '2', '--density', '0.1',
                '--max-iters', '10', '--r-values', '1,5,30'],
    'moments': ['moments', '--activation', 'tanh', '--sigma', '1.5'],
}


@pytest.mark.parametrize('command', [*SUBCOMMANDS, 'rmse-eval'])
def test_thread_count_does_not_change_results(command, tmp_path, capsys):
    argv = _rmse_argv(tmp_path, capsys) if command == 'rmse-eval' else SUBCOMMANDS[command]
    runs = []
    for threads in ('1', '8'):
        out = tmp_path / f'threads{threads}'
        report = _report(capsys, argv + ['--seed', '3', '--threads', threads, '--out', str(out)])
        files = {path.name: path.read_bytes() for path in sorted(out.iterdir()) if path.name != 'report.json'}
        runs.append((report['metrics'], files))
    assert runs[0] == runs[1]
