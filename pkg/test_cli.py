"""
Tests for the command line: model loading, artifacts and exit codes
"""
import csv
import json
import os

import numpy as np
import pytest

import config
from cli import (EXIT_INPUT, EXIT_INVALID, EXIT_OK, RunConfig, SchemaError, load_model, main, run,
                 serialize_model)
from kernel_core import Kernel
from qsd_sim import AbsorbedModel, ModelError, compile_model
from semigroup import SubMarkovGenerator

MODELS = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'models')


def model_path(name: str) -> str:
    return os.path.join(MODELS, name)


def write_model(tmp_path, doc, name='model.json') -> str:
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def read_json(path) -> dict:
    with open(path, encoding='utf-8') as handle:
        return json.load(handle)


def last_error(capsys) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith('{')]
    return json.loads(lines[-1])


# Model loading

def test_explicit_model_loads_as_kernel():
    model = load_model(model_path('two_cycle.json'))
    assert isinstance(model, Kernel)
    np.testing.assert_array_equal(model.entries, [[0.0, 0.9], [0.9, 0.0]])


def test_birth_death_model_loads_with_weights():
    model = load_model(model_path('birth_death_400.json'))
    assert isinstance(model, AbsorbedModel)
    assert model.n == 400
    P = compile_model(model)
    assert P.V[2] == pytest.approx(3.0)
    np.testing.assert_allclose(np.diag(P.entries), 0.2)


def test_generator_model_loads():
    model = load_model(model_path('generator_2state.json'))
    assert isinstance(model, SubMarkovGenerator)
    assert model.uniform_rate == pytest.approx(1.1)


@pytest.mark.parametrize("name", ['two_cycle.json', 'lazy_chain_50.json', 'birth_death_400.json',
                                  'generator_2state.json'])
def test_model_files_round_trip(tmp_path, name):
    model = load_model(model_path(name))
    again = load_model(write_model(tmp_path, serialize_model(model)))
    assert type(again) is type(model)
    if isinstance(model, SubMarkovGenerator):
        np.testing.assert_array_equal(again.rates, model.rates)
    else:
        kernel = model if isinstance(model, Kernel) else compile_model(model)
        kernel_again = again if isinstance(again, Kernel) else compile_model(again)
        np.testing.assert_array_equal(kernel_again.entries, kernel.entries)
        np.testing.assert_array_equal(kernel_again.V, kernel.V)


def test_schema_violation_reports_json_path(tmp_path):
    path = write_model(tmp_path, {'variant': 'lazy_chain', 'R': [[-0.5]], 'rho_R': 1.0,
                                  'rho_delta': 0.0, 'rho_partial': 0.0})
    with pytest.raises(SchemaError) as info:
        load_model(path)
    assert info.value.path == '$.R[0][0]'


def test_missing_required_field(tmp_path):
    with pytest.raises(SchemaError):
        load_model(write_model(tmp_path, {'variant': 'explicit'}))


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(SchemaError, match='not found'):
        load_model(str(tmp_path / 'absent.json'))
    broken = tmp_path / 'broken.json'
    broken.write_text('{"variant": ')
    with pytest.raises(SchemaError, match='not valid JSON'):
        load_model(str(broken))


def test_lazy_rates_must_sum_to_one(tmp_path):
    path = write_model(tmp_path, {'variant': 'lazy_chain', 'R': [[0.5, 0.5], [0.5, 0.5]], 'rho_R': 0.5,
                                  'rho_delta': 0.3, 'rho_partial': [0.2, 0.3]})
    with pytest.raises(ModelError, match='state 1'):
        load_model(path)


def test_weights_must_match_states(tmp_path):
    path = write_model(tmp_path, {'variant': 'explicit', 'matrix': [[0.5]], 'V': [1.0, 2.0]})
    with pytest.raises(SchemaError) as info:
        load_model(path)
    assert info.value.path == '$.V'


# Commands

def test_decompose_two_cycle(tmp_path):
    status = run(RunConfig('decompose', model_path('two_cycle.json'), {'out': str(tmp_path), 'n_max': 10}))
    assert status == EXIT_OK
    report = read_json(tmp_path / 'decomposition.json')
    assert report['d'] == 2
    assert len(report['items']) == 2
    assert report['r'] == pytest.approx(0.9)
    assert report['alpha_final'] <= 1e-12
    with open(tmp_path / 'alpha.csv', encoding='utf-8') as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ['n', 'k', 'alpha']
    assert len(rows) == 1 + 20


def test_certify_lazy_chain(tmp_path):
    status = run(RunConfig('certify', model_path('lazy_chain_50.json'), {'out': str(tmp_path), 'kind': 'lazy'}))
    assert status == EXIT_OK
    cert = read_json(tmp_path / 'certificate.json')
    assert cert['kind'] == 'Domination'
    assert cert['valid'] is True
    assert cert['margin'] == pytest.approx(0.5, abs=1e-12)


def test_certify_strict_invalid_exits_one(tmp_path):
    options = {'out': str(tmp_path), 'kind': 'prop9', 'ek': ','.join(str(i) for i in range(10)), 'strict': True}
    status = run(RunConfig('certify', model_path('birth_death_400.json'), options))
    assert status == EXIT_INVALID
    cert = read_json(tmp_path / 'certificate.json')
    assert cert['valid'] is False


def test_certify_same_model_without_strict_succeeds(tmp_path):
    options = {'out': str(tmp_path), 'kind': 'prop9', 'ek': '0,1,2'}
    assert run(RunConfig('certify', model_path('birth_death_400.json'), options)) == EXIT_OK


def test_certify_kinds_on_lazy_chain(tmp_path):
    for kind in ('prop9', 'lower', 'domination', 'cor12', 'cor14'):
        out = tmp_path / kind
        status = run(RunConfig('certify', model_path('lazy_chain_50.json'), {'out': str(out), 'kind': kind}))
        assert status == EXIT_OK
        assert (out / 'certificate.json').exists()


def test_certify_density_needs_density_model(tmp_path, capsys):
    status = run(RunConfig('certify', model_path('two_cycle.json'), {'out': str(tmp_path), 'kind': 'density'}))
    assert status == EXIT_INPUT
    assert last_error(capsys)['error'] == 'ModelError'


def test_qsd_on_lazy_chain(tmp_path):
    status = run(RunConfig('qsd', model_path('lazy_chain_50.json'), {'out': str(tmp_path), 'horizon': 20}))
    assert status == EXIT_OK
    summary = read_json(tmp_path / 'qsd.json')
    np.testing.assert_allclose(summary['qsds'][0], 0.02, atol=1e-12)
    assert summary['convergence']['rate'] == pytest.approx(0.375, rel=1e-6)
    assert summary['certificate']['valid'] is True
    assert summary['survival']['10'] == pytest.approx(0.8 ** 10)
    assert (tmp_path / 'conditioned_law.csv').exists()


def test_simulation_artifacts_are_reproducible(tmp_path):
    outputs = []
    for workers in (1, 3):
        out = tmp_path / f'w{workers}'
        options = {'out': str(out), 'paths': 5000, 'horizon': 10, 'seed': 3, 'workers': workers}
        assert run(RunConfig('simulate', model_path('lazy_chain_50.json'), options)) == EXIT_OK
        outputs.append(((out / 'simulation.json').read_bytes(), (out / 'simulation.csv').read_bytes()))
    assert outputs[0] == outputs[1]


def test_semigroup_on_generator(tmp_path):
    status = run(RunConfig('semigroup', model_path('generator_2state.json'), {'out': str(tmp_path)}))
    assert status == EXIT_OK
    summary = read_json(tmp_path / 'semigroup.json')
    assert summary['r1'] == pytest.approx(np.exp(-0.1), rel=1e-10)
    assert summary['flow_ok'] is True
    assert summary['propagation']['consistent'] is True
    assert (tmp_path / 'alpha_t.csv').exists()
    assert (tmp_path / 'flow.csv').exists()


def test_semigroup_needs_generator(tmp_path, capsys):
    status = run(RunConfig('semigroup', model_path('two_cycle.json'), {'out': str(tmp_path)}))
    assert status == EXIT_INPUT
    assert last_error(capsys)['error'] == 'ModelError'


def test_schema_error_exit_code_and_stderr(tmp_path, capsys):
    path = write_model(tmp_path, {'variant': 'explicit', 'matrix': [[0.5, 'x'], [0.1, 0.2]]})
    status = run(RunConfig('decompose', path, {'out': str(tmp_path)}))
    assert status == EXIT_INPUT
    error = last_error(capsys)
    assert error['error'] == 'SchemaError'
    assert error['path'] == '$.matrix[0][1]'


@pytest.mark.parametrize("options, path", [
    ({'paths': 0}, '--paths'),
    ({'horizon': 0}, '--horizon'),
    ({'ek': '1,x'}, '--ek'),
])
def test_bad_options_exit_two(tmp_path, capsys, options, path):
    options = dict(options, out=str(tmp_path), kind='prop9')
    command = 'certify' if 'ek' in options else 'simulate'
    status = run(RunConfig(command, model_path('lazy_chain_50.json'), options))
    assert status == EXIT_INPUT
    assert last_error(capsys)['path'] == path


def test_main_writes_log_file(tmp_path, monkeypatch, restore_logging):
    monkeypatch.setattr(config, 'LOG_TO_FILE', True)
    monkeypatch.setattr(config, 'LOG_DIR', str(tmp_path / 'logs'))
    status = main(['decompose', '--model', model_path('two_cycle.json'), '--out', str(tmp_path), '--n-max', '5'])
    assert status == EXIT_OK
    logs = os.listdir(tmp_path / 'logs')
    assert len(logs) == 1
    assert logs[0].startswith('qsd_decompose_')


def test_main_rejects_unknown_kind(tmp_path):
    with pytest.raises(SystemExit):
        main(['certify', '--model', model_path('two_cycle.json'), '--kind', 'nonsense'])
