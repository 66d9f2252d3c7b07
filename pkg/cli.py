#!/usr/bin/env python3
"""
QSD Spectral Toolkit - Command Line
===================================
Loads a model file, runs one analysis and writes JSON/CSV artifacts:

    decompose   peripheral decomposition + α curve
    certify     quasi-compactness certificate (--kind)
    qsd         QSDs, conditioned laws and the convergence rate
    simulate    Monte Carlo conditioned laws and survival curve
    semigroup   continuous-time decomposition of a generator

Exit status: 0 success, 1 invalid certificate under --strict, 2 input error.
"""

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from jsonschema import Draft202012Validator

import config
from certify import (Certificate, check_domination, cor12_certificate, cor14_certificate,
                     density_certificate, lower_bound_r, prop9_certificate, verdict_table)
from decomposition import (decomposition_to_dict, is_totally_irreducible, peel_decomposition,
                           second_modulus_ratio, verify_decomposition)
from kernel_core import Kernel, QsdError, WeightedSpace
from qsd_sim import (AbsorbedModel, ExtinctionError, ModelError, compile_model, conditioned_law, convergence_rate,
                     lazy_chain_certificate, model_from_dict, model_to_dict, qsd_from_decomposition,
                     simulate_absorbed, total_variation)
from semigroup import (SubMarkovGenerator, continuous_decomposition, propagation_check, semigroup_to_dict,
                       transition)

logger = logging.getLogger(__name__)

COMMANDS = ('decompose', 'certify', 'qsd', 'simulate', 'semigroup')
CERTIFICATE_KINDS = ('lazy', 'prop9', 'lower', 'domination', 'cor12', 'cor14', 'density')
SCHEMA_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'model-schema.json')

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INPUT = 2

Model = Union[Kernel, AbsorbedModel, SubMarkovGenerator]


class SchemaError(QsdError, ValueError):
    """Model file does not match the published schema"""

    def __init__(self, message: str, path: str = '$'):
        super().__init__(message)
        self.path = path


@dataclass
class RunConfig:
    command: str
    model_path: str
    options: Dict[str, Any] = field(default_factory=dict)

    def option(self, name: str, default: Any = None) -> Any:
        value = self.options.get(name)
        return default if value is None else value


def _load_schema() -> Dict[str, Any]:
    with open(SCHEMA_PATH, encoding='utf-8') as handle:
        return json.load(handle)


def load_model(path: str) -> Model:
    """Validate a model file against the schema and build the domain object"""
    try:
        with open(path, encoding='utf-8') as handle:
            doc = json.load(handle)
    except FileNotFoundError:
        raise SchemaError(f"model file not found: {path}")
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model file is not valid JSON: {exc}")

    errors = sorted(Draft202012Validator(_load_schema()).iter_errors(doc), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        error = errors[0]
        where = '$' + ''.join(f'[{p}]' if isinstance(p, int) else f'.{p}' for p in error.absolute_path)
        raise SchemaError(error.message, where)
    return model_from_document(doc)


def model_from_document(doc: Dict[str, Any]) -> Model:
    variant = doc['variant']
    name = doc.get('name', variant)
    if variant in ('explicit', 'generator'):
        matrix = np.asarray(doc['matrix' if variant == 'explicit' else 'rates'], dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise SchemaError(f"matrix must be square, got shape {matrix.shape}",
                              '$.matrix' if variant == 'explicit' else '$.rates')
        n = matrix.shape[0]
        V = doc.get('V')
        if V is None and 'weight_base' in doc:
            V = float(doc['weight_base']) ** np.arange(n)
        if V is not None and len(V) != n:
            raise SchemaError(f"V has {len(V)} entries for {n} states", '$.V')
        space = WeightedSpace(tuple(doc.get('states', range(n))), np.ones(n) if V is None else np.asarray(V, float))
        if variant == 'explicit':
            return Kernel(space, matrix, name)
        return SubMarkovGenerator(space, matrix, name)
    return model_from_dict(doc)


def serialize_model(model: Model) -> Dict[str, Any]:
    if isinstance(model, AbsorbedModel):
        return model_to_dict(model)
    if isinstance(model, Kernel):
        doc = {'variant': 'explicit', 'matrix': model.entries.tolist()}
    else:
        doc = {'variant': 'generator', 'rates': model.rates.tolist()}
    doc['V'] = [float(v) for v in model.space.V]
    if model.space.states != tuple(range(model.space.n)):
        doc['states'] = list(model.space.states)
    if model.name and model.name != doc['variant']:
        doc['name'] = model.name
    return doc


def print_header(text: str):
    """Print formatted header"""
    print("\n" + "=" * 80)
    print(f"  {text}")
    print("=" * 80)


def _fmt(value: float) -> str:
    return f'{value:.17g}'


def write_json(path: str, payload: Any):
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False))
        handle.write('\n')


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


def _as_kernel(model: Model, config_: RunConfig) -> Kernel:
    if isinstance(model, Kernel):
        return model
    if isinstance(model, AbsorbedModel):
        return compile_model(model)
    return transition(model, float(config_.option('T', 1.0)), float(config_.option('tol', config.SERIES_TOL)))


def _as_absorbed(model: Model) -> AbsorbedModel:
    if isinstance(model, AbsorbedModel):
        return model
    if isinstance(model, Kernel):
        return AbsorbedModel.explicit(model)
    raise ModelError("this command needs a discrete-time model, not a generator")


def _e_k(config_: RunConfig, n: int) -> List[int]:
    raw = config_.option('ek')
    if raw is None:
        return list(range(n))
    try:
        indices = sorted({int(part) for part in str(raw).split(',') if part.strip()})
    except ValueError:
        raise SchemaError(f"--ek expects comma-separated integers, got {raw!r}", '--ek')
    bad = [i for i in indices if not 0 <= i < n]
    if bad:
        raise ModelError(f"--ek index {bad[0]} outside 0..{n - 1}")
    return indices


def _check_options(config_: RunConfig):
    checks = {
        'horizon': lambda v: int(v) >= 1,
        'paths': lambda v: int(v) >= 1,
        'n_max': lambda v: int(v) >= 1,
        'tol': lambda v: float(v) > 0,
        'T': lambda v: float(v) > 0,
        'x0': lambda v: int(v) >= 0,
        'workers': lambda v: int(v) >= 1,
    }
    for name, ok in checks.items():
        value = config_.options.get(name)
        if value is not None and not ok(value):
            raise SchemaError(f"option --{name.replace('_', '-')} out of range: {value}", f'--{name}')
    if config_.command not in COMMANDS:
        raise SchemaError(f"unknown command {config_.command!r}", 'command')


def run_decompose(model: Model, config_: RunConfig, out: str) -> int:
    P = _as_kernel(model, config_)
    n_max = int(config_.option('n_max', 60))
    print_header(f"Peripheral decomposition of {P.name or 'kernel'} ({P.n} states)")
    dec = peel_decomposition(P)
    curve = verify_decomposition(P, dec, n_max, workers=int(config_.option('workers', config.WORKERS)))
    report = decomposition_to_dict(dec)
    report['alpha'] = [{'n': n, 'k': k, 'alpha': a} for n, k, a in curve.rows]
    report['alpha_final'] = curve.final
    report['totally_irreducible'] = is_totally_irreducible(P)
    report['second_modulus_ratio'] = second_modulus_ratio(P)
    write_json(os.path.join(out, 'decomposition.json'), report)
    write_csv(os.path.join(out, 'alpha.csv'), ['n', 'k', 'alpha'], curve.to_csv_rows())
    print(f"  r = {dec.r:.12g}   d = {dec.d}   |I| = {len(dec.items)}   max j = {int(dec.j.max())}")
    print(f"  α at n = {n_max}: {curve.final:.3e}")
    return EXIT_OK


def _masked(P: Kernel, rows: np.ndarray, cols: np.ndarray, name: str) -> Kernel:
    return Kernel(P.space, np.where(np.outer(rows, cols), P.entries, 0.0), name)


def build_certificate(model: Model, config_: RunConfig) -> Certificate:
    kind = config_.option('kind', 'prop9')
    if kind not in CERTIFICATE_KINDS:
        raise SchemaError(f"unknown certificate kind {kind!r}", '--kind')
    if kind == 'lazy':
        if not isinstance(model, AbsorbedModel) or model.variant != 'lazy_chain':
            raise ModelError("--kind lazy needs a lazy_chain model")
        return lazy_chain_certificate(model, np.full(model.n, 1.0 / model.n))

    P = _as_kernel(model, config_)
    E_K = _e_k(config_, P.n)
    inside = np.zeros(P.n, dtype=bool)
    inside[E_K] = True
    K = _masked(P, inside, inside, 'P on E_K')
    if kind == 'prop9':
        return prop9_certificate(P, E_K, K)
    if kind == 'lower':
        return lower_bound_r(P, np.ones(P.n))
    if kind == 'domination':
        return check_domination(P, K, Kernel(P.space, P.entries - K.entries, 'P off E_K'))
    if kind == 'cor12':
        return cor12_certificate(P, E_K, K, 1, 0.0)
    if kind == 'cor14':
        A = float(P.V[inside].max()) if inside.any() else float(P.V.min())
        K_A = _masked(P, inside, P.V <= A, 'P on E_K x {V <= A}')
        return cor14_certificate(P, E_K, A, K_A, 0.0)
    if not isinstance(model, AbsorbedModel) or model.variant != 'density':
        raise ModelError("--kind density needs a density model")
    return density_certificate(P, model.arrays['p'], model.arrays['nu'], E_K)


def run_certify(model: Model, config_: RunConfig, out: str) -> int:
    cert = build_certificate(model, config_)
    print_header(f"Certificate: {cert.kind.value}")
    print(verdict_table([cert]))
    write_json(os.path.join(out, 'certificate.json'), cert.to_dict())
    if config_.option('strict', False) and not cert.valid:
        logger.error(f"❌ Certificate invalid under --strict: {'; '.join(cert.violations)}")
        return EXIT_INVALID
    return EXIT_OK


def run_qsd(model: Model, config_: RunConfig, out: str) -> int:
    P = _as_kernel(model, config_)
    horizon = int(config_.option('horizon', 50))
    x0 = int(config_.option('x0', 0))
    if x0 >= P.n:
        raise ModelError(f"start state {x0} outside 0..{P.n - 1}")
    print_header(f"Quasi-stationary analysis ({P.n} states)")
    dec = peel_decomposition(P)
    qsds = qsd_from_decomposition(dec)

    mu0 = np.zeros(P.n)
    mu0[x0] = 1.0
    checkpoints = [c for c in config.CHECKPOINTS if c <= horizon]
    rows = []
    laws = {}
    for c in checkpoints:
        try:
            law = conditioned_law(mu0, P, c)
        except ExtinctionError:
            logger.warning(f"⚠️  No mass survives to n = {c}; later checkpoints skipped")
            break
        laws[c] = law
        rows.extend((c, int(y), float(law.masses[y]), law.survival) for y in range(P.n))
    checkpoints = sorted(laws)
    rate = convergence_rate(P, dec, mu0)

    residuals = []
    for q in qsds:
        step = conditioned_law(q.masses, P, 1)
        residuals.append(total_variation(step.masses, q.masses))
    summary = {
        'r': dec.r,
        'd': dec.d,
        'qsds': [[float(v) for v in q.masses] for q in qsds],
        'fixed_point_residuals': residuals,
        'convergence': {
            'rate': rate.rate,
            'predicted': rate.predicted,
            'below_resolution': rate.below_resolution,
            'window': list(rate.window),
        },
        'survival': {str(c): laws[c].survival for c in checkpoints},
        'tv_to_qsd': {str(c): total_variation(laws[c].masses, qsds[0].masses) for c in checkpoints},
    }
    if isinstance(model, AbsorbedModel) and model.variant == 'lazy_chain':
        summary['certificate'] = lazy_chain_certificate(model, np.full(model.n, 1.0 / model.n)).to_dict()
    write_json(os.path.join(out, 'qsd.json'), summary)
    write_csv(os.path.join(out, 'conditioned_law.csv'), ['n', 'state', 'mass', 'survival'], rows)
    print(f"  {len(qsds)} QSD(s), r = {dec.r:.12g}, fitted rate {rate.rate:.6g} "
          f"(prediction {rate.predicted:.6g})")
    return EXIT_OK


def run_simulate(model: Model, config_: RunConfig, out: str) -> int:
    absorbed = _as_absorbed(model)
    P = compile_model(absorbed)
    horizon = int(config_.option('horizon', 30))
    paths = int(config_.option('paths', 100000))
    seed = int(config_.option('seed', 0))
    x0 = int(config_.option('x0', 0))
    print_header(f"Monte Carlo: {paths} paths, horizon {horizon}, seed {seed}")
    result = simulate_absorbed(absorbed, x0, horizon, paths, seed,
                               workers=int(config_.option('workers', config.WORKERS)))

    mu0 = np.zeros(P.n)
    mu0[x0] = 1.0
    rows = []
    checkpoints = {}
    for c in result.checkpoints:
        law = result.laws[c]
        if law is None:
            checkpoints[str(c)] = {'survival': 0.0, 'survivors': 0, 'tv_to_exact': None}
            continue
        rows.extend((c, int(y), float(law.masses[y]), float(law.survival)) for y in range(P.n))
        try:
            exact = conditioned_law(mu0, P, c)
            tv = total_variation(law.masses, exact.masses)
        except ExtinctionError:
            tv = None
        checkpoints[str(c)] = {'survival': float(law.survival), 'tv_to_exact': tv}
    summary = {
        'paths': paths,
        'seed': seed,
        'horizon': horizon,
        'x0': x0,
        'extinct': result.extinct,
        'survival_curve': [float(v) for v in result.survival_curve],
        'checkpoints': checkpoints,
    }
    write_json(os.path.join(out, 'simulation.json'), summary)
    write_csv(os.path.join(out, 'simulation.csv'), ['n', 'state', 'mass', 'survival'], rows)
    print(f"  survival at n = {horizon}: {result.survival_curve[-1]:.6g}")
    return EXIT_OK


def run_semigroup(model: Model, config_: RunConfig, out: str) -> int:
    if not isinstance(model, SubMarkovGenerator):
        raise ModelError("semigroup needs a generator model")
    T = float(config_.option('T', 1.0))
    tol = float(config_.option('tol', config.SERIES_TOL))
    print_header(f"Continuous-time decomposition, T = {T:g}")
    report = continuous_decomposition(model, T, tol=tol)
    propagation = propagation_check(model, 0.5 * T, 1.7 * T, tol=tol)
    summary = semigroup_to_dict(report)
    summary['propagation'] = {
        'consistent': propagation.consistent,
        'relative_error': propagation.relative_error,
        'partitions_match': propagation.partitions_match,
    }
    write_json(os.path.join(out, 'semigroup.json'), summary)
    write_csv(os.path.join(out, 'alpha_t.csv'), ['t', 'alpha_t'], zip(report.alpha_grid, report.alpha_t))
    write_csv(os.path.join(out, 'flow.csv'), ['h', 'flow_residual'], zip(report.flow_grid, report.flow_residuals))
    print(f"  r(P_1) = {report.r1:.12g}, |I| = {len(report.dec.items)}, flow ok = {report.flow_ok}, "
          f"propagation ok = {propagation.consistent}")
    return EXIT_OK


RUNNERS = {
    'decompose': run_decompose,
    'certify': run_certify,
    'qsd': run_qsd,
    'simulate': run_simulate,
    'semigroup': run_semigroup,
}


def report_error(exc: Exception):
    """One JSON line on stderr"""
    payload = {
        'error': type(exc).__name__,
        'message': str(exc),
        'path': getattr(exc, 'path', None),
    }
    sys.stderr.write(json.dumps(payload, sort_keys=True, ensure_ascii=False) + '\n')


def run(config_: RunConfig) -> int:
    """Dispatch one command; returns the exit status"""
    try:
        _check_options(config_)
        model = load_model(config_.model_path)
        out = config_.option('out', '.')
        os.makedirs(out, exist_ok=True)
        status = RUNNERS[config_.command](model, config_, out)
    except QsdError as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc}")
        report_error(exc)
        return EXIT_INPUT
    if status == EXIT_OK:
        logger.info(f"✅ {config_.command} finished, artifacts in {config_.option('out', '.')}")
    return status


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--model', required=True, help='model JSON file (see model-schema.json)')
    common.add_argument('--out', default='.', help='output directory for JSON/CSV artifacts')
    common.add_argument('--horizon', type=int, help='number of steps for conditioned laws / simulation')
    common.add_argument('--paths', type=int, help='Monte Carlo paths')
    common.add_argument('--seed', type=int, help='master random seed')
    common.add_argument('--tol', type=float, help='series tolerance for transition matrices')
    common.add_argument('--ek', help='comma-separated state indices of E_K')
    common.add_argument('--kind', choices=CERTIFICATE_KINDS, help='certificate kind')
    common.add_argument('--strict', action='store_true', help='exit 1 when the certificate is invalid')
    common.add_argument('--n-max', dest='n_max', type=int, help='length of the α sweep')
    common.add_argument('--T', dest='T', type=float, help='reference time for generators')
    common.add_argument('--x0', type=int, help='start state index')
    common.add_argument('--workers', type=int, help='thread pool size')

    parser = argparse.ArgumentParser(
        description='Peripheral spectral decomposition, quasi-compactness certificates and QSD analysis'
    )
    sub = parser.add_subparsers(dest='command', required=True)
    for command in COMMANDS:
        sub.add_parser(command, parents=[common], help=(RUNNERS[command].__doc__ or command))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    options = {k: v for k, v in vars(args).items() if k not in ('command', 'model')}
    log_file = config.setup_logging(f'qsd_{args.command}')
    logger.info("=" * 80)
    logger.info(f"QSD SPECTRAL TOOLKIT - {args.command.upper()}")
    logger.info("=" * 80)
    status = run(RunConfig(command=args.command, model_path=args.model, options=options))
    if log_file:
        print(f"\nLog saved to: {log_file}")
    return status


if __name__ == '__main__':
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.warning("\n⚠️  Interrupted by user")
        sys.exit(1)
    except Exception as exc:
        logger.error(f"\n❌ Fatal error: {exc}")
        logger.error(traceback.format_exc())
        report_error(exc)
        sys.exit(EXIT_INPUT)
