#!/usr/bin/env python3
"""
Installation Check Script
=========================
Checks packages, settings and the bundled model files, then runs a small
decomposition with a known answer before any long analysis.
"""

import importlib
import os
import sys
from typing import Dict

from dotenv import load_dotenv

# Load environment
load_dotenv()

REQUIRED_PACKAGES = ['numpy', 'scipy', 'dotenv', 'jsonschema']
TEST_PACKAGES = ['pytest', 'hypothesis']
MODELS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'models')


def print_header(text: str):
    """Print formatted header"""
    print("\n" + "=" * 80)
    print(f"  {text}")
    print("=" * 80)


def check_packages() -> bool:
    """Check that the numerical stack imports"""
    print_header("1. Checking Python Packages")

    all_found = True
    for name in REQUIRED_PACKAGES + TEST_PACKAGES:
        try:
            module = importlib.import_module(name)
            version = getattr(module, '__version__', 'unknown version')
            print(f"  ✅ {name}: {version}")
        except ImportError:
            optional = name in TEST_PACKAGES
            print(f"  {'⚠️ ' if optional else '❌'} {name}: NOT INSTALLED{' (only needed for tests)' if optional else ''}")
            if not optional:
                all_found = False

    if not all_found:
        print("\n❌ Missing packages - run: pip3 install -r requirements.txt")
    return all_found


def check_settings() -> bool:
    """Parse every QSD_* setting"""
    print_header("2. Checking Settings")

    try:
        import config
    except ValueError as e:
        print(f"  ❌ {e}")
        return False

    settings = {
        'QSD_ORDER_TOL': config.ORDER_TOL,
        'QSD_EIG_RESIDUAL': config.EIG_RESIDUAL,
        'QSD_SERIES_TOL': config.SERIES_TOL,
        'QSD_DENSE_LIMIT': config.DENSE_LIMIT,
        'QSD_WORKERS': config.WORKERS,
        'QSD_BLOCK_SIZE': config.BLOCK_SIZE,
        'QSD_CHECKPOINTS': ','.join(str(c) for c in config.CHECKPOINTS),
        'QSD_LOG_DIR': config.LOG_DIR,
    }
    for name, value in settings.items():
        source = 'env' if os.getenv(name) else 'default'
        print(f"  ✅ {name}: {value} ({source})")

    if not os.path.exists('.env'):
        print("\n  ⚠️  No .env file found - using defaults (see .env.example)")
    return True


def check_models() -> bool:
    """Validate the bundled model files against the schema"""
    print_header("3. Checking Model Files")

    from cli import load_model
    from kernel_core import QsdError

    if not os.path.isdir(MODELS_DIR):
        print(f"  ❌ Models directory not found: {MODELS_DIR}")
        return False

    all_valid = True
    for filename in sorted(os.listdir(MODELS_DIR)):
        if not filename.endswith('.json'):
            continue
        try:
            model = load_model(os.path.join(MODELS_DIR, filename))
            print(f"  ✅ {filename}: {type(model).__name__}")
        except QsdError as e:
            print(f"  ❌ {filename}: {e}")
            all_valid = False
    return all_valid


def check_known_answer() -> bool:
    """Two-state chain: r = 0.9, one QSD at (1/2, 1/2), convergence rate 1/2"""
    print_header("4. Checking a Known Decomposition")

    import numpy as np
    from decomposition import peel_decomposition
    from kernel_core import Kernel
    from qsd_sim import convergence_rate, qsd_from_decomposition

    P = Kernel.from_matrix([[0.675, 0.225], [0.225, 0.675]], name='two-state')
    dec = peel_decomposition(P)
    qsd = qsd_from_decomposition(dec)[0].masses
    rate = convergence_rate(P, dec, [1.0, 0.0]).rate

    checks = {
        'spectral radius 0.9': abs(dec.r - 0.9) < 1e-12,
        'single limit pair': len(dec.items) == 1,
        'QSD (1/2, 1/2)': bool(np.allclose(qsd, 0.5, atol=1e-12)),
        'convergence rate 1/2': abs(rate - 0.5) < 1e-6,
    }
    for name, ok in checks.items():
        print(f"  {'✅' if ok else '❌'} {name}")
    return all(checks.values())


def main():
    """Run all checks"""
    print("\n")
    print("╔" + "=" * 78 + "╗")
    print("║" + " " * 23 + "QSD SPECTRAL TOOLKIT INSTALL CHECK" + " " * 21 + "║")
    print("╚" + "=" * 78 + "╝")

    results: Dict[str, bool] = {
        'Packages': False,
        'Settings': False,
        'Model Files': False,
        'Known Answer': False,
    }

    results['Packages'] = check_packages()
    if not results['Packages']:
        print_summary(results)
        sys.exit(1)

    results['Settings'] = check_settings()
    if results['Settings']:
        results['Model Files'] = check_models()
        results['Known Answer'] = check_known_answer()

    print_summary(results)

    if all(results.values()):
        print("\n🎉 ALL CHECKS PASSED - Ready to run analyses!")
        sys.exit(0)
    else:
        print("\n❌ Some checks failed - Fix issues before running analyses")
        sys.exit(1)


def print_summary(results: Dict[str, bool]):
    """Print check summary"""
    print_header("CHECK SUMMARY")

    passed = sum(1 for v in results.values() if v)
    total = len(results)

    for check_name, ok in results.items():
        status = "✅ PASS" if ok else "❌ FAIL"
        print(f"  {status}  {check_name}")

    print(f"\nResults: {passed}/{total} checks passed")


if __name__ == '__main__':
    try:
        main()
    except KeyboardInterrupt:
        print("\n\n⚠️  Checks interrupted by user")
        sys.exit(1)
    except Exception as e:
        print(f"\n\n❌ Fatal error: {str(e)}")
        import traceback
        traceback.print_exc()
        sys.exit(1)
