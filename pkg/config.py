#!/usr/bin/env python3
"""
QSD Spectral Toolkit Configuration
==================================
Loads numeric tolerances, worker counts and logging settings from the
environment (or a local .env file) and sets up the shared log handlers.
"""

import os
import logging
from datetime import datetime
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class ConfigError(ValueError):
    """Raised when an environment setting cannot be parsed"""


def _float_env(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{name} must be a number, got {raw!r}")
    if value <= 0:
        raise ConfigError(f"{name} must be positive, got {raw!r}")
    return value


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"{name} must be at least 1, got {raw!r}")
    return value


def _bool_env(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    return raw.strip().lower() in ('1', 'true', 'yes', 'on')


def _checkpoints_env(name: str, default: List[int]) -> List[int]:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return list(default)
    try:
        values = sorted({int(part) for part in raw.split(',') if part.strip()})
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated list of integers, got {raw!r}")
    if not values or values[0] < 1:
        raise ConfigError(f"{name} needs positive checkpoints, got {raw!r}")
    return values


# Numerical tolerances
ORDER_TOL = _float_env('QSD_ORDER_TOL', 1e-12)          # relative, entrywise comparisons
EIG_RESIDUAL = _float_env('QSD_EIG_RESIDUAL', 1e-8)     # eigen-relation residual relative to r
BASIC_TOL = _float_env('QSD_BASIC_TOL', 1e-9)           # |rho_c - r| <= BASIC_TOL * r
SNAP_TOL = _float_env('QSD_SNAP_TOL', 1e-12)            # eigenvector entries snapped to 0
SERIES_TOL = _float_env('QSD_SERIES_TOL', 1e-13)        # Poisson tail for uniformization
DENSE_LIMIT = _int_env('QSD_DENSE_LIMIT', 2000)         # dense eigensolver up to this dimension

# Parallelism
WORKERS = _int_env('QSD_WORKERS', 4)
BLOCK_SIZE = _int_env('QSD_BLOCK_SIZE', 4096)           # paths per random stream

# Simulation / reporting
CHECKPOINTS = _checkpoints_env('QSD_CHECKPOINTS', [1, 2, 5, 10, 20, 30, 50])

# Logging
LOG_DIR = os.getenv('QSD_LOG_DIR', '.')
LOG_TO_FILE = _bool_env('QSD_LOG_FILE', True)
LOG_LEVEL = os.getenv('QSD_LOG_LEVEL', 'INFO').upper()


def setup_logging(prefix: str = 'qsd_analysis', to_file: Optional[bool] = None) -> Optional[str]:
    """Console logging plus an optional timestamped log file; returns the file name"""
    if to_file is None:
        to_file = LOG_TO_FILE

    handlers: List[logging.Handler] = [logging.StreamHandler()]
    log_filename = None
    if to_file:
        os.makedirs(LOG_DIR, exist_ok=True)
        log_filename = os.path.join(
            LOG_DIR, f'{prefix}_{datetime.now().strftime("%Y%m%d_%H%M%S")}.log'
        )
        handlers.insert(0, logging.FileHandler(log_filename))

    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )
    return log_filename
