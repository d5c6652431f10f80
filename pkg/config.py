# Configuration file for the robust private regression toolkit

import json
from typing import Any, Dict, Mapping, Optional

from errors import ConfigError

TOOL_NAME = "robustdp"
TOOL_VERSION = "1.0.0"

# Ledger files (see database.py)
DB_FILE = "robustdp_ledger.json"

# Tables
DEFAULT_DELIMITER = ","
DEFAULT_GENE_COUNT = 64

# Monte Carlo cross-validation protocol
DEFAULT_N_TEST = 100
DEFAULT_N_NONPRIVATE = 30
DEFAULT_REPEATS = 50

# Priors
DEFAULT_LAMBDA = 1.0
DEFAULT_LAMBDA0 = 1.0
GAMMA_A = 2.0
GAMMA_B = 2.0
GAMMA_A0 = 2.0
GAMMA_B0 = 2.0

# Gibbs sampler
GIBBS_SAMPLES = 5000
GIBBS_BURN_IN = 1000
QF_FLOOR_REL = 1e-8  # floor on the residual quadratic form, relative to max(1, |yy|)

# Noisy precision repair: eigenvalues clamped up to PSD_REPAIR_REL * max(1, trace/d)
PSD_REPAIR_REL = 1e-6

# Rows above which sufficient statistics use exactly-rounded summation
COMPENSATED_SUM_MIN_ROWS = 100_000

# Privacy budget split used when none is given (largest share to xy)
DEFAULT_SPLIT = (0.35, 0.60, 0.05)

# Tuning grids
SPLIT_GRID_UNIT = 0.05
SPLIT_GRID_MIN_UNITS = 1   # 0.05
SPLIT_GRID_MAX_UNITS = 18  # 0.90
OMEGA_GRID = tuple(round(0.1 * w, 1) for w in range(1, 21))
TUNING_AUX_SIZE = 500
SPLIT_SEARCH_DATASETS = 5
SPLIT_SEARCH_NOISE = 5
THRESHOLD_DATASETS = 20
THRESHOLD_NOISE = 20
TUNING_GIBBS_SAMPLES = 1000
TUNING_GIBBS_BURN_IN = 200

# DP ratio check
MIN_BIN_COUNT = 50

# Convergence experiments
CONVERGENCE_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "epsilon": 1.0,
    "split": list(DEFAULT_SPLIT),
    "bounds": None,
    "multipliers": None,
    "dims": 10,
    "delimiter": DEFAULT_DELIMITER,
    "genes": DEFAULT_GENE_COUNT,
    "n_test": DEFAULT_N_TEST,
    "n_nonprivate": DEFAULT_N_NONPRIVATE,
    "n_private": 800,
    "n_aux": TUNING_AUX_SIZE,
    "repeats": DEFAULT_REPEATS,
    "m": GIBBS_SAMPLES,
    "burn_in": GIBBS_BURN_IN,
    "fit": "fixed",
    "format": "json",
    "workers": 1,
}


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Read a JSON config file; a missing path means no file layer."""
    if not path:
        return {}
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", path=str(path))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e.msg}", path=str(path), line=e.lineno)
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a JSON object", path=str(path))
    return data


def resolve_config(
    flags: Mapping[str, Any],
    file_values: Mapping[str, Any],
    defaults: Mapping[str, Any] = DEFAULTS,
) -> Dict[str, Any]:
    """Merge configuration layers with precedence flags > file > defaults.

    Flags whose value is None count as unset. Keys in the config file that no
    command understands are rejected rather than ignored.
    """
    known = set(defaults) | set(flags)
    unknown = sorted(k for k in file_values if k not in known)
    if unknown:
        raise ConfigError("unknown configuration keys", keys=unknown)

    resolved: Dict[str, Any] = {}
    for key in sorted(known):
        if flags.get(key) is not None:
            resolved[key] = flags[key]
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            resolved[key] = defaults.get(key)
    return resolved
