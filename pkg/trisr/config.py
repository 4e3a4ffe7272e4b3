import configparser
from pathlib import Path
from typing import Any, Dict, Union

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    LOG_LEVEL: str = "INFO"
    # Print a progress line every N training iterations
    LOG_EVERY: int = 50

    # 1 = reference mode; results are bitwise reproducible only here
    THREADS: int = 1

    DEFAULT_OUT_DIR: str = "runs"

    # Batches the patch producer may run ahead of the trainer
    PREFETCH_DEPTH: int = 2
    LOSS_HISTORY_SIZE: int = 1000

    # Reported in place of +inf when two volumes are identical
    PSNR_CAP: float = 99.0

    model_config = SettingsConfigDict(env_file=".env", env_prefix="TRISR_", extra="ignore")


settings = Settings()


# RVOL container
RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
RVOL_DTYPE_FLOAT32 = 1

# TSRC checkpoint container
TSRC_MAGIC = b"TSRC"
TSRC_VERSION = 1

# NIfTI-1 single file layout
NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC_SINGLE = b"n+1"
NIFTI_MAGIC_PAIR = b"ni1"

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# Per-step training log columns
LOSS_CSV_COLUMNS = ["iter", "sigma", "l_pixel", "l_perc", "l_g_ragan", "l_d_ragan", "l_g_total"]
METRIC_CSV_COLUMNS = [
    "ref", "test", "psnr", "ssim", "nrmse", "data_range", "ssim_window", "k1", "k2", "nrmse_norm",
]
TRAJECTORY_CSV_COLUMNS = ["step", "theta", "psi"]

# INI sections accepted by load_ini_config
CONFIG_SECTIONS = ("train", "data", "model")


def load_ini_config(path: Union[str, Path]) -> Dict[str, Any]:
    """Flatten the [train], [data] and [model] sections of an INI file into one dict.

    Values stay strings; TrainingConfig validation coerces them.
    """
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)

    unknown = [s for s in parser.sections() if s not in CONFIG_SECTIONS]
    if unknown:
        raise ValueError(f"Unknown config section(s): {', '.join(unknown)}")

    values: Dict[str, Any] = {}
    for section in CONFIG_SECTIONS:
        if parser.has_section(section):
            for key, value in parser.items(section):
                if key in values:
                    raise ValueError(f"Key {key!r} appears in more than one section")
                values[key] = value
    return values
