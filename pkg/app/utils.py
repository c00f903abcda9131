# app/utils.py
from __future__ import annotations

import os
import random
import sys
import warnings
from datetime import datetime
from zoneinfo import ZoneInfo

import numpy as np
import torch
from dotenv import load_dotenv

load_dotenv()

UTC_TZ = ZoneInfo("UTC")

QUADRANTS = ("A", "B", "C", "D")


# --------------------------
# Errors
# --------------------------
class NfsemError(Exception):
    """Base class for every error the pipeline raises on purpose."""


class ValidationError(NfsemError):
    pass


class NonFiniteError(NfsemError):
    pass


class ConvergenceError(NfsemError):
    pass


class FacingAwayError(NfsemError, ValueError):
    pass


class NfsemWarning(UserWarning):
    pass


def warn(msg: str) -> None:
    warnings.warn(msg, NfsemWarning, stacklevel=2)


# --------------------------
# Logging
# --------------------------
def log(msg: str, tag: str = "NFSEM") -> None:
    utc = datetime.now(UTC_TZ).isoformat(timespec="seconds").replace("+00:00", "Z")
    print(f"[{utc}] [{tag}] {msg}", file=sys.stderr)


# --------------------------
# Runtime
# --------------------------
def thread_cap() -> int:
    raw = (os.getenv("NFSEM_THREADS") or "").strip()
    if not raw:
        return max(1, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"NFSEM_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValidationError(f"NFSEM_THREADS must be >= 1, got {n}")
    return n


def configure_runtime(seed: int) -> torch.Generator:
    """Seed every RNG we touch and pin torch to deterministic CPU kernels."""
    torch.set_num_threads(thread_cap())
    torch.use_deterministic_algorithms(True)
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen
