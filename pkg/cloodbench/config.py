import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


def _flag(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).lower() in ("1", "true", "yes", "on")


LOG_LEVEL = os.getenv("CLOODBENCH_LOG_LEVEL", "INFO").upper()

BASE_DIR = Path(__file__).resolve().parent.parent
RESULTS_DIR = os.getenv("CLOODBENCH_RESULTS_DIR", "results")
PROFILE_DIR = os.getenv("CLOODBENCH_PROFILE_DIR", str(BASE_DIR / "profiles"))

# Upper bound on concurrently running repetitions when run.parallel is set
MAX_WORKERS = int(os.getenv("CLOODBENCH_MAX_WORKERS", "2"))

# Gate for the multi-minute directional benchmarks in the test suite
RUN_SLOW_TESTS = _flag("CLOODBENCH_SLOW")

SCHEMA_VERSION = "1.0"
