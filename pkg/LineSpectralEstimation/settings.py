"""
Django settings for LineSpectralEstimation project.

The project has no web surface: it hosts the ``estimation`` app (the
estimator library and the ``estimate`` command) and the ``bench`` app
(synthetic scenarios, Monte Carlo sweeps and their stored results).

Every knob can be overridden from the environment or from ``BASE_DIR/.env``.
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env using stdlib only (no extra deps).
# Does not override variables that are already set in the environment.
def _load_dotenv(path):
    try:
        with open(path) as _f:
            for _line in _f:
                _line = _line.strip()
                if not _line or _line.startswith('#') or '=' not in _line:
                    continue
                _key, _, _val = _line.partition('=')
                _key = _key.strip()
                _val = _val.strip().strip('"').strip("'")
                os.environ.setdefault(_key, _val)
    except FileNotFoundError:
        pass

_load_dotenv(BASE_DIR / ".env")


def _env_bool(name, default="false"):
    return os.getenv(name, default).lower() in {"1", "true", "yes"}


POSTGRES_DEFAULT_PORT = "5432"

# SECURITY WARNING: only used to satisfy Django; nothing is signed.
SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "django-insecure-line-spectral-estimation")

DEBUG = _env_bool("DJANGO_DEBUG")

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "estimation",
    "bench",
]

MIDDLEWARE = []


# Database
# SQLite by default; BENCH_DB_ENGINE=postgresql stores sweeps in Postgres.

if os.getenv("BENCH_DB_ENGINE", "sqlite3") == "postgresql":
    DATABASES = {
        "default": {
            "ENGINE": "django.db.backends.postgresql",
            "NAME": os.getenv("BENCH_DB_NAME", "line_spectral_bench"),
            "USER": os.getenv("BENCH_DB_USER", "postgres"),
            "PASSWORD": os.getenv("BENCH_DB_PASSWORD", ""),
            "HOST": os.getenv("BENCH_DB_HOST", "localhost"),
            "PORT": os.getenv("BENCH_DB_PORT", POSTGRES_DEFAULT_PORT),
        }
    }
else:
    DATABASES = {
        "default": {
            "ENGINE": "django.db.backends.sqlite3",
            "NAME": os.getenv("BENCH_DB_NAME", str(BASE_DIR / "bench.sqlite3")),
        }
    }


TIME_ZONE = "UTC"

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# ---------------------------------------------------------------------------
# Estimator defaults
# ---------------------------------------------------------------------------
# Read by estimation.engine.EstimatorOptions.from_settings(); command-line
# flags of `manage.py estimate` / `manage.py bench` take precedence.

MVALSE = {
    "MAX_ITERATIONS": int(os.getenv("MVALSE_MAX_ITERATIONS", "200")),
    "TOLERANCE": float(os.getenv("MVALSE_TOLERANCE", "1e-5")),
    "LAMBDA_MIN": float(os.getenv("MVALSE_LAMBDA_MIN", "1e-3")),
    # points of the frequency-posterior grid search (a power of two)
    "GRID_SIZE": int(os.getenv("MVALSE_GRID_SIZE", "4096")),
    "NEWTON_STEPS": int(os.getenv("MVALSE_NEWTON_STEPS", "20")),
    "NU_FLOOR_RATIO": float(os.getenv("MVALSE_NU_FLOOR_RATIO", "1e-8")),
    "PRIOR_MATCHING": os.getenv("MVALSE_PRIOR_MATCHING", "nearest"),
    "DEACTIVATE": _env_bool("MVALSE_DEACTIVATE", "true"),
}


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

BENCH_OUTPUT_DIR = Path(os.getenv("BENCH_OUTPUT_DIR", str(BASE_DIR / "bench_results")))
BENCH_WORKERS = int(os.getenv("BENCH_WORKERS", "4"))
BENCH_DEFAULT_SEED = int(os.getenv("BENCH_DEFAULT_SEED", "0"))


# ---------------------------------------------------------------------------
# Logging: show INFO from app modules in the console
# ---------------------------------------------------------------------------
APP_LOG_LEVEL = os.getenv("MVALSE_LOG_LEVEL", "INFO").upper()

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "[{asctime}] {levelname} {name}: {message}",
            "style": "{",
            "datefmt": "%Y-%m-%d %H:%M:%S",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "loggers": {
        "estimation": {
            "handlers": ["console"],
            "level": APP_LOG_LEVEL,
            "propagate": False,
        },
        "bench": {
            "handlers": ["console"],
            "level": APP_LOG_LEVEL,
            "propagate": False,
        },
        "django": {
            "handlers": ["console"],
            "level": "WARNING",
            "propagate": False,
        },
    },
}
