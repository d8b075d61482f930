"""Test settings.

Use in-memory SQLite and keep the estimator loggers quiet so the suite
runs without Postgres and without console noise.

Run:
  python manage.py test --settings=LineSpectralEstimation.settings_test
  python manage.py test --settings=LineSpectralEstimation.settings_test --exclude-tag slow
"""

from .settings import *  # noqa

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": ":memory:",
    }
}

LOGGING["loggers"]["estimation"]["level"] = "WARNING"  # noqa: F405
LOGGING["loggers"]["bench"]["level"] = "WARNING"  # noqa: F405

BENCH_WORKERS = 2
