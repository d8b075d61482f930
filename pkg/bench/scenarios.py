"""Synthetic scenarios: configuration, presets and trial generation.

A scenario fixes the true model order, the array size, the noise level and
where the true frequencies come from.  Every trial draws from its own
random stream derived from ``(rng_seed, trial)`` so trials can run in any
order and on any number of workers.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from estimation.circular import VonMises, wrap_angle
from estimation.model import MeasurementSet, PriorConfig, steering_matrix, wrap_distance

from .dataio import ConfigError

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 100_000
RNG_NAME = "numpy.random.Philox(SeedSequence([seed, trial]))"

FREQUENCY_SOURCES = ("uniform", "von_mises_grid", "von_mises_doa")
PRIOR_KINDS = ("none", "grid", "source")


class ScenarioError(ValueError):
    """Scenario that cannot be generated as configured."""


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    K: int = 3
    M: int = 20
    L: int = 4
    N: int = 20
    snr_db: float = 10.0
    # None means 2*pi/N.
    min_separation: float | None = None
    weight_mean: complex = 1 + 0j
    weight_var: float = 0.1
    frequency_source: str = "uniform"
    kappa0: float = 1e4
    doa_degrees: tuple[float, ...] = ()
    prior: str = "none"
    trials: int = 200
    rng_seed: int = 0
    groups: int = 1
    carry_hyperparams: bool = False

    def __post_init__(self):
        object.__setattr__(self, "doa_degrees", tuple(float(d) for d in self.doa_degrees))
        object.__setattr__(self, "weight_mean", complex(self.weight_mean))
        if self.frequency_source not in FREQUENCY_SOURCES:
            raise ScenarioError(f"unknown frequency source {self.frequency_source!r}")
        if self.prior not in PRIOR_KINDS:
            raise ScenarioError(f"unknown prior kind {self.prior!r}")
        if self.M < 2 or self.L < 1 or self.N < 1:
            raise ScenarioError(f"need M >= 2, L >= 1, N >= 1 (got M={self.M}, L={self.L}, N={self.N})")
        if not 0 <= self.K <= self.N:
            raise ScenarioError(f"K={self.K} must lie in 0..N={self.N}")
        if self.trials < 1:
            raise ScenarioError(f"trials must be positive, got {self.trials}")
        if not 1 <= self.groups <= self.L:
            raise ScenarioError(f"groups={self.groups} must lie in 1..L={self.L}")
        if self.weight_var < 0 or self.kappa0 < 0:
            raise ScenarioError("weight_var and kappa0 must be nonnegative")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ScenarioError(f"invalid SNR {self.snr_db!r}")
        if self.frequency_source == "von_mises_doa" and len(self.doa_degrees) != self.K:
            raise ScenarioError(f"K={self.K} but {len(self.doa_degrees)} DOA(s) given")
        if self.prior == "source" and self.frequency_source == "uniform":
            raise ScenarioError("prior 'source' needs a von Mises frequency source")
        if self.separation < 0 or (self.K and self.separation * self.K >= 2 * math.pi):
            raise ScenarioError(f"separation {self.separation:.4g} is infeasible for K={self.K}")

    @property
    def separation(self) -> float:
        return 2 * math.pi / self.N if self.min_separation is None else float(self.min_separation)

    def source_means(self) -> np.ndarray:
        """Mean directions the von Mises sources draw around."""
        if self.frequency_source == "von_mises_doa":
            return np.pi * np.sin(np.radians(self.doa_degrees))
        return np.array([(2 * i - 1 - self.N) / (self.N + 1) * math.pi for i in range(1, self.N + 1)])

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class GroundTruth:
    thetas: np.ndarray
    W: np.ndarray
    X: np.ndarray
    noise_variance: float
    snr_db: float
    trial: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.thetas)


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial)])))


def _is_separated(thetas: np.ndarray, separation: float) -> bool:
    return all(wrap_distance(a, b) > separation for a, b in itertools.combinations(thetas, 2))


def draw_frequencies(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """True frequencies, redrawn until every pair is more than ``separation`` apart."""
    if cfg.K == 0:
        return np.zeros(0)
    for _ in range(MAX_REJECTIONS):
        if cfg.frequency_source == "uniform":
            thetas = rng.uniform(-np.pi, np.pi, cfg.K)
        else:
            means = cfg.source_means()
            if cfg.frequency_source == "von_mises_grid":
                means = means[rng.choice(cfg.N, size=cfg.K, replace=False)]
            thetas = np.asarray(wrap_angle(rng.vonmises(means, cfg.kappa0)), dtype=float)
        if _is_separated(thetas, cfg.separation):
            return thetas
    raise ScenarioError(
        f"no frequencies {cfg.separation:.4g} rad apart after {MAX_REJECTIONS} draws (scenario {cfg.name!r})"
    )


def generate_trial(cfg: ScenarioConfig, rng: np.random.Generator, trial: int = 0) -> tuple[MeasurementSet, GroundTruth]:
    """Observation ``Y = A W + U`` with noise scaled to the exact SNR."""
    thetas = draw_frequencies(cfg, rng)
    scale = math.sqrt(cfg.weight_var / 2)
    W = cfg.weight_mean + scale * (rng.standard_normal((cfg.K, cfg.L)) + 1j * rng.standard_normal((cfg.K, cfg.L)))
    X = steering_matrix(thetas, cfg.M) @ W if cfg.K else np.zeros((cfg.M, cfg.L), dtype=np.complex128)
    U = (rng.standard_normal((cfg.M, cfg.L)) + 1j * rng.standard_normal((cfg.M, cfg.L))) / math.sqrt(2)

    signal = float(np.linalg.norm(X))
    if cfg.snr_db == math.inf:
        U = np.zeros_like(U)
        snr = math.inf
    elif signal == 0.0:
        snr = -math.inf
    else:
        U *= signal / (float(np.linalg.norm(U)) * 10 ** (cfg.snr_db / 20))
        snr = 20 * math.log10(signal / float(np.linalg.norm(U)))
    noise_variance = float(np.linalg.norm(U)) ** 2 / U.size
    truth = GroundTruth(thetas=thetas, W=W, X=X, noise_variance=noise_variance, snr_db=snr,
                        trial=trial, seed=cfg.rng_seed)
    return MeasurementSet(X + U), truth


def build_priors(cfg: ScenarioConfig) -> PriorConfig:
    if cfg.prior == "none":
        return PriorConfig.uninformative(cfg.N)
    if cfg.prior == "grid" or cfg.frequency_source == "von_mises_grid":
        return PriorConfig.grid(cfg.N, cfg.kappa0)
    informative = [VonMises(mu, cfg.kappa0) for mu in cfg.source_means()]
    return PriorConfig(tuple(informative) + tuple(VonMises.uniform() for _ in range(cfg.N - len(informative))))


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_BASE = ScenarioConfig(name="base", K=3, M=20, L=4, N=20)

PRESETS: dict[str, tuple[ScenarioConfig, dict[str, list]]] = {
    "snr-sweep": (dataclasses.replace(_BASE, name="snr-sweep"), {"snr_db": [-5.0, 0.0, 5.0, 10.0]}),
    "snapshots-m20": (dataclasses.replace(_BASE, name="snapshots-m20", snr_db=4.0), {"L": [1, 2, 4, 8]}),
    "snapshots-m30": (dataclasses.replace(_BASE, name="snapshots-m30", M=30, snr_db=0.0), {"L": [1, 2, 4, 8]}),
    "m-sweep": (dataclasses.replace(_BASE, name="m-sweep", snr_db=4.0), {"M": [10, 20, 30, 40]}),
    "order-grid-prior": (
        dataclasses.replace(_BASE, name="order-grid-prior", snr_db=4.0, frequency_source="von_mises_grid",
                            prior="grid", trials=1000),
        {"L": [1, 3, 5, 7]},
    ),
    "order-uninformative": (
        dataclasses.replace(_BASE, name="order-uninformative", snr_db=4.0, frequency_source="von_mises_grid",
                            prior="none", trials=1000),
        {"L": [1, 3, 5, 7]},
    ),
    "high-snr": (dataclasses.replace(_BASE, name="high-snr", L=8, snr_db=20.0), {"snr_db": [20.0]}),
    "prior-benefit": (
        dataclasses.replace(_BASE, name="prior-benefit", L=8, snr_db=0.0, frequency_source="von_mises_grid"),
        {"prior": ["none", "grid"]},
    ),
    "seq-snr": (dataclasses.replace(_BASE, name="seq-snr", L=8), {"groups": [1, 4, 8], "snr_db": [-5.0, 0.0, 5.0, 10.0]}),
    "seq-l": (dataclasses.replace(_BASE, name="seq-l", L=8, snr_db=4.0), {"L": [2, 4, 8], "groups": [1, 2]}),
    "doa": (
        dataclasses.replace(_BASE, name="doa", M=40, L=20, snr_db=10.0, frequency_source="von_mises_doa",
                            doa_degrees=(5.0, 9.0, 70.0), prior="source", min_separation=0.05),
        {"snr_db": [0.0, 5.0, 10.0, 15.0]},
    ),
}


def preset(name: str) -> tuple[ScenarioConfig, dict[str, list]]:
    try:
        cfg, sweep = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", key="preset") from None
    return cfg, {key: list(values) for key, values in sweep.items()}


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def _parse_float(text: str) -> float:
    return float(text.strip())


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in {"1", "true", "yes", "on"}:
        return True
    if value in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text: str):
    return None if text.strip().lower() in {"", "none", "default"} else float(text)


_PARSERS = {
    "name": str,
    "K": int,
    "M": int,
    "L": int,
    "N": int,
    "snr_db": _parse_float,
    "min_separation": _parse_optional_float,
    "weight_mean": lambda text: complex(text.replace(" ", "")),
    "weight_var": float,
    "frequency_source": str,
    "kappa0": float,
    "doa_degrees": lambda text: tuple(float(v) for v in text.split(",") if v.strip()),
    "prior": str,
    "trials": int,
    "rng_seed": int,
    "groups": int,
    "carry_hyperparams": _parse_bool,
}
# doa_degrees is itself a list and cannot be swept.
_SWEEPABLE = set(_PARSERS) - {"name", "doa_degrees"}


def _parse(key: str, text: str, config_key: str):
    try:
        return _PARSERS[key](text.strip())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {config_key!r}: {exc}", key=config_key) from None


def scenario_from_config(entries: dict[str, str]) -> tuple[ScenarioConfig, dict[str, list]]:
    """Scenario and sweep from flat config entries.

    ``preset = name`` starts from a preset (including its sweep); plain
    keys override scenario fields and ``sweep.<field> = a, b, c`` sets the
    values swept over.  Unknown keys raise :class:`ConfigError`.
    """
    entries = dict(entries)
    if "preset" in entries:
        cfg, sweep = preset(entries.pop("preset"))
    else:
        cfg, sweep = ScenarioConfig(), {}
    changes = {}
    for key, text in entries.items():
        if key.startswith("sweep."):
            name = key[len("sweep."):]
            if name not in _SWEEPABLE:
                raise ConfigError(f"unknown sweep field {name!r}", key=key)
            sweep[name] = [_parse(name, part, key) for part in text.split(",") if part.strip()]
        elif key in _PARSERS:
            changes[key] = _parse(key, text, key)
        else:
            raise ConfigError(f"unknown config key {key!r}", key=key)
    try:
        cfg = dataclasses.replace(cfg, **changes)
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from None
    # Overridden fields drop out of a preset sweep unless the file sweeps them.
    for key in changes:
        if f"sweep.{key}" not in entries:
            sweep.pop(key, None)
    return cfg, sweep


def sweep_points(sweep: dict[str, list]) -> list[dict]:
    """Cartesian grid of the sweep, first key varying slowest; empty sweep gives no points."""
    if not sweep or any(not values for values in sweep.values()):
        return []
    keys = list(sweep)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(sweep[key] for key in keys))]


def apply_point(cfg: ScenarioConfig, point: dict) -> ScenarioConfig:
    return dataclasses.replace(cfg, **point)
