"""Experiment configuration files.

Grammar: one ``key = value`` per line; ``#`` starts a comment; list values
are comma separated, and an integer list entry ``a..b`` expands to the
inclusive range. Unknown keys and repeated keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .env import check_supercritical, normalize_law
from .errors import ConfigError, ParameterError

EXPERIMENTS = (
    "theta",
    "density-scaling",
    "partition",
    "cell",
    "corrector",
    "flux-norm",
    "kernel",
    "walks",
    "lclt",
    "rate",
    "green",
    "dirichlet",
    "report-all",
)

__all__ = ["EXPERIMENTS", "ExperimentConfig", "parse_config", "load_config"]


@dataclass
class ExperimentConfig:
    """Parameters of one experiment run.

    Optional numeric fields left as ``None`` are filled by the experiment
    (for example ``sigma2`` and ``theta`` are estimated when absent).
    """

    experiment: str = ""
    d: int = 2
    p: float = 0.7
    lam: float = 1.0
    law: str = "bernoulli-unit"
    box: int = 81
    seeds: list = field(default_factory=lambda: [0])
    n_samples: int = 20
    times: list = field(default_factory=lambda: [250.0, 500.0, 1000.0, 2000.0, 4000.0])
    levels: list = field(default_factory=lambda: [2, 3, 4])
    radii: list = field(default_factory=lambda: [9.0, 27.0, 81.0])
    delta: float = 0.4
    kappa: Optional[float] = None
    tol: float = 1e-12
    sigma2: Optional[float] = None
    theta: Optional[float] = None
    y: Optional[list] = None
    q: float = 2.0
    stride: Optional[int] = None
    walk_type: str = "VSRW"
    n_replicas: int = 2000
    quadrature: str = "trapezoid"
    t_max: Optional[float] = None
    annulus: list = field(default_factory=lambda: [20.0, 40.0])
    boundary: str = "periodic"
    n_steps: int = 64
    force: bool = False
    plots: bool = True
    output: str = "out"

    def to_text(self) -> str:
        """Canonical ``key = value`` rendering (parses back to an equal config)."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            key = _ATTR_TO_KEY.get(f.name, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, list):
                s = ", ".join(_fmt(x) for x in v)
            else:
                s = _fmt(v)
            lines.append(f"{key} = {s}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


_KEY_TO_ATTR = {"lambda": "lam"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}

_INT = {"d", "box", "n_samples", "stride", "n_replicas", "n_steps"}
_FLOAT = {"p", "lam", "delta", "kappa", "tol", "sigma2", "theta", "q", "t_max"}
_STR = {"experiment", "law", "walk_type", "quadrature", "boundary", "output"}
_BOOL = {"force", "plots"}
_INT_LIST = {"seeds", "levels", "y"}
_FLOAT_LIST = {"times", "radii", "annulus"}


def _parse_int(s: str) -> int:
    return int(s.strip())


def _parse_int_list(s: str) -> list:
    out = []
    for tok in s.split(","):
        tok = tok.strip()
        if not tok:
            raise ValueError("empty list entry")
        if ".." in tok:
            a, b = tok.split("..", 1)
            a, b = int(a), int(b)
            if b < a:
                raise ValueError(f"empty range {tok}")
            out.extend(range(a, b + 1))
        else:
            out.append(int(tok))
    return out


def _parse_float_list(s: str) -> list:
    out = []
    for tok in s.split(","):
        if not tok.strip():
            raise ValueError("empty list entry")
        out.append(float(tok))
    return out


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse configuration text.

    Raises
    ------
    ConfigError
        Syntax errors, unknown or repeated keys, bad values (with the line
        number) and invalid combinations.
    """
    cfg = ExperimentConfig()
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        attr = _KEY_TO_ATTR.get(key, key)
        if attr not in _INT | _FLOAT | _STR | _BOOL | _INT_LIST | _FLOAT_LIST:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if attr in seen:
            raise ConfigError(f"key {key!r} already set on line {seen[attr]}", lineno)
        seen[attr] = lineno
        if not val:
            raise ConfigError(f"empty value for {key!r}", lineno)
        try:
            if attr in _INT:
                v = _parse_int(val)
            elif attr in _FLOAT:
                v = float(val)
            elif attr in _BOOL:
                v = _parse_bool(val)
            elif attr in _INT_LIST:
                v = _parse_int_list(val)
            elif attr in _FLOAT_LIST:
                v = _parse_float_list(val)
            else:
                v = val
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno) from None
        setattr(cfg, attr, v)
    _validate(cfg, seen)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text)


def _validate(cfg: ExperimentConfig, seen: dict) -> None:
    def fail(msg, key):
        raise ConfigError(msg, seen.get(key))

    if not cfg.experiment:
        raise ConfigError("missing required key 'experiment'")
    if cfg.experiment not in EXPERIMENTS:
        fail(f"unknown experiment {cfg.experiment!r}; choose from {', '.join(EXPERIMENTS)}", "experiment")
    if cfg.d not in (2, 3):
        fail("d must be 2 or 3", "d")
    if not 0 < cfg.p <= 1:
        fail("p must lie in (0, 1]", "p")
    try:
        check_supercritical(cfg.p, cfg.d, cfg.force)
    except ParameterError as exc:
        fail(f"{exc} (set force = true)", "p")
    if not 0 < cfg.lam <= 1:
        fail("lambda must lie in (0, 1]", "lam")
    try:
        cfg.law = normalize_law(cfg.law)
    except ParameterError as exc:
        fail(str(exc), "law")
    if cfg.box < 3:
        fail("box must be at least 3", "box")
    if not cfg.seeds or any(s < 0 for s in cfg.seeds):
        fail("seeds must be nonnegative integers", "seeds")
    if cfg.n_samples < 1:
        fail("n_samples must be positive", "n_samples")
    if any(t <= 0 for t in cfg.times) or any(b <= a for a, b in zip(cfg.times, cfg.times[1:])):
        fail("times must be positive and strictly increasing", "times")
    if any(r <= 0 for r in cfg.radii):
        fail("radii must be positive", "radii")
    if any(m < 1 for m in cfg.levels):
        fail("levels must be positive", "levels")
    if cfg.experiment in ("cell", "report-all") and min(cfg.levels) < 2:
        fail("cell problems need levels >= 2", "levels")
    if not 0 < cfg.delta < 0.5:
        fail("delta must lie in (0, 1/2)", "delta")
    if cfg.kappa is not None and not 0 < cfg.kappa < 1:
        fail("kappa must lie in (0, 1)", "kappa")
    if cfg.tol <= 0:
        fail("tol must be positive", "tol")
    if cfg.y is not None and len(cfg.y) != cfg.d:
        fail(f"y needs {cfg.d} coordinates", "y")
    if cfg.walk_type not in ("VSRW", "CSRW", "SRW"):
        fail("walk_type must be VSRW, CSRW or SRW", "walk_type")
    if cfg.quadrature not in ("trapezoid", "log-trapezoid"):
        fail("quadrature must be trapezoid or log-trapezoid", "quadrature")
    if cfg.boundary not in ("periodic", "dirichlet"):
        fail("boundary must be periodic or dirichlet", "boundary")
    if len(cfg.annulus) != 2 or not 0 < cfg.annulus[0] < cfg.annulus[1]:
        fail("annulus needs two increasing positive radii", "annulus")
    if cfg.q < 1:
        fail("q must be >= 1", "q")
    if cfg.stride is not None and cfg.stride < 1:
        fail("stride must be positive", "stride")
    if cfg.n_steps < 1 or cfg.n_replicas < 1:
        fail("n_steps and n_replicas must be positive", "n_steps" if cfg.n_steps < 1 else "n_replicas")
