"""Estimation configuration and the flat key-value config file format.

Configuration lives in a single text artifact (``key = value`` lines, ``#``
comments) so that every run is reproducible from the file alone; environment
variables are deliberately not consulted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .sieve import SieveBasis, make_basis, quantile_knots

__all__ = ["BasisSpec", "EstimationConfig", "ConfigError", "parse_config", "build_basis_for"]


class ConfigError(ValueError):
    """Unusable configuration (unknown key, bad value, missing file)."""


@dataclass(frozen=True)
class BasisSpec:
    """Declarative basis choice; concrete bases are built per design matrix.

    ``knots`` counts interior knots; with ``placement='quantile'`` they sit at
    equally spaced sample quantiles of the data the basis is built for.
    """

    kind: str = "bspline"
    degree: int = 3
    knots: int = 0
    placement: str = "quantile"  # quantile | uniform

    def describe(self) -> str:
        if self.kind == "power":
            return f"power:{self.degree}"
        return f"bspline:{self.degree}:{self.knots}:{self.placement}"


def build_basis_for(spec: BasisSpec, data: np.ndarray, box: np.ndarray | None = None) -> SieveBasis:
    """Instantiate a basis on the box spanned by ``data`` (or an explicit box)."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if box is None:
        box = np.column_stack([data.min(axis=0), data.max(axis=0)])
    if spec.kind == "power":
        return make_basis("power", data.shape[1], spec.degree, box=box)
    if spec.knots > 0 and spec.placement == "quantile":
        knots = quantile_knots(data, spec.knots)
    else:
        knots = spec.knots
    return make_basis("bspline", data.shape[1], spec.degree, box=box, knots=knots)


@dataclass
class EstimationConfig:
    """Everything the estimation pipeline needs besides the data."""

    provider: str = "residual"  # residual | ar1
    trim: str = "box"  # box | smooth
    sigma: float = 0.1  # smooth-trim width as a fraction of the box width
    delta0: float | None = None  # None -> 1% determinant quantile, floored
    eig_floor: float = 1e-4
    first_stage: BasisSpec = field(default_factory=lambda: BasisSpec("bspline", 3, 2))
    second_stage: BasisSpec = field(default_factory=lambda: BasisSpec("bspline", 3, 0))
    inference: str = "plugin"  # plugin | bootstrap | none
    bootstrap_B: int = 200
    bootstrap_seed: int = 0
    subset_average: bool = False
    threads: int = 1
    cv_candidates: tuple = ()

    def without_inference(self) -> "EstimationConfig":
        return replace(self, inference="none")

    def to_dict(self) -> dict:
        return {
            "controls.provider": self.provider,
            "controls.trim": self.trim,
            "controls.sigma": self.sigma,
            "delta0": "auto" if self.delta0 is None else self.delta0,
            "eig_floor": self.eig_floor,
            "first_stage": self.first_stage.describe(),
            "second_stage": self.second_stage.describe(),
            "inference": self.inference,
            "bootstrap.B": self.bootstrap_B,
            "bootstrap.seed": self.bootstrap_seed,
            "subset_average": self.subset_average,
            "threads": self.threads,
            "cv.candidates": [s.describe() for s in self.cv_candidates],
        }


def _parse_basis(token: str) -> BasisSpec:
    parts = token.strip().split(":")
    kind = parts[0]
    if kind not in ("power", "bspline"):
        raise ConfigError(f"unknown basis kind {kind!r}")
    try:
        degree = int(parts[1]) if len(parts) > 1 else 3
        knots = int(parts[2]) if len(parts) > 2 else 0
    except ValueError as exc:
        raise ConfigError(f"malformed basis spec {token!r}") from exc
    placement = parts[3] if len(parts) > 3 else "quantile"
    if placement not in ("quantile", "uniform"):
        raise ConfigError(f"unknown knot placement {placement!r}")
    return BasisSpec(kind=kind, degree=degree, knots=knots, placement=placement)


def _parse_bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def parse_config(path) -> EstimationConfig:
    """Read the flat key-value config file; unknown keys are errors."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = EstimationConfig()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "controls.provider":
                if value not in ("residual", "ar1"):
                    raise ConfigError(f"unknown provider {value!r}")
                cfg.provider = value
            elif key == "controls.trim":
                if value not in ("box", "smooth"):
                    raise ConfigError(f"unknown trim mode {value!r}")
                cfg.trim = value
            elif key == "controls.sigma":
                cfg.sigma = float(value)
                if cfg.sigma <= 0:
                    raise ConfigError("controls.sigma must be > 0")
            elif key == "delta0":
                cfg.delta0 = None if value == "auto" else float(value)
            elif key == "eig_floor":
                cfg.eig_floor = float(value)
            elif key.startswith("first_stage"):
                cfg.first_stage = _update_basis(cfg.first_stage, key, value)
            elif key.startswith("second_stage"):
                cfg.second_stage = _update_basis(cfg.second_stage, key, value)
            elif key == "inference":
                if value not in ("plugin", "bootstrap", "none"):
                    raise ConfigError(f"unknown inference mode {value!r}")
                cfg.inference = value
            elif key == "bootstrap.B":
                cfg.bootstrap_B = int(value)
            elif key == "bootstrap.seed":
                cfg.bootstrap_seed = int(value)
            elif key == "subset_average":
                cfg.subset_average = _parse_bool(value)
            elif key == "threads":
                cfg.threads = int(value)
            elif key == "cv.candidates":
                cfg.cv_candidates = tuple(
                    _parse_basis(tok) for tok in value.split(",") if tok.strip()
                )
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return cfg


def _update_basis(spec: BasisSpec, key: str, value: str) -> BasisSpec:
    if key.endswith((".kind", ".degree", ".knots", ".placement")):
        fieldname = key.rsplit(".", 1)[1]
        if fieldname == "kind" and value not in ("power", "bspline"):
            raise ConfigError(f"unknown basis kind {value!r}")
        if fieldname in ("degree", "knots"):
            return replace(spec, **{fieldname: int(value)})
        return replace(spec, **{fieldname: value})
    if key in ("first_stage", "second_stage"):
        return _parse_basis(value)
    raise ConfigError(f"unknown config key {key!r}")
