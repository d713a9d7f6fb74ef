"""Experiment configuration: JSON schema, validation, and defaults.

A configuration fully determines a run; every tolerance used by the
verification suite lives here (never hard-coded in checks), so the
convergence studies behind the defaults can be re-run with other values.

Shape:

{
  "domain": {"kind": "interval", "a": 0.0, "b": 1.0,
             "rho": {"a": 0.2, "b": 0.8}},
  "u": 0.5,
  "phi": {"a": 0.0, "b": 1.0},
  "grid": {"nodes": 64, "halfline_cutoff": 10.0},
  "mc": {"n_samples": 100000, "dt": 1e-4, "horizon": null, "seed": 20240901},
  "expansion": {"order": 2, "coarse_factor": 10},
  "quadrature": {"nodes_per_axis": 24, "alpha_target": 1e-6},
  "tolerances": { ... defaults below ... },
  "output_dir": "out"
}

``phi`` keys mirror the rho keys ("a"/"b" for the interval, "0" for the
half line); ``mc.horizon`` null means the 1e-4 survival time of the
tilted measure.  Parsing then re-serializing a config is idempotent.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from .domains import DomainError, HalfLineDomain, domain_from_json, domain_to_json
from .expansion import MCConfig

__all__ = ["ConfigError", "ExperimentConfig", "DEFAULT_TOLERANCES"]


class ConfigError(ValueError):
    """Invalid configuration; the message carries the offending field path."""


# tolerances of the verification checks, keyed by criterion
DEFAULT_TOLERANCES = {
    "harmonicity_residual": 1e-8,        # P1: second differences of beta, PDE residual
    "alpha_mc_n_se": 3.0,                # P2: MC survival vs closed form
    "normalization_max_err": 1e-8,       # P3: Tk 1 = alpha at the nodes
    "semigroup_max_err": 1e-7,           # P4: composition law
    "clark_relative_residual": 0.01,     # P5: residual / E f^2
    "clark_halving_range": [1.6, 2.6],   # P5: RMS residual ratio, dt -> dt/4
    "eq1_abs_slack": 1e-4,               # P6: |LHS-RHS| <= 3 SE + slack
    "parseval_n_se": 3.0,                # P7
    "parseval_rel_allowance": 0.10,      # P7: discretization allowance on the tail
    "orthogonality_n_se": 3.0,           # P8
    "orthogonality_bias_allowance": 0.05,  # P8: O(dt) allowance, scaled by term sizes
    "isometry_rel_allowance": 0.05,      # P8: O(dt) allowance on E I1^2
    "wiener_n_se": 3.0,                  # P9
    "wiener_gof_level": 0.01,            # P9: KS level
    "gradient_fd_tol": 1e-6,             # P10
}


@dataclass(frozen=True)
class GridSettings:
    nodes: int = 64
    halfline_cutoff: float = 10.0


@dataclass(frozen=True)
class QuadratureSettings:
    nodes_per_axis: int = 24
    alpha_target: float = 1e-6


@dataclass(frozen=True)
class ExperimentConfig:
    domain: dict
    u: float
    phi: dict
    mc_n_samples: int = 100_000
    mc_dt: float = 1e-4
    mc_horizon: float | None = None
    mc_seed: int = 20240901
    expansion_order: int = 2
    coarse_factor: int = 10
    grid: GridSettings = field(default_factory=GridSettings)
    quadrature: QuadratureSettings = field(default_factory=QuadratureSettings)
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    output_dir: str = "out"

    def __post_init__(self):
        model = self.model()
        try:
            model._require_interior(self.u)
        except DomainError as err:
            raise ConfigError(f"u: {err}") from None
        if self.expansion_order > 3:
            raise ConfigError("expansion.order: orders above 3 are unsupported")
        if self.expansion_order < 0:
            raise ConfigError("expansion.order: must be nonnegative")
        if self.mc_n_samples < 2:
            raise ConfigError("mc.n_samples: need at least 2 samples")
        if self.mc_dt <= 0:
            raise ConfigError("mc.dt: must be positive")
        if self.mc_horizon is not None and self.mc_horizon < self.mc_dt:
            raise ConfigError("mc.horizon: must cover at least one step")
        if self.grid.nodes < 8:
            raise ConfigError("grid.nodes: need at least 8 quadrature nodes")
        self.boundary_phi()  # validates phi coverage

    # -- derived objects -------------------------------------------------

    def model(self):
        try:
            return domain_from_json(self.domain)
        except DomainError as err:
            raise ConfigError(f"domain: {err}") from None

    def boundary_phi(self):
        """phi as {boundary point: value}."""
        model = self.model()
        pts = model.boundary_points()
        keymap = (
            {"0": pts[0]}
            if isinstance(model, HalfLineDomain)
            else {"a": pts[0], "b": pts[1]}
        )
        out = {}
        for key, pt in keymap.items():
            if key not in self.phi:
                raise ConfigError(f'phi.{key}: missing boundary value (need keys {list(keymap)})')
            out[pt] = float(self.phi[key])
        return out

    def mc_config(self, n_samples=None, dt=None, seed=None) -> MCConfig:
        return MCConfig(
            n_samples=int(n_samples if n_samples is not None else self.mc_n_samples),
            dt=float(dt if dt is not None else self.mc_dt),
            horizon=self.mc_horizon,
            seed=int(seed if seed is not None else self.mc_seed),
            coarse_factor=self.coarse_factor,
            grid_nodes=self.grid.nodes,
            halfline_cutoff=self.grid.halfline_cutoff,
        )

    def tolerance(self, name):
        try:
            return self.tolerances[name]
        except KeyError:
            raise ConfigError(f"tolerances.{name}: unknown tolerance") from None

    # -- (de)serialization ------------------------------------------------

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("config: expected a JSON object")
        for key in ("domain", "u", "phi"):
            if key not in obj:
                raise ConfigError(f"{key}: missing required field")
        mc = obj.get("mc", {})
        if not isinstance(mc, dict):
            raise ConfigError("mc: expected an object")
        exp = obj.get("expansion", {})
        grid = obj.get("grid", {})
        quad = obj.get("quadrature", {})
        tol = dict(DEFAULT_TOLERANCES)
        tol.update(obj.get("tolerances", {}))
        try:
            return cls(
                domain=obj["domain"],
                u=float(obj["u"]),
                phi=dict(obj["phi"]),
                mc_n_samples=int(mc.get("n_samples", 100_000)),
                mc_dt=float(mc.get("dt", 1e-4)),
                mc_horizon=None if mc.get("horizon") is None else float(mc["horizon"]),
                mc_seed=int(mc.get("seed", 20240901)),
                expansion_order=int(exp.get("order", 2)),
                coarse_factor=int(exp.get("coarse_factor", 10)),
                grid=GridSettings(
                    nodes=int(grid.get("nodes", 64)),
                    halfline_cutoff=float(grid.get("halfline_cutoff", 10.0)),
                ),
                quadrature=QuadratureSettings(
                    nodes_per_axis=int(quad.get("nodes_per_axis", 24)),
                    alpha_target=float(quad.get("alpha_target", 1e-6)),
                ),
                tolerances=tol,
                output_dir=str(obj.get("output_dir", "out")),
            )
        except (TypeError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(f"config: {err}") from None

    def to_dict(self):
        return {
            "domain": domain_to_json(self.model()),
            "u": self.u,
            "phi": dict(self.phi),
            "grid": asdict(self.grid),
            "mc": {
                "n_samples": self.mc_n_samples,
                "dt": self.mc_dt,
                "horizon": self.mc_horizon,
                "seed": self.mc_seed,
            },
            "expansion": {"order": self.expansion_order, "coarse_factor": self.coarse_factor},
            "quadrature": asdict(self.quadrature),
            "tolerances": dict(self.tolerances),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path}: invalid JSON ({err})") from None
        return cls.from_dict(obj)

    def write_json(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def default_acceptance_config(**overrides):
    """The default desk-scale scenario: interval (0,1), tilted boundary weights,
    start at the midpoint, indicator boundary data at the right endpoint."""
    base = {
        "domain": {"kind": "interval", "a": 0.0, "b": 1.0, "rho": {"a": 0.2, "b": 0.8}},
        "u": 0.5,
        "phi": {"a": 0.0, "b": 1.0},
    }
    base.update(overrides)
    return ExperimentConfig.from_dict(base)
