"""Named coefficient sets, usable from run configs."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .coefficients import (CoefficientSet, InsuranceScenario, Lipschitz, constant_core,
                           constant_process, make_insurance_scenario)
from .errors import ConfigError


class UnknownScenario(ConfigError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    factory: Callable
    description: str
    default_lattice: dict = field(default_factory=dict)


_REGISTRY: dict = {}


def register_scenario(name: str, factory: Callable, description: str,
                      default_lattice: dict | None = None, overwrite: bool = False):
    """Register ``factory(**params) -> CoefficientSet`` under ``name``."""
    if name in _REGISTRY and not overwrite:
        raise ValueError(f"scenario {name!r} already registered")
    _REGISTRY[name] = Scenario(name, factory, description, dict(default_lattice or {}))


def list_scenarios():
    """``(name, description)`` pairs in registration order."""
    return [(s.name, s.description) for s in _REGISTRY.values()]


def get_scenario(name: str) -> Scenario:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {name!r}; known: {sorted(_REGISTRY)}") from None


def make_scenario(name: str, **params) -> CoefficientSet:
    try:
        return get_scenario(name).factory(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for scenario {name!r}: {exc}") from None


def trivial(xi_scale: float = 1.0) -> CoefficientSet:
    return CoefficientSet(
        lower_core=constant_core(-10.0), upper_core=constant_core(10.0),
        floor=constant_process(-5.0), cap=constant_process(5.0),
        terminal=lambda s: np.clip(xi_scale * s.brownian, -5.0, 5.0),
        law_dependent=False, name="trivial")


def binding_lower(level: float = 0.5, coupling: float = 0.0, horizon: float = 1.0) -> CoefficientSet:
    """``xi = B_T``; lower core ``level + coupling * mean`` is active before the horizon."""

    def floor(t, s):
        return np.full(np.shape(s.brownian), 10.0 if t < horizon else -10.0)

    return CoefficientSet(
        lower_core=lambda t, y, mu: level + coupling * mu.mean() + 0.0 * np.asarray(y),
        upper_core=constant_core(10.0), floor=floor, cap=constant_process(10.0),
        terminal=lambda s: np.asarray(s.brownian, dtype=float),
        lipschitz=Lipschitz(gamma2=abs(coupling)),
        law_dependent=coupling != 0.0, name="binding_lower")


def mean_ode(level: float = 1.0) -> CoefficientSet:
    """``f = mean(mu)``, deterministic terminal: ``y(0) = level * e^T`` in the limit."""
    return CoefficientSet(
        driver=lambda t, y, z, u, mu: mu.mean() + 0.0 * np.asarray(y),
        lower_core=constant_core(-1e9), upper_core=constant_core(1e9),
        floor=constant_process(0.0), cap=constant_process(0.0),
        terminal=lambda s: np.full(np.shape(s.brownian), float(level)),
        lipschitz=Lipschitz(driver=1.0), name="mean_ode")


def insurance(**params) -> CoefficientSet:
    names = {f.name for f in fields(InsuranceScenario)}
    unknown = set(params) - names
    if unknown:
        raise ConfigError(f"unknown insurance parameters {sorted(unknown)}")
    return make_insurance_scenario(InsuranceScenario(**params))


def chaos_meanfield(drift: float = 0.1, drift_coupling: float = 0.3, coupling: float = 0.2,
                    width: float = 0.3, xi_vol: float = 1.0, jump_weight: float = 0.5,
                    horizon: float = 1.0) -> CoefficientSet:
    """Mean-coupled driver and obstacles with a nondegenerate terminal law.

    Before the horizon ``h1 = min(-width + coupling mean, 0)`` and
    ``h2 = max(width + coupling mean, 0)``; the terminal value
    ``xi_vol B_T + jump_weight * jump level`` is clipped to ``[-1, 1]``.
    """

    def floor(t, s):
        return np.full(np.shape(s.brownian), 0.0 if t < horizon else -1.0)

    def cap(t, s):
        return np.full(np.shape(s.brownian), 0.0 if t < horizon else 1.0)

    return CoefficientSet(
        driver=lambda t, y, z, u, mu: drift + drift_coupling * mu.mean() + 0.0 * np.asarray(y),
        lower_core=lambda t, y, mu: -width + coupling * mu.mean() + 0.0 * np.asarray(y),
        upper_core=lambda t, y, mu: width + coupling * mu.mean() + 0.0 * np.asarray(y),
        floor=floor, cap=cap,
        terminal=lambda s: np.clip(xi_vol * s.brownian + jump_weight * s.jump_level, -1.0, 1.0),
        lipschitz=Lipschitz(driver=abs(drift_coupling), gamma2=abs(coupling), kappa2=abs(coupling)),
        name="chaos_meanfield")


def affine(drift: float = 0.0, drift_y: float = 0.0, drift_mean: float = 0.0,
           lower=(-1e6, 0.0, 0.0), upper=(1e6, 0.0, 0.0), floor: float = -1e6, cap: float = 1e6,
           terminal=(0.0, 1.0, 0.0), horizon: float = 1.0) -> CoefficientSet:
    """Inline affine coefficients.

    ``f = drift + drift_y y + drift_mean mean``; obstacle cores
    ``a + b y + c mean`` from the ``(a, b, c)`` triples ``lower`` and
    ``upper``; constant floor and cap; terminal
    ``x0 + x1 B_T + x2 jump level`` clipped to ``[floor, cap]``.
    """
    l0, ly, lm = map(float, lower)
    u0, uy, um = map(float, upper)
    x0, xb, xj = map(float, terminal)

    def driver(t, y, z, u, mu):
        return drift + drift_y * np.asarray(y) + drift_mean * mu.mean()

    return CoefficientSet(
        driver=driver,
        lower_core=lambda t, y, mu: l0 + ly * np.asarray(y) + lm * mu.mean(),
        upper_core=lambda t, y, mu: u0 + uy * np.asarray(y) + um * mu.mean(),
        floor=constant_process(floor), cap=constant_process(cap),
        terminal=lambda s: np.clip(x0 + xb * s.brownian + xj * s.jump_level, floor, cap),
        lipschitz=Lipschitz(driver=abs(drift_y) + abs(drift_mean), gamma1=abs(ly), gamma2=abs(lm),
                            kappa1=abs(uy), kappa2=abs(um)),
        law_dependent=any(v != 0.0 for v in (drift_mean, lm, um)), name="affine")


register_scenario("trivial", trivial, "zero driver, inactive obstacles: value is E[xi]",
                  {"horizon": 1.0, "steps": 3})
register_scenario("binding_lower", binding_lower,
                  "xi = B_T with a lower obstacle that binds at the root (optionally mean-shifted)",
                  {"horizon": 1.0, "steps": 1})
register_scenario("mean_ode", mean_ode,
                  "driver equal to the mean of the law, deterministic terminal (ODE oracle)",
                  {"horizon": 1.0, "steps": 64, "backend": "paths", "n_paths": 16})
register_scenario("insurance", insurance,
                  "participating life-insurance reserve with mean-field bonus and fees",
                  {"horizon": 1.0, "steps": 4})
register_scenario("chaos_meanfield", chaos_meanfield,
                  "mean-coupled driver and obstacles for propagation-of-chaos runs",
                  {"horizon": 1.0, "steps": 4, "backend": "paths", "n_paths": 256})
register_scenario("affine", affine,
                  "inline affine driver and obstacle cores given in the run config",
                  {"horizon": 1.0, "steps": 3})
