"""Coordinated cyber-physical attack construction.

A CCPA disconnects lines and injects false data so that the defender does
not notice. The attacker works from ``attacker_view``, which is the grid as
known before any MTD reconfiguration; the physics plays out on the true grid.
All attack vectors come from noiseless model quantities. Sensor noise is
added once, on the defender side, in :func:`observe`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .case_model import DEFAULT_SIGMA, GridCase, jacobian, parse_case, to_native
from .errors import ConfigError
from .powerflow import InjectionVector, StateVector, apply_outage, solve_dc


class Variant(str, Enum):
    PARTIAL = "partial"
    EXTRA = "extra"
    FULL = "full"


@dataclass(frozen=True, eq=False)
class AttackScenario:
    outage_lines: frozenset[int]
    variant: Variant
    attacker_view: GridCase
    c: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "outage_lines", frozenset(int(l) for l in self.outage_lines))
        object.__setattr__(self, "variant", Variant(self.variant))
        if (self.variant is Variant.EXTRA) != (self.c is not None):
            raise ConfigError("distortion vector c is required for extra CCPA and only for it")
        if self.c is not None:
            c = np.array(self.c, dtype=float)
            if c.shape != (self.attacker_view.n_states,):
                raise ConfigError(f"c must have length {self.attacker_view.n_states}")
            c.setflags(write=False)
            object.__setattr__(self, "c", c)

    def to_json(self) -> str:
        return json.dumps(
            {
                "outage_lines": sorted(self.outage_lines),
                "variant": self.variant.value,
                "c": None if self.c is None else self.c.tolist(),
                "attacker_view": json.loads(to_native(self.attacker_view)),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> AttackScenario:
        doc = json.loads(text)
        return cls(
            outage_lines=frozenset(doc["outage_lines"]),
            variant=Variant(doc["variant"]),
            attacker_view=parse_case(json.dumps(doc["attacker_view"])),
            c=None if doc["c"] is None else np.array(doc["c"]),
        )


@dataclass(frozen=True, eq=False)
class ObservedSample:
    z_obs: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)


def sample_distortion(n_states: int, rng, support=(1, 4), scale=0.1) -> np.ndarray:
    """Sparse estimation distortion for extra CCPA: a few buses, U(-scale, scale) rad."""
    lo, hi = support
    k = int(rng.integers(lo, hi + 1))
    c = np.zeros(n_states)
    idx = rng.choice(n_states, size=min(k, n_states), replace=False)
    c[idx] = rng.uniform(-scale, scale, size=idx.size)
    return c


def labels(grid: GridCase, outage_lines) -> np.ndarray:
    """y_l = 1 iff line l is in outage."""
    y = np.zeros(grid.n_branch)
    y[[l - 1 for l in outage_lines]] = 1.0
    return y


def post_physical_measurements(
    defender_grid: GridCase, outage, loads: InjectionVector
) -> tuple[np.ndarray, StateVector]:
    """Noiseless ``z_p = H_p theta_p`` after the lines in ``outage`` trip."""
    post = apply_outage(defender_grid, outage)
    theta_p = solve_dc(post, loads)
    return jacobian(post) @ theta_p.theta, theta_p


@dataclass(frozen=True, eq=False)
class _AttackerModel:
    H: np.ndarray
    H_p: np.ndarray
    theta: StateVector
    theta_p: StateVector

    @property
    def delta_H(self) -> np.ndarray:
        return self.H_p - self.H


def _attacker_model(scenario: AttackScenario, loads: InjectionVector) -> _AttackerModel:
    view = scenario.attacker_view
    post = apply_outage(view, scenario.outage_lines)
    return _AttackerModel(
        H=jacobian(view),
        H_p=jacobian(post),
        theta=solve_dc(view, loads),
        theta_p=solve_dc(post, loads),
    )


def build_partial(scenario: AttackScenario, loads: InjectionVector) -> np.ndarray:
    """a_c = -dH theta_p, from the attacker's view only."""
    am = _attacker_model(scenario, loads)
    return -am.delta_H @ am.theta_p.theta


def build_extra(scenario: AttackScenario, loads: InjectionVector) -> np.ndarray:
    """a = -dH theta_p + H c."""
    am = _attacker_model(scenario, loads)
    c = scenario.c if scenario.c is not None else np.zeros(am.H.shape[1])
    return -am.delta_H @ am.theta_p.theta + am.H @ c


def build_full(scenario: AttackScenario, loads: InjectionVector) -> np.ndarray:
    """a_full = z - z_p with both sides recomputed on the attacker's view."""
    am = _attacker_model(scenario, loads)
    return am.H @ am.theta.theta - am.H_p @ am.theta_p.theta


_BUILDERS = {Variant.PARTIAL: build_partial, Variant.EXTRA: build_extra, Variant.FULL: build_full}


def attack_vector(scenario: AttackScenario, loads: InjectionVector) -> np.ndarray:
    return _BUILDERS[scenario.variant](scenario, loads)


def observe(
    true_grid: GridCase,
    scenario: AttackScenario,
    loads: InjectionVector,
    sigma=DEFAULT_SIGMA,
    rng=None,
    noisy: bool = True,
    *,
    mtd_active: bool | None = None,
    seed=None,
) -> ObservedSample:
    """What the defender sees: true post-outage measurements plus the attack.

    ``true_grid`` is the post-MTD grid when MTD is active. The attack is
    built from ``scenario.attacker_view``, so it only cancels exactly when
    the two coincide.
    """
    z_p, _ = post_physical_measurements(true_grid, scenario.outage_lines, loads)
    z = z_p + attack_vector(scenario, loads)
    if noisy:
        if rng is None:
            raise ValueError("noisy observation needs an rng")
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), z.shape)
        z = z + rng.normal(0.0, sig)
    if mtd_active is None:
        mtd_active = true_grid != scenario.attacker_view
    return ObservedSample(
        z_obs=z,
        y=labels(true_grid, scenario.outage_lines),
        meta={"variant": scenario.variant.value, "mtd_active": bool(mtd_active), "seed": seed},
    )
