"""Gray-box thermal models of the building.

Two linear RC models share one parameter set:

* an aggregate model with three states (battery energy, mean building-zone
  temperature, mean server-zone temperature), used by the upper control layer,
* a 9-zone network model, used by the lower control layer.

Both are built in continuous time and sampled exactly with zero-order hold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.linalg import expm

N_ZONES = 9
BUILDING_ZONES = tuple(range(7))          # zones 1..7, 0-based
SERVER_ZONES = (7, 8)                     # zones 8..9, 0-based

#: zone pairs (1-based) that may exchange heat; everything else is decoupled
COUPLING_PAIRS = ((2, 9), (3, 4), (5, 6), (5, 8), (6, 8))


def _canonical(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class BuildingParameters:
    """Thermal parameters of the 9-zone building.

    Capacities ``cth`` are in kWh/K, heat-transfer coefficients ``hair`` and
    coupling coefficients in kW/K, disturbance heat flows ``q_other`` in kW.
    ``c_chp`` is the ratio of CHP electrical to thermal power and ``eps_c``
    the cooling coefficient of performance; both are dimensionless.
    """

    cth: tuple[float, ...]
    hair: tuple[float, ...]
    couplings: Mapping[tuple[int, int], float]
    c_chp: float = 0.55
    eps_c: float = 3.0
    q_other: tuple[float, ...] = (-2.0,) * 7 + (20.0, 40.0)

    def __post_init__(self):
        if len(self.cth) != N_ZONES or len(self.hair) != N_ZONES or len(self.q_other) != N_ZONES:
            raise ValueError("cth, hair and q_other must have 9 entries")
        if any(c <= 0 for c in self.cth):
            raise ValueError("thermal capacities must be positive")
        if any(h < 0 for h in self.hair):
            raise ValueError("heat-transfer coefficients must be non-negative")
        if not (self.c_chp > 0):
            raise ValueError("c_chp must be positive")
        if not (self.eps_c > 0):
            raise ValueError("eps_c must be positive")
        canon = {}
        for (i, j), beta in dict(self.couplings).items():
            key = _canonical(i, j)
            if key not in COUPLING_PAIRS:
                raise ValueError(f"unsupported coupling pair {key}")
            if beta < 0:
                raise ValueError("coupling coefficients must be non-negative")
            if key in canon and canon[key] != beta:
                raise ValueError(f"conflicting values for coupling {key}")
            canon[key] = float(beta)
        object.__setattr__(self, "couplings", canon)

    def beta(self, i: int, j: int) -> float:
        """Coupling coefficient between 1-based zones i and j (symmetric)."""
        return self.couplings.get(_canonical(i, j), 0.0)

    # -- aggregates used by the 3-state model -------------------------------

    @property
    def cth_building(self) -> float:
        return sum(self.cth[i] for i in BUILDING_ZONES)

    @property
    def cth_server(self) -> float:
        return sum(self.cth[i] for i in SERVER_ZONES)

    @property
    def hair_building(self) -> float:
        return sum(self.hair[i] for i in BUILDING_ZONES)

    @property
    def hair_server(self) -> float:
        return sum(self.hair[i] for i in SERVER_ZONES)

    @property
    def beta_bs(self) -> float:
        """Total coupling between the building group and the server group."""
        return self.beta(2, 9) + self.beta(5, 8) + self.beta(6, 8)

    @property
    def q_other_building(self) -> float:
        return sum(self.q_other[i] for i in BUILDING_ZONES)

    @property
    def q_other_server(self) -> float:
        return sum(self.q_other[i] for i in SERVER_ZONES)

    def zone_weights(self) -> np.ndarray:
        """Capacity-proportional weights over all 9 zones (sum to 1)."""
        c = np.asarray(self.cth)
        return c / c.sum()

    def with_capacities(self, cth) -> "BuildingParameters":
        return BuildingParameters(
            cth=tuple(float(c) for c in cth),
            hair=self.hair,
            couplings=self.couplings,
            c_chp=self.c_chp,
            eps_c=self.eps_c,
            q_other=self.q_other,
        )

    def to_dict(self) -> dict:
        return {
            "cth": list(self.cth),
            "hair": list(self.hair),
            "couplings": {f"{i},{j}": b for (i, j), b in self.couplings.items()},
            "c_chp": self.c_chp,
            "eps_c": self.eps_c,
            "q_other": list(self.q_other),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BuildingParameters":
        couplings = {
            tuple(int(s) for s in key.split(",")): float(v)
            for key, v in data["couplings"].items()
        }
        return cls(
            cth=tuple(float(x) for x in data["cth"]),
            hair=tuple(float(x) for x in data["hair"]),
            couplings=couplings,
            c_chp=float(data.get("c_chp", 0.55)),
            eps_c=float(data.get("eps_c", 3.0)),
            q_other=tuple(float(x) for x in data.get("q_other", (-2.0,) * 7 + (20.0, 40.0))),
        )


#: measured parameter set of the Offenbach site (2021 identification)
OFFENBACH_2021 = BuildingParameters(
    cth=(230.88, 476.29, 214.27, 103.68, 330.14, 330.14, 99.456, 2.40, 4.80),
    hair=(3.69, 9.82, 3.65, 2.79, 4.79, 6.19, 3.19, 0.03, 0.04),
    couplings={(2, 9): 48.40, (3, 4): 345.60, (5, 6): 1100.48, (5, 8): 23.40, (6, 8): 8.00},
)

PRESETS = {"offenbach2021": OFFENBACH_2021}


def preset(name: str) -> BuildingParameters:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown building preset {name!r}") from None


@dataclass(frozen=True)
class ContinuousStateSpace:
    """dx/dt = a x + b u + s d with named, ordered signals."""

    a: np.ndarray
    b: np.ndarray
    s: np.ndarray
    state_labels: tuple[str, ...]
    input_labels: tuple[str, ...]
    disturbance_labels: tuple[str, ...]

    def __post_init__(self):
        n, m, p = self.a.shape[0], self.b.shape[1], self.s.shape[1]
        if self.a.shape != (n, n) or self.b.shape != (n, m) or self.s.shape != (n, p):
            raise ValueError("inconsistent matrix dimensions")
        if len(self.state_labels) != n or len(self.input_labels) != m or len(self.disturbance_labels) != p:
            raise ValueError("label lengths do not match matrix dimensions")


@dataclass(frozen=True)
class DiscreteStateSpace:
    """x(k+1) = a_d x(k) + b_d u(k) + s_d d(k); sampling time ``ts`` in hours."""

    a_d: np.ndarray
    b_d: np.ndarray
    s_d: np.ndarray
    ts: float
    state_labels: tuple[str, ...] = ()
    input_labels: tuple[str, ...] = ()
    disturbance_labels: tuple[str, ...] = ()

    @property
    def n_states(self) -> int:
        return self.a_d.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.b_d.shape[1]

    @property
    def n_disturbances(self) -> int:
        return self.s_d.shape[1]


AGG_STATE_LABELS = ("E_kWh", "theta_b_C", "theta_s_C")
AGG_INPUT_LABELS = ("P_grid_kW", "P_chp_kW", "Q_rad_kW", "Q_cool_b_kW", "Q_cool_s_kW")
AGG_DISTURBANCE_LABELS = ("P_ren_kW", "P_dem_kW", "theta_air_C", "Q_other_b_kW", "Q_other_s_kW")


def build_aggregator_model(params: BuildingParameters) -> ContinuousStateSpace:
    """Three-state aggregate model: battery energy plus two mean temperatures.

    The temperature coupling uses the heat-balance sign convention
    -(H + beta)/C on the diagonal, so that equal group temperatures produce
    zero coupling flow.
    """
    cb, cs = params.cth_building, params.cth_server
    hb, hs = params.hair_building, params.hair_server
    bbs = params.beta_bs
    eps_c, c_chp = params.eps_c, params.c_chp

    a = np.array([
        [0.0, 0.0, 0.0],
        [0.0, -(hb + bbs) / cb, bbs / cb],
        [0.0, bbs / cs, -(hs + bbs) / cs],
    ])
    b = np.array([
        [1.0, 1.0, 0.0, 1.0 / eps_c, 1.0 / eps_c],
        [0.0, 1.0 / (c_chp * cb), 1.0 / cb, 1.0 / cb, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0 / cs],
    ])
    s = np.array([
        [1.0, 1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, hb / cb, 1.0 / cb, 0.0],
        [0.0, 0.0, hs / cs, 0.0, 1.0 / cs],
    ])
    return ContinuousStateSpace(
        a=a, b=b, s=s,
        state_labels=AGG_STATE_LABELS,
        input_labels=AGG_INPUT_LABELS,
        disturbance_labels=AGG_DISTURBANCE_LABELS,
    )


DIS_STATE_LABELS = tuple(f"theta_{i}_C" for i in range(1, 10))
DIS_INPUT_LABELS = tuple(f"Q_heat_{i}_kW" for i in range(1, 10)) + tuple(
    f"Q_cool_{i}_kW" for i in range(1, 10)
)
DIS_DISTURBANCE_LABELS = ("theta_air_C",) + tuple(f"Q_other_{i}_kW" for i in range(1, 10))


def build_distributor_model(params: BuildingParameters) -> ContinuousStateSpace:
    """9-zone RC network; inputs are per-zone heating and cooling powers."""
    n = N_ZONES
    a = np.zeros((n, n))
    for i in range(n):
        beta_sum = 0.0
        for j in range(n):
            if j == i:
                continue
            bij = params.beta(i + 1, j + 1)
            a[i, j] = bij / params.cth[i]
            beta_sum += bij
        a[i, i] = -(params.hair[i] + beta_sum) / params.cth[i]

    inv_c = np.array([1.0 / c for c in params.cth])
    b = np.hstack([np.diag(inv_c), np.diag(inv_c)])
    s = np.zeros((n, n + 1))
    s[:, 0] = np.array(params.hair) * inv_c
    s[:, 1:] = np.diag(inv_c)
    return ContinuousStateSpace(
        a=a, b=b, s=s,
        state_labels=DIS_STATE_LABELS,
        input_labels=DIS_INPUT_LABELS,
        disturbance_labels=DIS_DISTURBANCE_LABELS,
    )


def discretize(model: ContinuousStateSpace, ts: float) -> DiscreteStateSpace:
    """Exact zero-order-hold sampling via the augmented matrix exponential."""
    if ts <= 0:
        raise ValueError("sampling time must be positive")
    n = model.a.shape[0]
    m = model.b.shape[1]
    p = model.s.shape[1]
    aug = np.zeros((n + m + p, n + m + p))
    aug[:n, :n] = model.a * ts
    aug[:n, n:] = np.hstack([model.b, model.s]) * ts
    phi = expm(aug)
    return DiscreteStateSpace(
        a_d=phi[:n, :n],
        b_d=phi[:n, n:n + m],
        s_d=phi[:n, n + m:],
        ts=ts,
        state_labels=model.state_labels,
        input_labels=model.input_labels,
        disturbance_labels=model.disturbance_labels,
    )


def step(model: DiscreteStateSpace, x, u, d, eps=None) -> np.ndarray:
    """One discrete step x(k+1) = A_d x + B_d u + S_d d + eps."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    if x.shape != (model.n_states,):
        raise ValueError(f"state vector must have length {model.n_states}")
    if u.shape != (model.n_inputs,):
        raise ValueError(f"input vector must have length {model.n_inputs}")
    if d.shape != (model.n_disturbances,):
        raise ValueError(f"disturbance vector must have length {model.n_disturbances}")
    out = model.a_d @ x + model.b_d @ u + model.s_d @ d
    if eps is not None:
        eps = np.asarray(eps, dtype=float)
        if eps.shape != (model.n_states,):
            raise ValueError(f"error vector must have length {model.n_states}")
        out = out + eps
    return out
