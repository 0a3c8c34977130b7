"""Two-layer model-predictive controller.

The aggregator plans grid exchange, CHP, boiler, cooling and battery use on a
three-state aggregate model; the distributor allocates the aggregator's
heating/cooling totals to the nine zones.  Both layers solve one convex QP
per control step with the predicted model-error compensation added to the
dynamics.

Both QPs keep states as decision variables (a sparse formulation): the
constraint matrix, cost, and KKT factorization are then constant over a whole
simulation, and only the bound vectors change from step to step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .estimators import EstimatorBundle, N_HIST
from .qp import AdmmQpSolver, QpSettings, QpStatus
from .thermal_model import (
    BuildingParameters,
    DiscreteStateSpace,
    build_aggregator_model,
    build_distributor_model,
    discretize,
)

HORIZON_STEPS = 48
TS_HOURS = 0.5
COMFORT_SETPOINT_C = 22.0
SERVER_BAND_C = (15.0, 21.0)

# aggregator input bounds (P_grid, P_chp, Q_rad, Q_cool_b, Q_cool_s)
AGG_INPUT_LOWER = np.array([-1000.0, 0.0, 0.0, -1353.0, -197.0])
AGG_INPUT_UPPER = np.array([1000.0, 199.0, 1500.0, 0.0, 0.0])
BATTERY_ENERGY_BOUNDS = (14.7, 83.3)
BATTERY_RATE_KW = 32.9

# distributor bounds
ZONE_HEAT_MAX_KW = 893.95
COOL_GROUP_A = (0, 1, 2, 3, 6)   # zones 1, 2, 3, 4, 7 share one chiller
COOL_GROUP_B = (4, 5)            # zones 5, 6
COOL_GROUP_A_MIN = -800.0
COOL_GROUP_B_MIN = -330.0
COOL_ZONE8_MIN = -53.0
COOL_ZONE9_MIN = -144.0


def default_ocp_settings() -> QpSettings:
    """Solver settings for in-loop OCP solves.

    The OCPs have a linear-program-shaped money/slack part where ADMM's
    terminal convergence is slow and active-set polishing rarely succeeds, so
    the in-loop default trades the last digits for speed; accuracy-critical
    equality rows (dynamics, allocations) are held to much tighter residuals
    by their high penalty weight.  Pass tighter settings where a test needs
    them.
    """
    return QpSettings(eps_abs=5e-4, eps_rel=5e-4, max_iter=50000, polish=False)


@dataclass(frozen=True)
class PriceModel:
    """Energy tariffs; buy must not undercut sell or arbitrage is unbounded."""

    p_buy: float = 0.20     # EUR/kWh
    p_sell: float = 0.08    # EUR/kWh
    p_peak: float = 10.0    # EUR/kW on the horizon peak grid draw
    p_gas: float = 0.06     # EUR/kWh fuel
    eta_boiler: float = 0.9
    chp_elec_eff: float = 0.35

    def __post_init__(self):
        if not (self.p_buy >= self.p_sell >= 0.0):
            raise ValueError("prices must satisfy p_buy >= p_sell >= 0")
        if self.p_peak < 0 or self.p_gas < 0:
            raise ValueError("prices must be non-negative")
        if not (0.0 < self.eta_boiler <= 1.0 and 0.0 < self.chp_elec_eff <= 1.0):
            raise ValueError("efficiencies must lie in (0, 1]")

    def gas_cost_coefficients(self, ts: float) -> tuple[float, float]:
        """Per-kW fuel-cost coefficients for (P_chp, Q_rad) over one step."""
        return (self.p_gas * ts / self.chp_elec_eff,
                self.p_gas * ts / self.eta_boiler)

    def to_dict(self) -> dict:
        return {"p_buy": self.p_buy, "p_sell": self.p_sell,
                "p_peak": self.p_peak, "p_gas": self.p_gas,
                "eta_boiler": self.eta_boiler,
                "chp_elec_eff": self.chp_elec_eff}

    @classmethod
    def from_dict(cls, d: dict) -> "PriceModel":
        return cls(**d)


@dataclass(frozen=True)
class AggregatorOcpSpec:
    model: DiscreteStateSpace
    price: PriceModel = PriceModel()
    np_steps: int = HORIZON_STEPS
    ts: float = TS_HOURS
    w_comf: float = 0.99
    w_mon: float = 0.01
    w_s: float = 0.99

    def __post_init__(self):
        if self.np_steps < 1:
            raise ValueError("horizon must be at least one step")
        if min(self.w_comf, self.w_mon, self.w_s) < 0:
            raise ValueError("weights must be non-negative")
        if self.model.n_states != 3 or self.model.n_inputs != 5:
            raise ValueError("aggregator model must have 3 states and 5 inputs")


@dataclass(frozen=True)
class DistributorOcpSpec:
    model: DiscreteStateSpace
    params: BuildingParameters
    np_steps: int = HORIZON_STEPS
    ts: float = TS_HOURS

    def __post_init__(self):
        if self.np_steps < 1:
            raise ValueError("horizon must be at least one step")
        if self.model.n_states != 9 or self.model.n_inputs != 18:
            raise ValueError("distributor model must have 9 states and 18 inputs")

    @property
    def wth(self) -> np.ndarray:
        c = np.asarray(self.params.cth)
        return c / c.sum()


def make_default_specs(params: BuildingParameters,
                       price: PriceModel = PriceModel(),
                       np_steps: int = HORIZON_STEPS,
                       ts: float = TS_HOURS):
    """Discretize both layer models and wrap them in OCP specs."""
    agg = discretize(build_aggregator_model(params), ts)
    dis = discretize(build_distributor_model(params), ts)
    return (AggregatorOcpSpec(model=agg, price=price, np_steps=np_steps, ts=ts),
            DistributorOcpSpec(model=dis, params=params, np_steps=np_steps, ts=ts))


# -- compensation ------------------------------------------------------------


def aggregate_zone_errors(zone_eps, params: BuildingParameters) -> np.ndarray:
    """Capacity-weighted (building, server) averages of per-zone errors."""
    zone_eps = np.atleast_2d(np.asarray(zone_eps, dtype=float))
    c = np.asarray(params.cth)
    wb = c[:7] / c[:7].sum()
    ws = c[7:] / c[7:].sum()
    return np.column_stack([zone_eps[:, :7] @ wb, zone_eps[:, 7:] @ ws])


@dataclass
class CompensationPlan:
    """Predicted model errors over the horizon, per zone and aggregated."""

    eps_tilde_zones: np.ndarray   # (Np, 9)
    eps_tilde_agg: np.ndarray     # (Np, 2): building, server
    flagged: bool = False         # lag history had to be zero-filled

    def __post_init__(self):
        self.eps_tilde_zones = np.atleast_2d(
            np.asarray(self.eps_tilde_zones, dtype=float))
        self.eps_tilde_agg = np.atleast_2d(
            np.asarray(self.eps_tilde_agg, dtype=float))
        if self.eps_tilde_zones.shape[1] != 9 or self.eps_tilde_agg.shape[1] != 2:
            raise ValueError("compensation plan has wrong column counts")
        if len(self.eps_tilde_zones) != len(self.eps_tilde_agg):
            raise ValueError("zone and aggregate horizons differ")

    @classmethod
    def zero(cls, np_steps: int) -> "CompensationPlan":
        return cls(eps_tilde_zones=np.zeros((np_steps, 9)),
                   eps_tilde_agg=np.zeros((np_steps, 2)))

    @classmethod
    def from_zone_errors(cls, zone_eps, params: BuildingParameters,
                         flagged: bool = False) -> "CompensationPlan":
        zone_eps = np.atleast_2d(np.asarray(zone_eps, dtype=float))
        return cls(eps_tilde_zones=zone_eps,
                   eps_tilde_agg=aggregate_zone_errors(zone_eps, params),
                   flagged=flagged)


def compensation_features(theta_air_lags, forecast, np_steps: int) -> tuple[np.ndarray, bool]:
    """Assemble the (Np, 6) estimator feature matrix for one control step.

    ``forecast`` rows are (theta_air, p_dem, tod, doy) for steps k..k+Np-1;
    lags for the first steps come from ``theta_air_lags`` = (theta(k-1),
    theta(k-2), ...).  Missing history is zero-filled and flagged.
    """
    forecast = np.asarray(forecast, dtype=float)
    if forecast.shape[0] < np_steps or forecast.shape[1] != 4:
        raise ValueError("forecast must provide (theta_air, p_dem, tod, doy) "
                         "rows covering the horizon")
    lags = list(theta_air_lags)
    flagged = len(lags) < N_HIST
    while len(lags) < N_HIST:
        lags.append(0.0)
    theta = forecast[:np_steps, 0]
    hist = np.concatenate([lags[::-1], theta])  # [theta(k-2), theta(k-1), theta(k), ...]
    lag1 = hist[N_HIST - 1:N_HIST - 1 + np_steps]
    lag2 = hist[N_HIST - 2:N_HIST - 2 + np_steps]
    doy = np.clip(forecast[:np_steps, 3], 1, 365)
    x = np.column_stack([theta, lag1, lag2, forecast[:np_steps, 1],
                         forecast[:np_steps, 2], doy])
    return x, flagged


def build_compensation(bundle: Optional[EstimatorBundle], theta_air_lags,
                       forecast, np_steps: int,
                       params: BuildingParameters) -> CompensationPlan:
    """Query the nine zone estimators over the horizon; null bundle → zeros."""
    if bundle is None:
        return CompensationPlan.zero(np_steps)
    x, flagged = compensation_features(theta_air_lags, forecast, np_steps)
    zone_eps = bundle.predict_matrix(x)
    return CompensationPlan.from_zone_errors(zone_eps, params, flagged=flagged)


# -- solutions ---------------------------------------------------------------


@dataclass
class OcpSolution:
    """Optimal plan for one layer at one control step."""

    u: np.ndarray                  # (Np, n_inputs)
    x: np.ndarray                  # (Np, n_states), predicted x(1..Np|k)
    objective: float
    cost_breakdown: dict
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    extras: dict = field(default_factory=dict)

    @property
    def first_input(self) -> np.ndarray:
        return self.u[0]

    def telemetry(self) -> dict:
        return {"status": self.status.name, "iterations": self.iterations,
                "primal_residual": self.primal_residual,
                "dual_residual": self.dual_residual,
                "objective": self.objective,
                "cost_breakdown": self.cost_breakdown}


class OcpInfeasibleError(RuntimeError):
    pass


def _shift_plan(z, blocks) -> np.ndarray:
    """Advance stacked per-step plan blocks by one step for the next warm
    start; each block is (offset, n_steps, width) inside the flat vector."""
    z = z.copy()
    for off, npn, width in blocks:
        b = z[off:off + npn * width].reshape(npn, width)
        b[:-1] = b[1:]
    return z


# -- aggregator layer --------------------------------------------------------


class AggregatorController:
    """Builds the aggregator QP once; per step only the bounds change.

    Decision vector: [u(0..Np-1) | x(1..Np) | c_money(0..Np-1) |
    s_server(0..Np-1) | c_peak].  The monetary objective is epigraph-
    reformulated; the server comfort band uses one slack per step.
    """

    def __init__(self, spec: AggregatorOcpSpec,
                 settings: Optional[QpSettings] = None,
                 qcool_b_floor: Optional[float] = None):
        self.spec = spec
        npn = spec.np_steps
        self.n_u, self.n_x = 5, 3
        self.off_u = 0
        self.off_x = npn * self.n_u
        self.off_c = self.off_x + npn * self.n_x
        self.off_s = self.off_c + npn
        self.off_pk = self.off_s + npn
        self.n_var = self.off_pk + 1

        # the distributor can only sink as much building cooling as its two
        # chiller groups allow; never allocate beyond that
        group_capacity = COOL_GROUP_A_MIN + COOL_GROUP_B_MIN
        if qcool_b_floor is None:
            qcool_b_floor = group_capacity
        self.u_lower = AGG_INPUT_LOWER.copy()
        self.u_lower[3] = max(self.u_lower[3], qcool_b_floor)
        self.u_upper = AGG_INPUT_UPPER.copy()

        self._build_matrices()
        self.solver = AdmmQpSolver(self._p, self._a,
                                   settings or default_ocp_settings())
        self._warm_z: Optional[np.ndarray] = None
        self._warm_y: Optional[np.ndarray] = None

    # row blocks, in order: dynamics, input box, battery box, battery rate,
    # money epigraph (buy, sell), peak epigraph, peak sign, server slack
    # band, slack sign
    def _build_matrices(self):
        spec = self.spec
        npn = spec.np_steps
        a_d, b_d = spec.model.a_d, spec.model.b_d
        rows = []

        def var_u(n, j):
            return self.off_u + n * self.n_u + j

        def var_x(n, j):
            # state at time n+1
            return self.off_x + n * self.n_x + j

        data, ri, ci = [], [], []
        r = 0

        # dynamics x(n+1) - A x(n) - B u(n) = rhs
        for n in range(npn):
            for i in range(self.n_x):
                data.append(1.0)
                ri.append(r)
                ci.append(var_x(n, i))
                for j in range(self.n_u):
                    if b_d[i, j] != 0.0:
                        data.append(-b_d[i, j])
                        ri.append(r)
                        ci.append(var_u(n, j))
                if n > 0:
                    for j in range(self.n_x):
                        if a_d[i, j] != 0.0:
                            data.append(-a_d[i, j])
                            ri.append(r)
                            ci.append(var_x(n - 1, j))
                r += 1
        self.rows_dyn = (0, r)

        # input box
        start = r
        for n in range(npn):
            for j in range(self.n_u):
                data.append(1.0)
                ri.append(r)
                ci.append(var_u(n, j))
                r += 1
        self.rows_ubox = (start, r)

        # battery energy box
        start = r
        for n in range(npn):
            data.append(1.0)
            ri.append(r)
            ci.append(var_x(n, 0))
            r += 1
        self.rows_ebox = (start, r)

        # battery rate: E(n+1) - E(n); n = 0 references the measured E(0)
        start = r
        for n in range(npn):
            data.append(1.0)
            ri.append(r)
            ci.append(var_x(n, 0))
            if n > 0:
                data.append(-1.0)
                ri.append(r)
                ci.append(var_x(n - 1, 0))
            r += 1
        self.rows_rate = (start, r)

        # money epigraph: c_n - price·ts·P_grid - gas(n) >= 0 (buy and sell)
        g_chp, g_rad = spec.price.gas_cost_coefficients(spec.ts)
        start = r
        for price in (spec.price.p_buy, spec.price.p_sell):
            for n in range(npn):
                data += [1.0, -price * spec.ts, -g_chp, -g_rad]
                ri += [r] * 4
                ci += [self.off_c + n, var_u(n, 0), var_u(n, 1), var_u(n, 2)]
                r += 1
        self.rows_money = (start, r)

        # peak: c_pk - P_grid(n) >= 0, and c_pk >= 0
        start = r
        for n in range(npn):
            data += [1.0, -1.0]
            ri += [r] * 2
            ci += [self.off_pk, var_u(n, 0)]
            r += 1
        data.append(1.0)
        ri.append(r)
        ci.append(self.off_pk)
        r += 1
        self.rows_peak = (start, r)

        # server band: s + theta_s >= 15;  s - theta_s >= -21;  s >= 0
        start = r
        for n in range(npn):
            data += [1.0, 1.0]
            ri += [r] * 2
            ci += [self.off_s + n, var_x(n, 2)]
            r += 1
        for n in range(npn):
            data += [1.0, -1.0]
            ri += [r] * 2
            ci += [self.off_s + n, var_x(n, 2)]
            r += 1
        for n in range(npn):
            data.append(1.0)
            ri.append(r)
            ci.append(self.off_s + n)
            r += 1
        self.rows_slack = (start, r)

        self.n_con = r
        self._a = sp.csc_matrix((data, (ri, ci)), shape=(r, self.n_var))

        p_diag = np.zeros(self.n_var)
        q = np.zeros(self.n_var)
        for n in range(npn):
            p_diag[var_x(n, 1)] = 2.0 * spec.w_comf
            q[var_x(n, 1)] = -2.0 * spec.w_comf * COMFORT_SETPOINT_C
            q[self.off_c + n] = spec.w_mon
            q[self.off_s + n] = spec.w_s
        q[self.off_pk] = spec.w_mon * spec.price.p_peak
        self._p = sp.diags(p_diag, format="csc")
        self._q = q

        # constant parts of the bounds
        l = np.full(self.n_con, -np.inf)
        u = np.full(self.n_con, np.inf)
        for n in range(npn):
            s = self.rows_ubox[0] + n * self.n_u
            l[s:s + self.n_u] = self.u_lower
            u[s:s + self.n_u] = self.u_upper
        l[self.rows_ebox[0]:self.rows_ebox[1]] = BATTERY_ENERGY_BOUNDS[0]
        u[self.rows_ebox[0]:self.rows_ebox[1]] = BATTERY_ENERGY_BOUNDS[1]
        rate = BATTERY_RATE_KW * spec.ts
        l[self.rows_rate[0]:self.rows_rate[1]] = -rate
        u[self.rows_rate[0]:self.rows_rate[1]] = rate
        l[self.rows_money[0]:self.rows_money[1]] = 0.0
        l[self.rows_peak[0]:self.rows_peak[1]] = 0.0
        l[self.rows_slack[0]:self.rows_slack[0] + npn] = SERVER_BAND_C[0]
        l[self.rows_slack[0] + npn:self.rows_slack[0] + 2 * npn] = -SERVER_BAND_C[1]
        l[self.rows_slack[0] + 2 * npn:self.rows_slack[1]] = 0.0
        self._l_base = l
        self._u_base = u

    def solve(self, x0, forecast_d, comp: Optional[CompensationPlan] = None) -> OcpSolution:
        """One receding-horizon solve.

        ``x0`` = (E, theta_b, theta_s); ``forecast_d`` is (Np, 5) rows of
        model disturbances (P_ren, P_dem, theta_air, Q_other_b, Q_other_s).
        """
        spec = self.spec
        npn = spec.np_steps
        x0 = np.asarray(x0, dtype=float)
        forecast_d = np.asarray(forecast_d, dtype=float)
        if forecast_d.shape[0] < npn:
            raise ValueError("forecast shorter than the horizon")
        eps = (comp.eps_tilde_agg if comp is not None
               else np.zeros((npn, 2)))
        if len(eps) < npn:
            raise ValueError("compensation plan shorter than the horizon")

        l = self._l_base.copy()
        u = self._u_base.copy()
        rhs = forecast_d[:npn] @ spec.model.s_d.T
        rhs[:, 1] += eps[:npn, 0]
        rhs[:, 2] += eps[:npn, 1]
        rhs[0] += spec.model.a_d @ x0
        flat = rhs.ravel()
        l[self.rows_dyn[0]:self.rows_dyn[1]] = flat
        u[self.rows_dyn[0]:self.rows_dyn[1]] = flat
        rate = BATTERY_RATE_KW * spec.ts
        l[self.rows_rate[0]] = x0[0] - rate
        u[self.rows_rate[0]] = x0[0] + rate

        sol = self.solver.solve(self._q, l, u, z0=self._warm_z, y0=self._warm_y)
        if sol.status not in (QpStatus.SOLVED, QpStatus.MAX_ITER):
            raise OcpInfeasibleError(f"aggregator QP: {sol.status.name}")
        npn_blocks = ((self.off_u, npn, self.n_u), (self.off_x, npn, self.n_x),
                      (self.off_c, npn, 1), (self.off_s, npn, 1))
        # the next solve sees the world one step later; hand it the plan
        # advanced by one step so it starts near the new optimum
        self._warm_z = _shift_plan(sol.z, npn_blocks)
        self._warm_y = sol.y

        # saturate the plan at the published input limits: the residual-level
        # overshoot of the splitting solver has no business reaching the plant
        u_seq = np.clip(sol.z[self.off_u:self.off_x].reshape(npn, self.n_u),
                        self.u_lower, self.u_upper)
        x_seq = sol.z[self.off_x:self.off_c].reshape(npn, self.n_x)
        c_money = sol.z[self.off_c:self.off_s]
        slack = sol.z[self.off_s:self.off_pk]
        c_peak = float(sol.z[self.off_pk])

        comfort = spec.w_comf * float(
            np.sum((x_seq[:, 1] - COMFORT_SETPOINT_C) ** 2))
        money_raw = float(np.sum(c_money) + spec.price.p_peak * c_peak)
        server = spec.w_s * float(np.sum(np.maximum(slack, 0.0)))
        breakdown = {"comfort": comfort,
                     "monetary": spec.w_mon * money_raw,
                     "monetary_raw": money_raw,
                     "server": server}
        return OcpSolution(
            u=u_seq, x=x_seq,
            objective=comfort + spec.w_mon * money_raw + server,
            cost_breakdown=breakdown, status=sol.status,
            iterations=sol.iterations,
            primal_residual=sol.primal_residual,
            dual_residual=sol.dual_residual,
            extras={"c_money": c_money, "c_peak": c_peak, "server_slack": slack})


def solve_aggregator(spec: AggregatorOcpSpec, x0, forecast_d,
                     comp: Optional[CompensationPlan] = None,
                     settings: Optional[QpSettings] = None) -> OcpSolution:
    """One-shot convenience wrapper (no structure reuse)."""
    return AggregatorController(spec, settings=settings).solve(x0, forecast_d, comp)


# -- distributor layer -------------------------------------------------------


class DistributorController:
    """Allocates the aggregator's per-step totals to the nine zones.

    Decision vector: [u(0..Np-1) (18 each) | x(1..Np) (9 each) |
    s8(0..Np-1) | s9(0..Np-1)].
    """

    def __init__(self, spec: DistributorOcpSpec,
                 settings: Optional[QpSettings] = None):
        self.spec = spec
        npn = spec.np_steps
        self.n_u, self.n_x = 18, 9
        self.off_u = 0
        self.off_x = npn * self.n_u
        self.off_s8 = self.off_x + npn * self.n_x
        self.off_s9 = self.off_s8 + npn
        self.n_var = self.off_s9 + npn
        self._build_matrices()
        self.solver = AdmmQpSolver(self._p, self._a,
                                   settings or default_ocp_settings())
        self._warm_z: Optional[np.ndarray] = None
        self._warm_y: Optional[np.ndarray] = None

    def _build_matrices(self):
        spec = self.spec
        npn = spec.np_steps
        a_d, b_d = spec.model.a_d, spec.model.b_d
        c_chp = spec.params.c_chp

        def var_u(n, j):
            return self.off_u + n * self.n_u + j

        def var_x(n, j):
            return self.off_x + n * self.n_x + j

        data, ri, ci = [], [], []
        r = 0

        # dynamics
        for n in range(npn):
            for i in range(self.n_x):
                data.append(1.0)
                ri.append(r)
                ci.append(var_x(n, i))
                for j in range(self.n_u):
                    if b_d[i, j] != 0.0:
                        data.append(-b_d[i, j])
                        ri.append(r)
                        ci.append(var_u(n, j))
                if n > 0:
                    for j in range(self.n_x):
                        if a_d[i, j] != 0.0:
                            data.append(-a_d[i, j])
                            ri.append(r)
                            ci.append(var_x(n - 1, j))
                r += 1
        self.rows_dyn = (0, r)

        # per-input boxes (heating 0..9, cooling 9..18)
        start = r
        for n in range(npn):
            for j in range(self.n_u):
                data.append(1.0)
                ri.append(r)
                ci.append(var_u(n, j))
                r += 1
        self.rows_ubox = (start, r)

        # chiller group sums
        start = r
        for n in range(npn):
            for group in (COOL_GROUP_A, COOL_GROUP_B):
                for i in group:
                    data.append(1.0)
                    ri.append(r)
                    ci.append(var_u(n, 9 + i))
                r += 1
        self.rows_group = (start, r)

        # allocation equalities: heat total, building cooling, server cooling
        start = r
        for n in range(npn):
            for i in range(7):
                data.append(1.0)
                ri.append(r)
                ci.append(var_u(n, i))
            r += 1
            for i in range(7):
                data.append(1.0)
                ri.append(r)
                ci.append(var_u(n, 9 + i))
            r += 1
            for i in (7, 8):
                data.append(1.0)
                ri.append(r)
                ci.append(var_u(n, 9 + i))
            r += 1
        self.rows_alloc = (start, r)

        # server bands: s + theta >= 15, s - theta >= -21, s >= 0 (zones 8, 9)
        start = r
        for off_s, zone in ((self.off_s8, 7), (self.off_s9, 8)):
            for n in range(npn):
                data += [1.0, 1.0]
                ri += [r] * 2
                ci += [off_s + n, var_x(n, zone)]
                r += 1
            for n in range(npn):
                data += [1.0, -1.0]
                ri += [r] * 2
                ci += [off_s + n, var_x(n, zone)]
                r += 1
            for n in range(npn):
                data.append(1.0)
                ri.append(r)
                ci.append(off_s + n)
                r += 1
        self.rows_slack = (start, r)

        self.n_con = r
        self._a = sp.csc_matrix((data, (ri, ci)), shape=(r, self.n_var))

        wth = spec.wth
        p_diag = np.zeros(self.n_var)
        q = np.zeros(self.n_var)
        for n in range(npn):
            for i in range(7):
                p_diag[var_x(n, i)] = 2.0 * wth[i]
                q[var_x(n, i)] = -2.0 * wth[i] * COMFORT_SETPOINT_C
        q[self.off_s8:self.n_var] = 1.0
        self._p = sp.diags(p_diag, format="csc")
        self._q = q

        l = np.full(self.n_con, -np.inf)
        u = np.full(self.n_con, np.inf)
        u_lo = np.concatenate([
            np.zeros(7), [0.0, 0.0],                   # heating lower
            np.full(7, -np.inf), [COOL_ZONE8_MIN, COOL_ZONE9_MIN]])
        u_hi = np.concatenate([
            np.full(7, ZONE_HEAT_MAX_KW), [0.0, 0.0],  # heating upper
            np.zeros(9)])
        for n in range(npn):
            s = self.rows_ubox[0] + n * self.n_u
            l[s:s + self.n_u] = u_lo
            u[s:s + self.n_u] = u_hi
        for n in range(npn):
            s = self.rows_group[0] + 2 * n
            l[s], u[s] = COOL_GROUP_A_MIN, 0.0
            l[s + 1], u[s + 1] = COOL_GROUP_B_MIN, 0.0
        npn2 = npn
        s = self.rows_slack[0]
        for block in range(2):
            base = s + block * 3 * npn2
            l[base:base + npn2] = SERVER_BAND_C[0]
            l[base + npn2:base + 2 * npn2] = -SERVER_BAND_C[1]
            l[base + 2 * npn2:base + 3 * npn2] = 0.0
        self._l_base = l
        self._u_base = u
        self._c_chp = c_chp

    def solve(self, x0, forecast_d, agg_solution: OcpSolution,
              comp: Optional[CompensationPlan] = None) -> OcpSolution:
        """``x0`` = 9 zone temperatures; ``forecast_d`` is (Np, 10) rows of
        model disturbances (theta_air, Q_other_1..9)."""
        spec = self.spec
        npn = spec.np_steps
        x0 = np.asarray(x0, dtype=float)
        forecast_d = np.asarray(forecast_d, dtype=float)
        if forecast_d.shape[0] < npn:
            raise ValueError("forecast shorter than the horizon")
        eps = (comp.eps_tilde_zones if comp is not None
               else np.zeros((npn, 9)))

        l = self._l_base.copy()
        u = self._u_base.copy()
        rhs = forecast_d[:npn] @ spec.model.s_d.T + eps[:npn]
        rhs[0] += spec.model.a_d @ x0
        flat = rhs.ravel()
        l[self.rows_dyn[0]:self.rows_dyn[1]] = flat
        u[self.rows_dyn[0]:self.rows_dyn[1]] = flat

        ua = agg_solution.u
        heat_total = ua[:npn, 2] + ua[:npn, 1] / self._c_chp
        alloc = np.column_stack([heat_total, ua[:npn, 3], ua[:npn, 4]]).ravel()
        l[self.rows_alloc[0]:self.rows_alloc[1]] = alloc
        u[self.rows_alloc[0]:self.rows_alloc[1]] = alloc

        sol = self.solver.solve(self._q, l, u, z0=self._warm_z, y0=self._warm_y)
        if sol.status not in (QpStatus.SOLVED, QpStatus.MAX_ITER):
            raise OcpInfeasibleError(
                f"distributor QP: {sol.status.name} (aggregator totals should "
                "always be within group capacity)")
        npn_blocks = ((self.off_u, npn, self.n_u), (self.off_x, npn, self.n_x),
                      (self.off_s8, npn, 1), (self.off_s9, npn, 1))
        self._warm_z = _shift_plan(sol.z, npn_blocks)
        self._warm_y = sol.y

        u_seq = sol.z[self.off_u:self.off_x].reshape(npn, self.n_u)
        x_seq = sol.z[self.off_x:self.off_s8].reshape(npn, self.n_x)
        s8 = sol.z[self.off_s8:self.off_s9]
        s9 = sol.z[self.off_s9:self.n_var]

        wth = spec.wth
        comfort = float(np.sum(
            wth[:7] * (x_seq[:, :7] - COMFORT_SETPOINT_C) ** 2))
        server = float(np.sum(np.maximum(s8, 0)) + np.sum(np.maximum(s9, 0)))
        return OcpSolution(
            u=u_seq, x=x_seq, objective=comfort + server,
            cost_breakdown={"comfort": comfort, "server": server},
            status=sol.status, iterations=sol.iterations,
            primal_residual=sol.primal_residual,
            dual_residual=sol.dual_residual,
            extras={"s8": s8, "s9": s9})


def solve_distributor(spec: DistributorOcpSpec, x0, forecast_d,
                      agg_solution: OcpSolution,
                      comp: Optional[CompensationPlan] = None,
                      settings: Optional[QpSettings] = None) -> OcpSolution:
    """One-shot convenience wrapper (no structure reuse)."""
    return DistributorController(spec, settings=settings).solve(
        x0, forecast_d, agg_solution, comp)
