"""Surrogate plant for the software-in-the-loop setup.

The plant is the "real building" in closed loop: the same 9-zone RC network
as the controller's gray-box model, deliberately augmented with effects the
controller does not know about (occupancy gains, scheduled ventilation,
electrical demand turning into heat, a CHP modulation floor with nonlinear
efficiency, seasonal envelope drift).  With all augmentations switched off the
plant reproduces the gray-box model exactly, so the measured model error is
identically zero.

Also houses synthetic disturbance generation and the disturbance CSV format.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .thermal_model import BUILDING_ZONES, BuildingParameters, build_distributor_model

log = logging.getLogger(__name__)

CHP_MAX_KW = 199.0
BATTERY_CAPACITY_KWH = 98.0
BATTERY_RATE_KW = 32.9

OCCUPIED_START_H = 7.0
OCCUPIED_END_H = 19.0

DISTURBANCE_CSV_COLUMNS = ("step", "theta_air_C", "p_dem_kW", "p_pv_kW")


def weekday_index(doy: int) -> int:
    """0 = Friday (day 1 of the dataset is a Friday), 1 = Saturday, ..."""
    return (int(doy) - 1) % 7


def is_occupied(tod: float, doy: int) -> bool:
    """Daily business hours (server rooms and lab keep the site active on
    weekends; only the electrical demand follows the weekly cycle)."""
    return OCCUPIED_START_H <= tod < OCCUPIED_END_H


@dataclass(frozen=True)
class PlantState:
    zone_temps: tuple[float, ...]
    battery_energy: float
    chp_power_actual: float = 0.0
    chp_on_timer: float = 1e9

    def __post_init__(self):
        if len(self.zone_temps) != 9:
            raise ValueError("plant has 9 zone temperatures")
        if not (0.0 <= self.battery_energy <= BATTERY_CAPACITY_KWH):
            raise ValueError("battery energy outside physical bounds")
        if not (-1e-9 <= self.chp_power_actual <= CHP_MAX_KW + 1e-9):
            raise ValueError("CHP power outside its physical range")


@dataclass(frozen=True)
class PlantConfig:
    """Magnitudes of the plant-only effects.  All defaults zero: the plant
    then degenerates to the controller's gray-box model."""

    occupancy_gain_peak: float = 0.0       # kW, total over building zones
    ventilation_ua_schedule: float = 0.0   # kW/K, total over building zones
    demand_to_heat_fraction: float = 0.0
    chp_efficiency_curve: tuple[tuple[float, float], ...] = ()  # (load frac, mult)
    chp_min_load_fraction: float = 0.0     # 0 disables the modulation floor
    chp_dwell_h: float = 1.0
    seasonal_envelope_drift: float = 0.0   # relative amplitude on hair
    noise_seed: int = 0
    process_noise_kw: float = 0.0          # per-zone white heat-flow noise

    def __post_init__(self):
        if not (0.0 <= self.demand_to_heat_fraction <= 1.0):
            raise ValueError("demand_to_heat_fraction must be in [0, 1]")
        if not (0.0 <= self.chp_min_load_fraction < 1.0):
            raise ValueError("chp_min_load_fraction must be in [0, 1)")
        for v in (self.occupancy_gain_peak, self.ventilation_ua_schedule,
                  self.seasonal_envelope_drift, self.process_noise_kw):
            if not np.isfinite(v):
                raise ValueError("plant config magnitudes must be finite")

    @classmethod
    def default(cls) -> "PlantConfig":
        """Standard augmented plant used in the synthetic experiments."""
        return cls(
            occupancy_gain_peak=60.0,
            ventilation_ua_schedule=15.0,
            demand_to_heat_fraction=0.30,
            chp_efficiency_curve=((0.5, 0.92), (0.75, 1.0), (1.0, 0.97)),
            chp_min_load_fraction=0.5,
            seasonal_envelope_drift=0.15,
            process_noise_kw=6.0,
        )

    def is_degenerate(self) -> bool:
        return (
            self.occupancy_gain_peak == 0.0
            and self.ventilation_ua_schedule == 0.0
            and self.demand_to_heat_fraction == 0.0
            and not self.chp_efficiency_curve
            and self.chp_min_load_fraction == 0.0
            and self.seasonal_envelope_drift == 0.0
            and self.process_noise_kw == 0.0
        )

    def efficiency(self, load_fraction: float) -> float:
        if not self.chp_efficiency_curve:
            return 1.0
        pts = sorted(self.chp_efficiency_curve)
        x = np.array([p[0] for p in pts])
        y = np.array([p[1] for p in pts])
        return float(np.interp(load_fraction, x, y))

    def to_dict(self) -> dict:
        return {
            "occupancy_gain_peak": self.occupancy_gain_peak,
            "ventilation_ua_schedule": self.ventilation_ua_schedule,
            "demand_to_heat_fraction": self.demand_to_heat_fraction,
            "chp_efficiency_curve": [list(p) for p in self.chp_efficiency_curve],
            "chp_min_load_fraction": self.chp_min_load_fraction,
            "chp_dwell_h": self.chp_dwell_h,
            "seasonal_envelope_drift": self.seasonal_envelope_drift,
            "noise_seed": self.noise_seed,
            "process_noise_kw": self.process_noise_kw,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlantConfig":
        data = dict(data)
        if "chp_efficiency_curve" in data:
            data["chp_efficiency_curve"] = tuple(
                tuple(float(x) for x in p) for p in data["chp_efficiency_curve"]
            )
        return cls(**data)


@dataclass
class DisturbanceSeries:
    """Exogenous signals at the control sampling grid (0.5 h steps).

    ``p_dem`` and ``p_pv`` are stored non-negative; sign conventions at the
    model boundary (generation positive, consumption negative) are applied by
    the harness.
    """

    theta_air: np.ndarray
    p_dem: np.ndarray
    p_pv: np.ndarray
    ts: float = 0.5

    def __post_init__(self):
        self.theta_air = np.asarray(self.theta_air, dtype=float)
        self.p_dem = np.asarray(self.p_dem, dtype=float)
        self.p_pv = np.asarray(self.p_pv, dtype=float)
        n = len(self.theta_air)
        if len(self.p_dem) != n or len(self.p_pv) != n:
            raise ValueError("series columns must have equal length")
        if np.any(self.theta_air < -30) or np.any(self.theta_air > 50):
            raise ValueError("ambient temperature outside plausible range")
        if np.any(self.p_dem < 0):
            raise ValueError("demand must be non-negative")
        if np.any(self.p_pv < 0):
            raise ValueError("PV production must be non-negative")

    def __len__(self) -> int:
        return len(self.theta_air)

    def tod(self, k: int) -> float:
        return (k * self.ts) % 24.0

    def doy(self, k: int) -> int:
        return min(int(k * self.ts // 24) + 1, 365)


YEAR_PRESETS = {
    # label -> (seasonal temperature offset K, demand scale)
    "2021": (0.0, 1.0),
    "2022": (0.5, 1.1),
}


def generate_disturbances(year: str, days: int, seed: int, ts: float = 0.5) -> DisturbanceSeries:
    """Synthetic weather / demand / PV series, deterministic per seed.

    The ``year`` label selects dataset-level modifiers (the 2022 analog is
    warmer and has higher demand, emulating changed occupant behavior).
    """
    if days < 1:
        raise ValueError("need at least one day")
    temp_offset, dem_scale = YEAR_PRESETS.get(year, (0.0, 1.0))
    rng = np.random.default_rng(seed)
    steps_per_day = int(round(24 / ts))
    n = days * steps_per_day
    k = np.arange(n)
    tod = (k * ts) % 24.0
    doy = np.minimum((k * ts // 24).astype(int) + 1, 365)

    seasonal = 10.0 + temp_offset - 9.0 * np.cos(2 * np.pi * (doy - 15) / 365.0)
    diurnal = 4.0 * np.cos(2 * np.pi * (tod - 14.0) / 24.0)
    ar = np.empty(n)
    ar[0] = rng.normal(0, 0.5)
    innov = rng.normal(0, 0.5, n)
    for i in range(1, n):
        ar[i] = 0.95 * ar[i - 1] + innov[i]
    theta_air = np.clip(seasonal + diurnal + ar, -29.5, 49.5)

    weekday = (doy - 1) % 7
    workday = ~np.isin(weekday, (1, 2))
    occ_shape = np.clip(np.sin(np.pi * (tod - OCCUPIED_START_H) / 12.0), 0.0, None)
    occ_shape *= (tod >= OCCUPIED_START_H) & (tod < OCCUPIED_END_H)
    dem_noise = np.empty(n)
    dem_noise[0] = rng.normal(0, 15.0)
    innov_d = rng.normal(0, 15.0, n)
    for i in range(1, n):
        dem_noise[i] = 0.9 * dem_noise[i - 1] + innov_d[i]
    p_dem = dem_scale * np.clip(
        195.0 + 220.0 * workday * occ_shape + dem_noise, 20.0, None
    )

    daylight = np.clip(np.sin(np.pi * (tod - 6.0) / 12.0), 0.0, None)
    season_pv = 0.55 - 0.45 * np.cos(2 * np.pi * (doy - 172) / 365.0)
    cloud = np.empty(n)
    cloud[0] = 0.7
    innov_c = rng.normal(0, 0.08, n)
    for i in range(1, n):
        cloud[i] = np.clip(0.95 * cloud[i - 1] + 0.05 * 0.7 + innov_c[i], 0.15, 1.0)
    p_pv = 750.0 * daylight * season_pv * cloud

    return DisturbanceSeries(theta_air=theta_air, p_dem=p_dem, p_pv=p_pv, ts=ts)


def save_disturbances_csv(series: DisturbanceSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(DISTURBANCE_CSV_COLUMNS)
        for k in range(len(series)):
            writer.writerow([
                k,
                f"{series.theta_air[k]:.10g}",
                f"{series.p_dem[k]:.10g}",
                f"{series.p_pv[k]:.10g}",
            ])


class DisturbanceCsvError(ValueError):
    pass


def load_disturbances_csv(path, ts: float = 0.5) -> DisturbanceSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DisturbanceCsvError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in DISTURBANCE_CSV_COLUMNS if c not in header]
        if missing:
            raise DisturbanceCsvError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = {c: header.index(c) for c in DISTURBANCE_CSV_COLUMNS}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append((
                    int(row[idx["step"]]),
                    float(row[idx["theta_air_C"]]),
                    float(row[idx["p_dem_kW"]]),
                    float(row[idx["p_pv_kW"]]),
                ))
            except (ValueError, IndexError) as exc:
                raise DisturbanceCsvError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DisturbanceCsvError(f"{path}: no data rows")
    steps = [r[0] for r in rows]
    expected = list(range(rows[0][0], rows[0][0] + len(rows)))
    if steps != expected or rows[0][0] != 0:
        raise DisturbanceCsvError(
            f"{path}: step column must be a gapless 0-based sequence"
        )
    data = np.array([r[1:] for r in rows])
    try:
        return DisturbanceSeries(
            theta_air=data[:, 0], p_dem=data[:, 1], p_pv=data[:, 2], ts=ts)
    except ValueError as exc:
        raise DisturbanceCsvError(f"{path}: {exc}") from None


def measure_error(x_measured_next, x_pred_recomputed) -> np.ndarray:
    """Additive one-step model error.

    The prediction must be recomputed with measured disturbances and applied
    inputs so forecast errors do not leak into the model error.
    """
    a = np.asarray(x_measured_next, dtype=float)
    b = np.asarray(x_pred_recomputed, dtype=float)
    if a.shape != b.shape:
        raise ValueError("state vectors must have matching dimensions")
    return a - b


class Plant:
    """Stateful closed-loop plant; stepping is strictly sequential."""

    def __init__(
        self,
        params: BuildingParameters,
        cfg: Optional[PlantConfig] = None,
        ts: float = 0.5,
        n_substeps: int = 5,
    ):
        self.params = params
        self.cfg = cfg or PlantConfig()
        self.ts = ts
        self.n_substeps = n_substeps
        self._model = build_distributor_model(params)
        w = np.asarray(params.cth[:7])
        self._w_building = np.concatenate([w / w.sum(), np.zeros(2)])
        self._disc_cache: dict = {}
        cth = np.asarray(params.cth)
        self._noise_scale = cth / cth.mean()
        self._rng = np.random.default_rng(self.cfg.noise_seed)

    def initial_state(self) -> PlantState:
        return PlantState(
            zone_temps=(22.0,) * 7 + (20.0, 19.5),
            battery_energy=0.5 * BATTERY_CAPACITY_KWH,
        )

    # -- discretization of the (possibly augmented) zone dynamics -----------

    def _zone_matrices(self, occupied: bool, doy: int):
        key = (occupied, doy if self.cfg.seasonal_envelope_drift else 0)
        cached = self._disc_cache.get(key)
        if cached is not None:
            return cached
        drift = 1.0 + self.cfg.seasonal_envelope_drift * np.sin(2 * np.pi * doy / 365.0)
        hair = np.asarray(self.params.hair) * drift
        vent = np.zeros(9)
        if occupied and self.cfg.ventilation_ua_schedule:
            vent = self.cfg.ventilation_ua_schedule * self._w_building
        loss = hair + vent
        a = self._model.a.copy()
        inv_c = 1.0 / np.asarray(self.params.cth)
        base_hair_term = np.asarray(self.params.hair) * inv_c
        np.fill_diagonal(a, np.diag(a) + base_hair_term - loss * inv_c)
        s_air = loss * inv_c
        dt = self.ts / self.n_substeps
        n = 9
        aug = np.zeros((2 * n + 1, 2 * n + 1))
        aug[:n, :n] = a * dt
        aug[:n, n:2 * n] = np.diag(inv_c) * dt
        aug[:n, 2 * n] = s_air * dt
        phi = expm(aug)
        cached = (phi[:n, :n], phi[:n, n:2 * n], phi[:n, 2 * n])
        self._disc_cache[key] = cached
        return cached

    # -- CHP actualization ---------------------------------------------------

    def _actual_chp(self, requested: float, state: PlantState):
        frac = self.cfg.chp_min_load_fraction
        if frac <= 0.0:
            return min(max(requested, 0.0), CHP_MAX_KW), state.chp_on_timer + self.ts
        min_out = frac * CHP_MAX_KW
        if requested < 0.5 * min_out:
            target = 0.0
        else:
            target = min(max(requested, min_out), CHP_MAX_KW)
        was_on = state.chp_power_actual > 0.0
        turn = (target > 0.0) != was_on
        if turn and state.chp_on_timer < self.cfg.chp_dwell_h - 1e-9:
            # dwell violated: hold the previous on/off state
            target = min_out if was_on else 0.0
            timer = state.chp_on_timer + self.ts
        elif turn:
            timer = self.ts
        else:
            timer = state.chp_on_timer + self.ts
        return target, timer

    # -- one control step ----------------------------------------------------

    def step(self, state, u_dis, u_agg, d_row, tod: float, doy: int) -> PlantState:
        """Advance one control interval of ``ts`` hours.

        ``u_dis`` are the 18 per-zone heating/cooling powers, ``u_agg`` the
        five aggregate inputs, ``d_row`` is (theta_air, p_dem, p_pv).
        """
        u_dis = np.asarray(u_dis, dtype=float)
        u_agg = np.asarray(u_agg, dtype=float)
        theta_air, p_dem, p_pv = (float(v) for v in d_row)
        if not (np.all(np.isfinite(u_dis)) and np.all(np.isfinite(u_agg))):
            raise ValueError("non-finite control inputs")

        q_heat = np.clip(u_dis[:9], 0.0, None)
        q_cool = np.clip(u_dis[9:], None, 0.0)
        if np.any(u_dis[:9] < -1e-6) or np.any(u_dis[9:] > 1e-6):
            log.warning("plant clipped out-of-range zone powers")

        p_grid, p_chp_req, q_rad = u_agg[0], u_agg[1], u_agg[2]
        p_chp_act, timer = self._actual_chp(p_chp_req, state)
        load_frac = p_chp_act / CHP_MAX_KW if p_chp_act > 0 else 0.0
        chp_heat_req = p_chp_req / self.params.c_chp
        chp_heat_act = (
            p_chp_act / self.params.c_chp * self.cfg.efficiency(load_frac)
            if p_chp_act > 0
            else 0.0
        )
        denom = q_rad + chp_heat_req
        if denom > 1e-9:
            q_heat_eff = q_heat * (q_rad + chp_heat_act) / denom
        elif chp_heat_act > 0:
            q_heat_eff = chp_heat_act * self._w_building
        else:
            q_heat_eff = q_heat

        occupied = is_occupied(tod, doy)
        injection = q_heat_eff + q_cool + np.asarray(self.params.q_other)
        if occupied and self.cfg.occupancy_gain_peak:
            injection = injection + self.cfg.occupancy_gain_peak * self._w_building
        if self.cfg.demand_to_heat_fraction:
            injection = injection + (
                self.cfg.demand_to_heat_fraction * p_dem * self._w_building
            )
        if self.cfg.process_noise_kw:
            # std scales with relative zone capacity so small zones are not
            # swamped; process_noise_kw is the average-capacity-zone level
            injection = injection + self._rng.normal(
                0, self.cfg.process_noise_kw, 9) * self._noise_scale

        a_d, b_d, s_air = self._zone_matrices(occupied, doy)
        theta = np.asarray(state.zone_temps, dtype=float)
        for _ in range(self.n_substeps):
            theta = a_d @ theta + b_d @ injection + s_air * theta_air

        delta_e = self.ts * (
            p_grid + p_chp_act + p_pv - p_dem + (q_cool.sum()) / self.params.eps_c
        )
        max_delta = BATTERY_RATE_KW * self.ts
        if abs(delta_e) > max_delta + 1e-9:
            log.warning("battery rate limit clipped (%.1f kWh requested)", delta_e)
            delta_e = float(np.clip(delta_e, -max_delta, max_delta))
        e_next = state.battery_energy + delta_e
        if e_next < 0.0 or e_next > BATTERY_CAPACITY_KWH:
            log.warning("battery energy bound clipped (%.1f kWh)", e_next)
            e_next = float(np.clip(e_next, 0.0, BATTERY_CAPACITY_KWH))

        return PlantState(
            zone_temps=tuple(theta),
            battery_energy=e_next,
            chp_power_actual=p_chp_act,
            chp_on_timer=timer,
        )
