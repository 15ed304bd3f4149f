"""Synthetic minute-resolution profiles and training scenarios.

The generator replaces the proprietary data source used in the original
study with a seeded recipe that keeps its conditioning steps: per-bus
loads are scaled so the daily peak hits peak_scale times the nominal bus
load, lagging power factors are drawn once per bus from pf_range, solar
buses follow the penetration rule, and inverter ratings oversize the
daily solar peak by the oversize factor.

A scenario s consists of the per-inverter control inputs z[n, :, s], the
exogenous voltage term y_s = R (p_g - p_c) - X q_c, and the reactive
headroom q_bar = sqrt(max(s_bar^2 - p_g^2, 0)).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

from .feeder import FeederModel, Sensitivities

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class GenConfig:
    """Profile generator parameters; all times are minutes."""

    horizon_min: int = 480
    penetration: float = 0.75
    peak_scale: float = 1.5
    pf_range: tuple[float, float] = (0.9, 0.95)
    oversize: float = 1.1
    noise: float = 0.10      # stationary relative volatility, <= 0.15 typical
    solar_scale: float = 1.0
    start_min: int = 480     # 08:00
    seed: int = 0


@dataclass
class ProfileSet:
    """Minute-indexed load/solar profiles; immutable after construction."""

    timestamps: np.ndarray  # absolute minute of day, length T
    p_c: np.ndarray         # T x N active load (pu, >= 0)
    q_c: np.ndarray         # T x N reactive load (pu, consumption positive)
    p_g: np.ndarray         # T x N solar generation (pu, >= 0)
    s_bar: np.ndarray       # N inverter ratings (pu, 0 for non-solar buses)

    @property
    def horizon(self) -> int:
        return self.p_c.shape[0]

    @property
    def n_buses(self) -> int:
        return self.p_c.shape[1]

    @property
    def solar_buses(self) -> np.ndarray:
        """1-based bus ids carrying an inverter."""
        return np.flatnonzero(self.s_bar > 0) + 1


def solar_bus_ids(n: int, penetration: float) -> list[int]:
    """Bus ids (1..N) that carry solar under the penetration rule.

    The three study levels are reproduced exactly: 25% keeps ids divisible
    by 4, 50% keeps even ids, 75% excludes ids divisible by 4.  Other
    fractions fall back to an evenly spaced deterministic selection.
    """
    if not 0.0 <= penetration <= 1.0:
        raise ValueError("penetration must lie in [0, 1]")
    ids = list(range(1, n + 1))
    if penetration == 0.0:
        return []
    if penetration == 1.0:
        return ids
    if penetration == 0.25:
        return [i for i in ids if i % 4 == 0]
    if penetration == 0.5:
        return [i for i in ids if i % 2 == 0]
    if penetration == 0.75:
        return [i for i in ids if i % 4 != 0]
    k = max(1, int(round(penetration * n)))
    pick = np.unique(np.round(np.linspace(1, n, k)).astype(int))
    j = 1
    while len(pick) < k:  # backfill collisions deterministically
        if j not in pick:
            pick = np.sort(np.append(pick, j))
        j += 1
    return [int(i) for i in pick]


def _ar1(rng: np.random.Generator, shape, phi: float, std: float) -> np.ndarray:
    """Stationary AR(1) noise along axis 0 with the given marginal std."""
    w = rng.standard_normal(shape) * std * np.sqrt(1.0 - phi * phi)
    return lfilter([1.0], [1.0, -phi], w, axis=0)


def synthesize_profiles(f: FeederModel, config: GenConfig,
                        seed: int | None = None) -> ProfileSet:
    """Deterministic synthetic profiles for the feeder's N load buses."""
    T = config.horizon_min
    if T < 2:
        raise ValueError("horizon_min must be at least 2")
    if not 0.0 <= config.penetration <= 1.0:
        raise ValueError("penetration must lie in [0, 1]")
    n = f.n
    rng = np.random.default_rng(config.seed if seed is None else seed)
    t = config.start_min + np.arange(T)

    # draws in fixed order so identical seeds give identical profiles
    pf = rng.uniform(config.pf_range[0], config.pf_range[1], size=n)
    load_noise = _ar1(rng, (T, n), phi=0.97, std=config.noise)
    cloud_noise = _ar1(rng, (T, n), phi=0.90, std=config.noise)

    # diurnal load: raised cosine peaking at 19:00
    base = 0.55 + 0.30 * np.cos(2.0 * np.pi * (t - 1140.0) / 1440.0)
    load_shape = np.maximum(base[:, None] * (1.0 + load_noise), 0.02)
    peak = load_shape.max(axis=0)
    scale = config.peak_scale * f.p_nom[1:] / peak
    p_c = load_shape * scale
    q_c = p_c * np.tan(np.arccos(pf))[None, :]

    # solar bell over 06:00-18:00, multiplicative cloud noise
    bell = np.where(np.abs(t - 720.0) < 360.0,
                    np.cos(np.pi * (t - 720.0) / 720.0), 0.0)
    bell = np.maximum(bell, 0.0) ** 1.2
    solar_shape = bell[:, None] * np.clip(1.0 + cloud_noise, 0.0, 1.5)
    solar = solar_shape * (config.peak_scale * f.p_nom[1:] * config.solar_scale)

    p_g = np.zeros((T, n))
    s_bar = np.zeros(n)
    for bus in solar_bus_ids(n, config.penetration):
        p_g[:, bus - 1] = solar[:, bus - 1]
        s_bar[bus - 1] = config.oversize * solar[:, bus - 1].max()
    return ProfileSet(timestamps=t, p_c=p_c, q_c=q_c, p_g=p_g, s_bar=s_bar)


def profiles_to_csv(profiles: ProfileSet, path) -> None:
    """Long-format export: t,bus,p_c,q_c,p_g."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bus", "p_c", "q_c", "p_g"])
        for ti, tval in enumerate(profiles.timestamps):
            for bus in range(1, profiles.n_buses + 1):
                w.writerow([int(tval), bus,
                            repr(float(profiles.p_c[ti, bus - 1])),
                            repr(float(profiles.q_c[ti, bus - 1])),
                            repr(float(profiles.p_g[ti, bus - 1]))])


def profiles_from_csv(path, oversize: float = 1.1) -> ProfileSet:
    """Read the long-format CSV; ratings are rebuilt as oversize * peak p_g."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"t", "bus", "p_c", "q_c", "p_g"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {sorted(need)}")
        for row in reader:
            rows.append((int(row["t"]), int(row["bus"]), float(row["p_c"]),
                         float(row["q_c"]), float(row["p_g"])))
    if not rows:
        raise ValueError(f"{path}: no profile rows")
    ts = sorted({r[0] for r in rows})
    buses = sorted({r[1] for r in rows})
    if buses != list(range(1, len(buses) + 1)):
        raise ValueError("profile CSV must cover buses 1..N")
    t_index = {tv: i for i, tv in enumerate(ts)}
    T, n = len(ts), len(buses)
    p_c = np.zeros((T, n))
    q_c = np.zeros((T, n))
    p_g = np.zeros((T, n))
    for tval, bus, pc, qc, pg in rows:
        i = t_index[tval]
        p_c[i, bus - 1] = pc
        q_c[i, bus - 1] = qc
        p_g[i, bus - 1] = pg
    peak = p_g.max(axis=0)
    s_bar = np.where(peak > 0, oversize * peak, 0.0)
    return ProfileSet(timestamps=np.array(ts), p_c=p_c, q_c=q_c, p_g=p_g,
                      s_bar=s_bar)


@dataclass(frozen=True)
class InputLayout:
    """Controller input structure: the local triple and/or remote flows.

    remote_lines names lines by the bus they feed; the corresponding
    entries are active line flows aggregated losslessly over the subtree.
    """

    local: bool = True
    remote_lines: tuple[int, ...] = ()

    @property
    def width(self) -> int:
        return (3 if self.local else 0) + len(self.remote_lines)


@dataclass
class ScenarioSet:
    """Materialized training scenarios over one window."""

    scenario_ids: np.ndarray   # indices into the source profile horizon
    y: np.ndarray              # S x N exogenous voltage terms
    q_bar: np.ndarray          # S x N reactive limits
    z: np.ndarray              # N x M x S normalized inputs
    mean: np.ndarray           # N x M normalization means
    std: np.ndarray            # N x M normalization stds (floored)
    layout: InputLayout
    inverter_buses: tuple[int, ...]
    s_bar: np.ndarray          # N ratings (reference)
    p_g: np.ndarray            # S x N generation slice (reference)
    normalized: bool = True

    @property
    def S(self) -> int:
        return len(self.scenario_ids)

    @property
    def n_buses(self) -> int:
        return self.y.shape[1]

    def inputs_for(self, bus: int) -> np.ndarray:
        """Normalized M x S input matrix for one bus."""
        return self.z[bus - 1]

    def subset(self, indices) -> "ScenarioSet":
        """Scenario subset (CV folds); normalization stats are kept."""
        idx = np.asarray(list(indices), dtype=int)
        if idx.size == 0:
            raise ValueError("scenario subset is empty")
        return ScenarioSet(
            scenario_ids=self.scenario_ids[idx], y=self.y[idx],
            q_bar=self.q_bar[idx], z=self.z[:, :, idx], mean=self.mean,
            std=self.std, layout=self.layout,
            inverter_buses=self.inverter_buses, s_bar=self.s_bar,
            p_g=self.p_g[idx], normalized=self.normalized)


def reactive_headroom(s_bar: np.ndarray, p_g: np.ndarray) -> np.ndarray:
    """q_bar = sqrt(max(s_bar^2 - p_g^2, 0)); the clamp guards data noise."""
    return np.sqrt(np.maximum(np.asarray(s_bar) ** 2 - np.asarray(p_g) ** 2, 0.0))


def line_flows(f: FeederModel, fed_buses, p_c_rows: np.ndarray,
               p_g_rows: np.ndarray) -> np.ndarray:
    """Active flow on the line feeding each named bus, lossless aggregation.

    Flow is the sum of downstream net active consumption (p_c - p_g);
    rows may be (T, N) or (N,).
    """
    net = np.atleast_2d(p_c_rows - p_g_rows)
    out = np.zeros((net.shape[0], len(fed_buses)))
    for j, bus in enumerate(fed_buses):
        if not 1 <= bus <= f.n:
            raise ValueError(f"remote line feeds unknown bus {bus}")
        down = [m - 1 for m in f.subtree(bus)]
        out[:, j] = net[:, down].sum(axis=1)
    return out


def raw_inputs(profiles: ProfileSet, rows: np.ndarray, layout: InputLayout,
               f: FeederModel | None = None) -> np.ndarray:
    """Un-normalized inputs for the given time rows: (len(rows), N, M)."""
    rows = np.asarray(rows, dtype=int)
    p_c = profiles.p_c[rows]
    q_c = profiles.q_c[rows]
    p_g = profiles.p_g[rows]
    parts = []
    if layout.local:
        q_bar = reactive_headroom(profiles.s_bar[None, :], p_g)
        parts.extend([q_bar, p_c - p_g, q_c])
    if layout.remote_lines:
        if f is None:
            raise ValueError("remote input channels need the feeder topology")
        flows = line_flows(f, layout.remote_lines, p_c, p_g)
        # same remote readings are broadcast to every bus
        parts.extend(np.repeat(flows[:, j][:, None], profiles.n_buses, axis=1)
                     for j in range(flows.shape[1]))
    if not parts:
        raise ValueError("input layout selects no channels")
    return np.stack(parts, axis=2)  # (T, N, M)


def build_scenarios(profiles: ProfileSet, window, sens: Sensitivities,
                    layout: InputLayout = InputLayout(), normalize: bool = True,
                    f: FeederModel | None = None) -> ScenarioSet:
    """Materialize scenarios for the time indices in `window`."""
    rows = np.asarray(list(window), dtype=int)
    if rows.size == 0:
        raise ValueError("scenario window is empty")
    if rows.min() < 0 or rows.max() >= profiles.horizon:
        raise ValueError("scenario window outside the profile horizon")

    p_c = profiles.p_c[rows]
    q_c = profiles.q_c[rows]
    p_g = profiles.p_g[rows]
    y = (p_g - p_c) @ sens.R - q_c @ sens.X  # R, X symmetric
    q_bar = reactive_headroom(profiles.s_bar[None, :], p_g)

    z_raw = raw_inputs(profiles, rows, layout, f)        # (S, N, M)
    z = np.transpose(z_raw, (1, 2, 0)).copy()            # (N, M, S)
    if normalize:
        mean = z.mean(axis=2)
        std = np.maximum(z.std(axis=2), STD_FLOOR)
        z = (z - mean[:, :, None]) / std[:, :, None]
    else:
        mean = np.zeros(z.shape[:2])
        std = np.ones(z.shape[:2])

    inverter_buses = tuple(int(b) for b in profiles.solar_buses)
    return ScenarioSet(scenario_ids=rows, y=y, q_bar=q_bar, z=z, mean=mean,
                       std=std, layout=layout, inverter_buses=inverter_buses,
                       s_bar=profiles.s_bar.copy(), p_g=p_g,
                       normalized=normalize)


class GridPoint(NamedTuple):
    """One minute of grid conditions, as seen by dispatch."""

    t: int
    y: np.ndarray        # N exogenous term
    q_bar: np.ndarray    # N reactive limits
    z_raw: np.ndarray    # N x M raw controller inputs
    p_net: np.ndarray    # N net active injection p_g - p_c
    q_c: np.ndarray      # N reactive load
    p_g: np.ndarray      # N solar generation


def grid_point(profiles: ProfileSet, t: int, sens: Sensitivities,
               layout: InputLayout = InputLayout(),
               f: FeederModel | None = None) -> GridPoint:
    """Grid conditions at minute t, built with the scenario formulas."""
    if not 0 <= t < profiles.horizon:
        raise ValueError("time index outside the profile horizon")
    rows = np.array([t])
    p_c = profiles.p_c[t]
    q_c = profiles.q_c[t]
    p_g = profiles.p_g[t]
    y = sens.R @ (p_g - p_c) - sens.X @ q_c
    q_bar = reactive_headroom(profiles.s_bar, p_g)
    z = raw_inputs(profiles, rows, layout, f)[0]
    return GridPoint(t=t, y=y, q_bar=q_bar, z_raw=z, p_net=p_g - p_c,
                     q_c=q_c, p_g=p_g)


def augment_input(z: np.ndarray) -> np.ndarray:
    """Prepend the constant feature used when the intercept is dropped."""
    z = np.asarray(z, dtype=float).ravel()
    return np.concatenate(([1.0], z))
