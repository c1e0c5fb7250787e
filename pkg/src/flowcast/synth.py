"""Deterministic synthetic city: street graph, POIs, visitors, pings, weather.

Hourly visitor rates follow ``base * daily(hour) * weekly(dow) *
seasonal(month) * open(t) * demand(t) + event spikes`` with Poisson draws;
``demand`` is a slowly-varying mean-one level (log-AR(1), partly shared across
the city) standing in for crowd momentum that no calendar column explains.
One POI can be configured as a single daily 14:00 spike to exercise extremely
sparse targets.  A coverage-fraction subsample of visitors walks the street
graph between POIs at 4 km/h, dropping a geolocation ping every ten minutes.
All randomness flows from one seed in a fixed draw order, so every artifact
is bit-reproducible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from datetime import date, timedelta
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .graph import EARTH_RADIUS_M, GeoPing, StreetGraph, attach_pois, haversine_m, write_pings_csv
from .series import HOUR_SECONDS, HourlySeries, format_hour, hour_to_datetime, parse_timestamp_hour, write_counts_csv

_M_PER_DEG_LAT = math.radians(1.0) * EARTH_RADIUS_M

NATIONAL_DAYS = [(1, 1), (1, 6), (5, 1), (8, 15), (10, 26), (11, 1), (12, 8), (12, 25), (12, 26)]
SCHOOL_RANGES = [((2, 1), (2, 7)), ((3, 28), (4, 6)), ((7, 5), (9, 4)), ((12, 24), (12, 31))]
SCHOOL_NEW_YEAR_END = (1, 6)  # winter break tail in the following year


@dataclass
class SynthSpec:
    """Generator knobs; defaults give two simulated years over 200 nodes."""

    seed: int = 0
    n_nodes: int = 200
    n_pois: int = 8
    center_lat: float = 47.4
    center_lon: float = 13.2
    box_m: float = 2000.0
    edge_cutoff_m: float = 150.0
    start: str = "2017-01-01T00:00:00"
    n_hours: int = 17520
    base_rates: tuple | None = None
    daily_amp: float = 3.0
    weekly_amp: float = 1.4
    seasonal_amp: float = 1.8
    open_start: int = 8
    open_end: int = 20
    sparse_poi: int | None = -1  # -1 = last POI, None = no sparse POI
    sparse_hour: int = 14
    events_per_poi: int = 10
    event_boost: float = 2.0
    event_hours: int = 3
    demand_rho: float = 0.97
    demand_sd: float = 0.4
    demand_shared: float = 0.5
    coverage: float = 0.03
    walk_speed_kmh: float = 4.0
    ping_interval_min: int = 10
    ping_jitter_m: float = 25.0
    missing_rate: float = 0.004

    def __post_init__(self) -> None:
        if self.n_nodes < self.n_pois or self.n_pois < 1:
            raise ValueError("need at least one POI and n_nodes >= n_pois")
        if self.n_hours < 1:
            raise ValueError("n_hours must be positive")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")
        if not 0.0 <= self.demand_rho < 1.0:
            raise ValueError("demand_rho must lie in [0, 1)")
        if self.demand_sd < 0.0:
            raise ValueError("demand_sd must be nonnegative")
        if not 0.0 <= self.demand_shared <= 1.0:
            raise ValueError("demand_shared must lie in [0, 1]")
        if self.base_rates is not None:
            if len(self.base_rates) != self.n_pois:
                raise ValueError("base_rates length must equal n_pois")
            if any(r < 0 for r in self.base_rates):
                raise ValueError("base rates must be nonnegative")
        for amp in (self.daily_amp, self.weekly_amp, self.seasonal_amp):
            if amp < 0:
                raise ValueError("amplitude coefficients must be nonnegative")
        if not 0 <= self.open_start < self.open_end <= 24:
            raise ValueError("opening hours must satisfy 0 <= start < end <= 24")
        if self.sparse_poi is not None and not -1 <= self.sparse_poi < self.n_pois:
            raise ValueError("sparse_poi out of range")
        parse_timestamp_hour(self.start)

    @property
    def start_hour(self) -> int:
        return parse_timestamp_hour(self.start)

    @property
    def rates(self) -> np.ndarray:
        if self.base_rates is not None:
            return np.asarray(self.base_rates, dtype=np.float64)
        return np.array([2.0 + (3 * k) % 7 for k in range(self.n_pois)])

    @property
    def sparse_index(self) -> int | None:
        if self.sparse_poi is None:
            return None
        return self.n_pois - 1 if self.sparse_poi == -1 else self.sparse_poi

    def to_dict(self) -> dict:
        payload = asdict(self)
        if payload["base_rates"] is not None:
            payload["base_rates"] = list(payload["base_rates"])
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        if payload.get("base_rates") is not None:
            payload = dict(payload, base_rates=tuple(payload["base_rates"]))
        return cls(**payload)

    @classmethod
    def from_file(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _offset_latlon(lat: float, lon: float, north_m: float, east_m: float) -> tuple[float, float]:
    return (
        float(lat + north_m / _M_PER_DEG_LAT),
        float(lon + east_m / (_M_PER_DEG_LAT * math.cos(math.radians(lat)))),
    )


class _UnionFind:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def generate_city(spec: SynthSpec) -> tuple[StreetGraph, list[dict]]:
    """Random geometric street graph plus a POI table near random nodes.

    Nodes are uniform over a ``box_m`` square; every pair closer than the
    cutoff becomes an edge, then a chain of shortest links joins the
    components so the graph is connected.
    """
    rng = np.random.default_rng([spec.seed, 0])
    n = spec.n_nodes
    half_lat = (spec.box_m / 2.0) / _M_PER_DEG_LAT
    half_lon = (spec.box_m / 2.0) / (_M_PER_DEG_LAT * math.cos(math.radians(spec.center_lat)))
    lats = spec.center_lat + rng.uniform(-half_lat, half_lat, n)
    lons = spec.center_lon + rng.uniform(-half_lon, half_lon, n)

    iu, iv = np.triu_indices(n, k=1)
    dists = haversine_m(lats[iu], lons[iu], lats[iv], lons[iv])
    near = dists < spec.edge_cutoff_m
    eu = iu[near].tolist()
    ev = iv[near].tolist()
    el = np.maximum(dists[near], 0.01).tolist()

    uf = _UnionFind(n)
    for a, b in zip(eu, ev):
        uf.union(a, b)
    comp_of = [uf.find(i) for i in range(n)]
    comps: dict[int, list[int]] = {}
    for i, root in enumerate(comp_of):
        comps.setdefault(root, []).append(i)
    ordered = sorted(comps.values(), key=min)
    merged = np.array(ordered[0], dtype=np.int64)
    for comp in ordered[1:]:
        cand = np.array(comp, dtype=np.int64)
        pair_d = haversine_m(
            lats[merged][:, None], lons[merged][:, None], lats[cand][None, :], lons[cand][None, :]
        )
        flat = int(np.argmin(pair_d))
        a = int(merged[flat // len(cand)])
        b = int(cand[flat % len(cand)])
        eu.append(a)
        ev.append(b)
        el.append(max(float(pair_d.ravel()[flat]), 0.01))
        merged = np.concatenate([merged, cand])

    graph = StreetGraph(
        node_ids=np.arange(n, dtype=np.int64),
        lats=lats,
        lons=lons,
        is_poi=np.zeros(n, dtype=bool),
        poi_ids=np.full(n, -1, dtype=np.int64),
        edge_u=np.array(eu, dtype=np.int64),
        edge_v=np.array(ev, dtype=np.int64),
        edge_len=np.array(el, dtype=np.float64),
    )

    anchor = rng.choice(n, size=spec.n_pois, replace=False)
    pois = []
    for k in range(spec.n_pois):
        d = rng.uniform(10.0, 60.0)
        bearing = rng.uniform(0.0, 2.0 * math.pi)
        node = int(anchor[k])
        lat, lon = _offset_latlon(
            float(lats[node]), float(lons[node]), d * math.cos(bearing), d * math.sin(bearing)
        )
        pois.append({"poi_id": k, "name": f"poi_{k}", "lat": lat, "lon": lon})
    return graph, pois


def generate_holidays(spec: SynthSpec) -> list[tuple[str, str]]:
    """Fixed-date national holidays and school breaks, one extra year of
    look-ahead so day-gap features near the span end stay computable."""
    first = hour_to_datetime(spec.start_hour).date().year
    last = hour_to_datetime(spec.start_hour + spec.n_hours - 1).date().year
    national: set[date] = set()
    school: set[date] = set()
    for year in range(first, last + 2):
        for month, day in NATIONAL_DAYS:
            national.add(date(year, month, day))
        for (m0, d0), (m1, d1) in SCHOOL_RANGES:
            cur = date(year, m0, d0)
            stop = date(year, m1, d1)
            while cur <= stop:
                school.add(cur)
                cur += timedelta(days=1)
        cur = date(year, 1, 1)
        stop = date(year, *SCHOOL_NEW_YEAR_END)
        while cur <= stop:
            school.add(cur)
            cur += timedelta(days=1)
    rows = [(d.isoformat(), "national") for d in sorted(national)]
    rows += [(d.isoformat(), "school") for d in sorted(school)]
    rows.sort()
    return rows


def _ar1(rng: np.random.Generator, n: int, rho: float, sigma: float) -> np.ndarray:
    eps = rng.standard_normal(n) * sigma
    return lfilter([1.0], [1.0, -rho], eps)


def generate_weather(spec: SynthSpec, rng: np.random.Generator) -> list[dict]:
    """Hourly weather rows with seasonal/diurnal structure and rare blanks."""
    t0 = spec.start_hour
    n = spec.n_hours
    doy = np.empty(n)
    hod = np.empty(n)
    for i in range(n):
        stamp = hour_to_datetime(t0 + i)
        doy[i] = stamp.timetuple().tm_yday
        hod[i] = stamp.hour
    temp = (
        9.0
        - 11.0 * np.cos(2.0 * np.pi * (doy - 15.0) / 365.25)
        + 5.0 * np.sin(2.0 * np.pi * (hod - 9.0) / 24.0)
        + _ar1(rng, n, 0.97, 0.8)
    )
    wind = np.abs(2.5 + _ar1(rng, n, 0.9, 0.9))
    rain_pot = _ar1(rng, n, 0.95, 0.5)
    precip = np.clip(rain_pot - 0.7, 0.0, None) * 3.0
    clouds = np.clip(np.round(35.0 + 60.0 * np.tanh(rain_pot) + 12.0 * rng.standard_normal(n)), 0, 100)
    feels = temp - 0.25 * wind - 1.5 * (precip > 0)
    missing = rng.random((n, 6)) < spec.missing_rate

    rows = []
    for i in range(n):
        raining = precip[i] > 0
        if raining and temp[i] < 0.5:
            desc = "Snow"
        elif raining:
            desc = "Rain"
        elif clouds[i] >= 60:
            desc = "Clouds"
        else:
            desc = "Clear"
        row = {
            "timestamp": format_hour(t0 + i),
            "temp": "" if missing[i, 0] else f"{temp[i]:.1f}",
            "feels_like": "" if missing[i, 1] else f"{feels[i]:.1f}",
            "wind": "" if missing[i, 2] else f"{wind[i]:.1f}",
            "precip": "" if missing[i, 3] else f"{precip[i]:.2f}",
            "clouds": "" if missing[i, 4] else f"{int(clouds[i])}",
            "description": "" if missing[i, 5] else desc,
        }
        rows.append(row)
    return rows


def _shape_factors(spec: SynthSpec, hours: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n = len(hours)
    hod = np.empty(n)
    dow = np.empty(n)
    month = np.empty(n)
    for i, h in enumerate(hours):
        stamp = hour_to_datetime(int(h))
        hod[i] = stamp.hour
        dow[i] = stamp.weekday()
        month[i] = stamp.month
    s_day = 0.5 * (1.0 + np.cos(2.0 * np.pi * (hod - 14.0) / 24.0))
    s_week = 0.5 * (1.0 + np.cos(2.0 * np.pi * (dow - 5.5) / 7.0))
    s_year = 0.5 * (1.0 + np.cos(2.0 * np.pi * (month - 7.0) / 12.0))
    daily = 1.0 + (spec.daily_amp - 1.0) * s_day
    weekly = 1.0 + (spec.weekly_amp - 1.0) * s_week
    seasonal = 1.0 + (spec.seasonal_amp - 1.0) * s_year
    return daily, weekly, seasonal, hod


def _demand_factors(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray | None:
    """Mean-one multiplicative demand level, (n_hours, n_pois).

    Log-level is AR(1) per hour with stationary sd ``demand_sd``; a
    ``demand_shared`` variance fraction moves the whole city together.  The
    half-variance shift keeps E[level] at exactly one.
    """
    if spec.demand_sd == 0.0:
        return None
    rho = spec.demand_rho
    step_sd = spec.demand_sd * math.sqrt(1.0 - rho * rho)

    def walk(eps: np.ndarray) -> np.ndarray:
        innov = eps * step_sd
        innov[0] = eps[0] * spec.demand_sd  # stationary start
        return lfilter([1.0], [1.0, -rho], innov)

    shared = walk(rng.normal(size=spec.n_hours))
    own = np.stack([walk(rng.normal(size=spec.n_hours)) for _ in range(spec.n_pois)], axis=1)
    g = math.sqrt(spec.demand_shared) * shared[:, None] + math.sqrt(1.0 - spec.demand_shared) * own
    return np.exp(g - 0.5 * spec.demand_sd**2)


def _rate_matrix(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    hours = np.arange(spec.start_hour, spec.start_hour + spec.n_hours, dtype=np.int64)
    daily, weekly, seasonal, hod = _shape_factors(spec, hours)
    open_mask = (hod >= spec.open_start) & (hod < spec.open_end)
    rates = spec.rates
    demand = _demand_factors(spec, rng)
    lam = np.zeros((spec.n_hours, spec.n_pois))
    sparse = spec.sparse_index
    n_days = spec.n_hours // 24
    for k in range(spec.n_pois):
        if k == sparse:
            lam[:, k] = rates[k] * weekly * seasonal * (hod == spec.sparse_hour)
        else:
            lam[:, k] = rates[k] * daily * weekly * seasonal * open_mask
    if demand is not None:
        lam *= demand
    for k in range(spec.n_pois):
        if k == sparse or not spec.events_per_poi or n_days == 0:
            continue
        days = rng.choice(n_days, size=min(spec.events_per_poi, n_days), replace=False)
        for day in days:
            start = int(
                rng.integers(spec.open_start, max(spec.open_start + 1, spec.open_end - spec.event_hours))
            )
            lo = day * 24 + start
            hi = min(lo + spec.event_hours, spec.n_hours)
            lam[lo:hi, k] += rates[k] * spec.event_boost
    return lam


def _greedy_path(
    nbrs: list[list[tuple[int, float]]],
    lats: np.ndarray,
    lons: np.ndarray,
    origin: int,
    target: int,
    max_steps: int = 150,
) -> tuple[list[int], list[float]]:
    """Node sequence and cumulative metres, walking greedily toward target."""
    path = [origin]
    cum = [0.0]
    node = origin
    prev = -1
    while node != target and len(path) < max_steps:
        here = haversine_m(lats[node], lons[node], lats[target], lons[target])
        best = -1
        best_d = here
        best_len = 0.0
        for nb, ln in nbrs[node]:
            d = haversine_m(lats[nb], lons[nb], lats[target], lons[target])
            if d < best_d:
                best, best_d, best_len = nb, d, ln
        if best < 0 or best == prev:
            break
        cum.append(cum[-1] + best_len)
        path.append(best)
        prev, node = node, best
    return path, cum


def generate_pings(
    spec: SynthSpec,
    city: StreetGraph,
    pois: list[dict],
    counts: np.ndarray,
    rng: np.random.Generator,
) -> list[GeoPing]:
    """Walk a coverage-fraction subsample of visitors between POIs."""
    if spec.coverage == 0.0:
        return []
    attached = attach_pois(city, pois)
    nbrs = attached.neighbor_lists()
    lats, lons = attached.lats, attached.lons
    poi_nodes = attached.poi_node_indices()
    covered = rng.binomial(counts.astype(np.int64), spec.coverage)
    speed_m_min = spec.walk_speed_kmh * 1000.0 / 60.0
    interval = spec.ping_interval_min
    pings_per_visit = max(1, 60 // interval)
    pings: list[GeoPing] = []
    device = 0
    t0 = spec.start_hour
    # origin/target are always POI nodes, so only P*(P-1) walks exist
    route_cache: dict[tuple[int, int], tuple[list[int], list[float]]] = {}
    for g in range(counts.shape[0]):
        hour_sec = (t0 + g) * HOUR_SECONDS
        for k in range(counts.shape[1]):
            for _ in range(int(covered[g, k])):
                name = f"dev_{device:06d}"
                device += 1
                if spec.n_pois > 1:
                    other = int(rng.integers(0, spec.n_pois - 1))
                    other += other >= k
                else:
                    other = k
                route = (int(poi_nodes[other]), int(poi_nodes[k]))
                if route not in route_cache:
                    route_cache[route] = _greedy_path(nbrs, lats, lons, route[0], route[1])
                path, cum = route_cache[route]
                start_sec = int(rng.uniform(0.0, 5.0) * 60.0)
                jitter = rng.normal(0.0, spec.ping_jitter_m, size=(pings_per_visit, 2))
                for j in range(pings_per_visit):
                    walked = speed_m_min * (j * interval)
                    pos = int(np.searchsorted(cum, walked, side="right")) - 1
                    node = path[pos]
                    lat, lon = _offset_latlon(float(lats[node]), float(lons[node]), jitter[j, 0], jitter[j, 1])
                    pings.append(GeoPing(name, hour_sec + start_sec + j * interval * 60, lat, lon))
    return pings


def generate_visits(
    spec: SynthSpec,
    city: StreetGraph,
    pois: list[dict],
) -> tuple[HourlySeries, list[GeoPing], list[dict], list[tuple[str, str]]]:
    """Counts, pings, weather rows, and holiday rows for the spec's span."""
    rng = np.random.default_rng([spec.seed, 1])
    weather_rows = generate_weather(spec, rng)
    lam = _rate_matrix(spec, rng)
    counts = rng.poisson(lam).astype(np.float64)
    pings = generate_pings(spec, city, pois, counts, rng)
    hours = np.arange(spec.start_hour, spec.start_hour + spec.n_hours, dtype=np.int64)
    series = HourlySeries(hours, counts, [f"poi_{k}" for k in range(spec.n_pois)])
    return series, pings, weather_rows, generate_holidays(spec)


@dataclass
class SynthData:
    spec: SynthSpec
    city: StreetGraph
    pois: list[dict]
    counts: HourlySeries
    pings: list[GeoPing]
    weather_rows: list[dict]
    holiday_rows: list[tuple[str, str]]

    def write(self, out_dir: str | Path) -> list[Path]:
        return write_dataset(self, out_dir)


def generate(spec: SynthSpec) -> SynthData:
    city, pois = generate_city(spec)
    counts, pings, weather_rows, holiday_rows = generate_visits(spec, city, pois)
    return SynthData(spec, city, pois, counts, pings, weather_rows, holiday_rows)


def write_dataset(data: SynthData, out_dir: str | Path) -> list[Path]:
    """Emit every CSV the pipeline consumes, plus the resolved spec."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph = data.city

    nodes_path = out / "nodes.csv"
    with nodes_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "lat", "lon"])
        for i in range(graph.n_nodes):
            writer.writerow([int(graph.node_ids[i]), repr(float(graph.lats[i])), repr(float(graph.lons[i]))])

    edges_path = out / "edges.csv"
    with edges_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v", "length_m"])
        for e in range(graph.n_edges):
            writer.writerow(
                [
                    int(graph.node_ids[graph.edge_u[e]]),
                    int(graph.node_ids[graph.edge_v[e]]),
                    repr(float(graph.edge_len[e])),
                ]
            )

    pois_path = out / "pois.csv"
    with pois_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["poi_id", "name", "lat", "lon"])
        for poi in data.pois:
            writer.writerow([poi["poi_id"], poi["name"], repr(poi["lat"]), repr(poi["lon"])])

    counts_path = out / "counts.csv"
    write_counts_csv(counts_path, data.counts)

    pings_path = out / "pings.csv"
    write_pings_csv(pings_path, data.pings)

    weather_path = out / "weather.csv"
    with weather_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        cols = ["timestamp", "temp", "feels_like", "wind", "precip", "clouds", "description"]
        writer.writerow(cols)
        for row in data.weather_rows:
            writer.writerow([row[c] for c in cols])

    holidays_path = out / "holidays.csv"
    with holidays_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "kind"])
        for day, kind in data.holiday_rows:
            writer.writerow([day, kind])

    spec_path = out / "spec.json"
    spec_path.write_text(json.dumps(data.spec.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return [nodes_path, edges_path, pois_path, counts_path, pings_path, weather_path, holidays_path, spec_path]
