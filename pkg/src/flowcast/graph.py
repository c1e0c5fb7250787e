"""Street graphs, POI attachment, spatial lookup, and geolocation binning.

Nodes live at WGS84 coordinates; edges are undirected street segments with a
positive length in metres.  The adjacency used by the graph-masked recurrent
model weights each edge by the inverse segment length and row-normalizes, so
every row of the normalized matrix sums to one.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .series import HourlySeries, hour_of_seconds, parse_timestamp_seconds

EARTH_RADIUS_M = 6_371_000.0
POI_ATTACH_RADIUS_M = 80.0
POI_ATTACH_LIMIT = 5
MIN_EDGE_LENGTH_M = 1.0

_METERS_PER_DEG_LAT = math.radians(1.0) * EARTH_RADIUS_M


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in metres; accepts scalars or numpy arrays."""
    phi1 = np.radians(np.asarray(lat1, dtype=np.float64))
    phi2 = np.radians(np.asarray(lat2, dtype=np.float64))
    dphi = phi2 - phi1
    dlam = np.radians(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    h = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def _check_coord(lat: float, lon: float, where: str) -> None:
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise ValueError(f"{where}: coordinate ({lat}, {lon}) outside valid range")


@dataclass
class GeoPing:
    """One anonymized device observation."""

    device: str
    t_seconds: int
    lat: float
    lon: float

    def __post_init__(self) -> None:
        _check_coord(self.lat, self.lon, f"ping from {self.device}")


@dataclass
class StreetGraph:
    """Immutable-by-convention street graph; mutate via the helpers only."""

    node_ids: np.ndarray
    lats: np.ndarray
    lons: np.ndarray
    is_poi: np.ndarray
    poi_ids: np.ndarray  # -1 for street nodes
    edge_u: np.ndarray  # node *indices*, not ids
    edge_v: np.ndarray
    edge_len: np.ndarray
    _id_to_index: dict = field(default_factory=dict, repr=False)
    _grid: "GridIndex | None" = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        self.lats = np.asarray(self.lats, dtype=np.float64)
        self.lons = np.asarray(self.lons, dtype=np.float64)
        self.is_poi = np.asarray(self.is_poi, dtype=bool)
        self.poi_ids = np.asarray(self.poi_ids, dtype=np.int64)
        self.edge_u = np.asarray(self.edge_u, dtype=np.int64)
        self.edge_v = np.asarray(self.edge_v, dtype=np.int64)
        self.edge_len = np.asarray(self.edge_len, dtype=np.float64)
        n = self.node_ids.shape[0]
        if not (self.lats.shape[0] == self.lons.shape[0] == self.is_poi.shape[0] == self.poi_ids.shape[0] == n):
            raise ValueError("node arrays disagree in length")
        if np.unique(self.node_ids).size != n:
            raise ValueError("duplicate node ids")
        if self.edge_len.size and np.any(self.edge_len <= 0.0):
            raise ValueError("edge lengths must be positive")
        if self.edge_u.size:
            if self.edge_u.min() < 0 or self.edge_v.min() < 0 or self.edge_u.max() >= n or self.edge_v.max() >= n:
                raise ValueError("edge endpoint index out of range")
        pois = np.sort(self.poi_ids[self.is_poi])
        if pois.size and not np.array_equal(pois, np.arange(pois.size)):
            raise ValueError("POI ids must be distinct and contiguous from 0")
        self._id_to_index = {int(i): k for k, i in enumerate(self.node_ids)}

    @property
    def n_nodes(self) -> int:
        return int(self.node_ids.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edge_u.shape[0])

    @property
    def n_pois(self) -> int:
        return int(self.is_poi.sum())

    def index_of(self, node_id: int) -> int:
        try:
            return self._id_to_index[int(node_id)]
        except KeyError:
            raise KeyError(f"unknown node id {node_id}") from None

    def poi_node_indices(self) -> np.ndarray:
        """Node indices of POI nodes, ordered by poi-id."""
        idx = np.flatnonzero(self.is_poi)
        return idx[np.argsort(self.poi_ids[idx], kind="stable")]

    def neighbor_lists(self) -> list[list[tuple[int, float]]]:
        out: list[list[tuple[int, float]]] = [[] for _ in range(self.n_nodes)]
        for u, v, ln in zip(self.edge_u, self.edge_v, self.edge_len):
            out[int(u)].append((int(v), float(ln)))
            out[int(v)].append((int(u), float(ln)))
        return out

    def grid(self) -> "GridIndex":
        if self._grid is None:
            self._grid = GridIndex(self.lats, self.lons, priority=self.node_ids)
        return self._grid


@dataclass
class NormalizedAdjacency:
    """Row-stochastic inverse-length adjacency plus the raw weighted degrees."""

    a_hat: np.ndarray
    degree: np.ndarray


class GridIndex:
    """Uniform lat/lon bucket grid for nearest-node queries, ~200 m cells.

    The ring search keeps expanding until the conservative lower bound on the
    distance to any unvisited cell exceeds the best hit, so results match a
    brute-force scan; degenerate layouts fall back to the full scan.
    """

    CELL_M = 200.0

    def __init__(self, lats: np.ndarray, lons: np.ndarray, priority: np.ndarray | None = None) -> None:
        if lats.size == 0:
            raise ValueError("cannot index an empty node set")
        self.lats = lats
        self.lons = lons
        # tie-break key per node (node ids); defaults to the array index
        self.priority = np.arange(lats.shape[0], dtype=np.int64) if priority is None else np.asarray(priority, dtype=np.int64)
        self.lat0 = float(lats.min())
        self.lon0 = float(lons.min())
        max_abs_lat = min(float(np.abs(lats).max()) + 0.01, 89.0)
        self._cos_floor = max(math.cos(math.radians(max_abs_lat)), 0.01)
        self.lat_step = self.CELL_M / _METERS_PER_DEG_LAT
        self.lon_step = self.CELL_M / (_METERS_PER_DEG_LAT * self._cos_floor)
        ci = np.floor((lats - self.lat0) / self.lat_step).astype(np.int64)
        cj = np.floor((lons - self.lon0) / self.lon_step).astype(np.int64)
        self.ci_max = int(ci.max())
        self.cj_max = int(cj.max())
        cells: dict[tuple[int, int], list[int]] = {}
        for k in range(lats.shape[0]):
            cells.setdefault((int(ci[k]), int(cj[k])), []).append(k)
        self.cells = {key: np.array(val, dtype=np.int64) for key, val in cells.items()}
        # lower bound on metres per whole cell step, used for ring pruning
        self._lat_cell_m = self.lat_step * _METERS_PER_DEG_LAT
        self._lon_cell_m = self.lon_step * _METERS_PER_DEG_LAT * self._cos_floor * (2.0 / math.pi)

    def _cell_of(self, lat: float, lon: float) -> tuple[int, int]:
        return (
            int(math.floor((lat - self.lat0) / self.lat_step)),
            int(math.floor((lon - self.lon0) / self.lon_step)),
        )

    def _ring_members(self, ci: int, cj: int, r: int) -> list[np.ndarray]:
        found = []
        if r == 0:
            hit = self.cells.get((ci, cj))
            return [hit] if hit is not None else []
        for dj in range(-r, r + 1):
            for di in (-r, r):
                hit = self.cells.get((ci + di, cj + dj))
                if hit is not None:
                    found.append(hit)
        for di in range(-r + 1, r):
            for dj in (-r, r):
                hit = self.cells.get((ci + di, cj + dj))
                if hit is not None:
                    found.append(hit)
        return found

    def query(self, lat: float, lon: float, mask: np.ndarray | None = None) -> int:
        """Index of the node nearest to (lat, lon); distance ties -> lower index.

        ``mask`` optionally restricts candidates (True = eligible).
        """
        ci, cj = self._cell_of(lat, lon)
        max_ring = max(self.ci_max + 1, self.cj_max + 1, abs(ci), abs(cj)) + 1
        cos_q = max(math.cos(math.radians(abs(lat))), 0.01)
        lon_floor_m = self._lon_cell_m * math.sqrt(min(cos_q / self._cos_floor, 1.0))
        cell_floor_m = min(self._lat_cell_m, lon_floor_m)
        best_idx = -1
        best_dist = math.inf
        best_prio = np.iinfo(np.int64).max
        for r in range(max_ring + 1):
            if best_idx >= 0 and (r - 1) * cell_floor_m > best_dist:
                break
            members = self._ring_members(ci, cj, r)
            if not members:
                continue
            cand = np.concatenate(members)
            if mask is not None:
                cand = cand[mask[cand]]
                if cand.size == 0:
                    continue
            dist = haversine_m(lat, lon, self.lats[cand], self.lons[cand])
            order = np.lexsort((self.priority[cand], dist))
            top = int(cand[order[0]])
            top_dist = float(dist[order[0]])
            top_prio = int(self.priority[top])
            if top_dist < best_dist or (top_dist == best_dist and top_prio < best_prio):
                best_idx = top
                best_dist = top_dist
                best_prio = top_prio
        if best_idx < 0:
            # all candidates masked out in every cell: brute force over eligible nodes
            idx = np.arange(self.lats.shape[0]) if mask is None else np.flatnonzero(mask)
            if idx.size == 0:
                raise ValueError("no eligible nodes")
            dist = haversine_m(lat, lon, self.lats[idx], self.lons[idx])
            order = np.lexsort((self.priority[idx], dist))
            best_idx = int(idx[order[0]])
        return best_idx

    def radius_query(self, lat: float, lon: float, radius_m: float) -> np.ndarray:
        """Indices of all nodes within ``radius_m`` (inclusive)."""
        dlat = radius_m / _METERS_PER_DEG_LAT
        dlon = radius_m / (_METERS_PER_DEG_LAT * self._cos_floor)
        ci_lo, cj_lo = self._cell_of(lat - dlat, lon - dlon)
        ci_hi, cj_hi = self._cell_of(lat + dlat, lon + dlon)
        members = []
        for ci in range(ci_lo - 1, ci_hi + 2):
            for cj in range(cj_lo - 1, cj_hi + 2):
                hit = self.cells.get((ci, cj))
                if hit is not None:
                    members.append(hit)
        if not members:
            return np.empty(0, dtype=np.int64)
        cand = np.concatenate(members)
        dist = haversine_m(lat, lon, self.lats[cand], self.lons[cand])
        keep = dist <= radius_m
        return cand[keep]


def load_street_graph(nodes_path: str | Path, edges_path: str | Path) -> StreetGraph:
    """Load a street graph from a node table and an edge list.

    Node CSV: ``node_id,lat,lon``.  Edge CSV: ``u,v,length_m``.  Duplicate
    undirected edges collapse to the minimum length; malformed rows raise with
    the file name and line number.
    """
    nodes_path = Path(nodes_path)
    edges_path = Path(edges_path)

    ids: list[int] = []
    lats: list[float] = []
    lons: list[float] = []
    with nodes_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header[:3]] != ["node_id", "lat", "lon"]:
            raise ValueError(f"{nodes_path}:1: expected header node_id,lat,lon")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise ValueError(f"{nodes_path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                nid = int(row[0])
                lat = float(row[1])
                lon = float(row[2])
            except ValueError:
                raise ValueError(f"{nodes_path}:{lineno}: malformed node row {row!r}") from None
            _check_coord(lat, lon, f"{nodes_path}:{lineno}")
            ids.append(nid)
            lats.append(lat)
            lons.append(lon)
    if not ids:
        raise ValueError(f"{nodes_path}: no nodes")
    if len(set(ids)) != len(ids):
        raise ValueError(f"{nodes_path}: duplicate node ids")
    id_to_index = {nid: k for k, nid in enumerate(ids)}

    best: dict[tuple[int, int], float] = {}
    with edges_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header[:3]] != ["u", "v", "length_m"]:
            raise ValueError(f"{edges_path}:1: expected header u,v,length_m")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise ValueError(f"{edges_path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                u = int(row[0])
                v = int(row[1])
                length = float(row[2])
            except ValueError:
                raise ValueError(f"{edges_path}:{lineno}: malformed edge row {row!r}") from None
            if u not in id_to_index or v not in id_to_index:
                raise ValueError(f"{edges_path}:{lineno}: edge references unknown node")
            if u == v:
                raise ValueError(f"{edges_path}:{lineno}: self-loop edge on node {u}")
            if not (length > 0.0) or not math.isfinite(length):
                raise ValueError(f"{edges_path}:{lineno}: non-positive edge length {row[2]!r}")
            key = (min(u, v), max(u, v))
            prev = best.get(key)
            if prev is None or length < prev:
                best[key] = length

    n = len(ids)
    eu = np.array([id_to_index[k[0]] for k in best], dtype=np.int64)
    ev = np.array([id_to_index[k[1]] for k in best], dtype=np.int64)
    el = np.array(list(best.values()), dtype=np.float64)
    return StreetGraph(
        node_ids=np.array(ids, dtype=np.int64),
        lats=np.array(lats),
        lons=np.array(lons),
        is_poi=np.zeros(n, dtype=bool),
        poi_ids=np.full(n, -1, dtype=np.int64),
        edge_u=eu,
        edge_v=ev,
        edge_len=el,
    )


def load_poi_table(path: str | Path) -> list[dict]:
    """Read ``poi_id,name,lat,lon`` rows; poi ids must be 0..P-1 and unique."""
    path = Path(path)
    rows: list[dict] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header[:4]] != ["poi_id", "name", "lat", "lon"]:
            raise ValueError(f"{path}:1: expected header poi_id,name,lat,lon")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                pid = int(row[0])
                lat = float(row[2])
                lon = float(row[3])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed POI row {row!r}") from None
            _check_coord(lat, lon, f"{path}:{lineno}")
            rows.append({"poi_id": pid, "name": row[1], "lat": lat, "lon": lon})
    seen = [r["poi_id"] for r in rows]
    if sorted(seen) != list(range(len(rows))):
        raise ValueError(f"{path}: poi ids must be unique and contiguous from 0")
    return sorted(rows, key=lambda r: r["poi_id"])


def nearest_node(graph: StreetGraph, lat: float, lon: float) -> int:
    """Id of the graph node closest to (lat, lon); ties go to the smaller id."""
    _check_coord(lat, lon, "nearest_node query")
    idx = graph.grid().query(lat, lon)
    return int(graph.node_ids[idx])


def attach_pois(graph: StreetGraph, pois: list[dict]) -> StreetGraph:
    """Return a new graph with one node per POI wired into the street network.

    Each POI connects to at most five nearest street (non-POI) nodes within
    80 m; when none qualify it falls back to the single nearest street node.
    Edge lengths are haversine distances clamped to at least one metre.
    """
    if not pois:
        raise ValueError("empty POI table")
    pids = [int(p["poi_id"]) for p in pois]
    if sorted(pids) != list(range(len(pois))):
        raise ValueError("poi ids must be unique and contiguous from 0")
    if graph.n_pois:
        raise ValueError("graph already contains POI nodes")

    grid = graph.grid()
    street = ~graph.is_poi
    next_id = int(graph.node_ids.max()) + 1

    new_ids = list(graph.node_ids)
    new_lats = list(graph.lats)
    new_lons = list(graph.lons)
    new_is_poi = list(graph.is_poi)
    new_pids = list(graph.poi_ids)
    eu = list(graph.edge_u)
    ev = list(graph.edge_v)
    el = list(graph.edge_len)

    for poi in sorted(pois, key=lambda p: int(p["poi_id"])):
        lat, lon = float(poi["lat"]), float(poi["lon"])
        _check_coord(lat, lon, f"poi {poi['poi_id']}")
        cand = grid.radius_query(lat, lon, POI_ATTACH_RADIUS_M)
        cand = cand[street[cand]]
        if cand.size:
            dist = haversine_m(lat, lon, graph.lats[cand], graph.lons[cand])
            order = np.lexsort((graph.node_ids[cand], dist))
            chosen = cand[order[:POI_ATTACH_LIMIT]]
            chosen_d = dist[order[:POI_ATTACH_LIMIT]]
        else:
            idx = grid.query(lat, lon, mask=street)
            chosen = np.array([idx], dtype=np.int64)
            chosen_d = np.atleast_1d(haversine_m(lat, lon, graph.lats[idx], graph.lons[idx]))
        node_index = len(new_ids)
        new_ids.append(next_id + int(poi["poi_id"]))
        new_lats.append(lat)
        new_lons.append(lon)
        new_is_poi.append(True)
        new_pids.append(int(poi["poi_id"]))
        for k, d in zip(chosen, chosen_d):
            eu.append(node_index)
            ev.append(int(k))
            el.append(max(MIN_EDGE_LENGTH_M, float(d)))

    return StreetGraph(
        node_ids=np.array(new_ids, dtype=np.int64),
        lats=np.array(new_lats),
        lons=np.array(new_lons),
        is_poi=np.array(new_is_poi, dtype=bool),
        poi_ids=np.array(new_pids, dtype=np.int64),
        edge_u=np.array(eu, dtype=np.int64),
        edge_v=np.array(ev, dtype=np.int64),
        edge_len=np.array(el, dtype=np.float64),
    )


def normalized_adjacency(graph: StreetGraph) -> NormalizedAdjacency:
    """Inverse-length adjacency, row-normalized; isolated nodes self-loop.

    A[i, j] = 1 / length(i, j) for each undirected edge, A[i, i] = 1 for nodes
    without any edge, and the result is D^-1 A with D the row-sum degrees.
    """
    n = graph.n_nodes
    a = np.zeros((n, n), dtype=np.float64)
    for u, v, ln in zip(graph.edge_u, graph.edge_v, graph.edge_len):
        w = 1.0 / float(ln)
        # duplicate rows were collapsed at load; accumulate defensively anyway
        a[int(u), int(v)] += w
        a[int(v), int(u)] += w
    isolated = ~(a.any(axis=1))
    if isolated.any():
        a[np.flatnonzero(isolated), np.flatnonzero(isolated)] = 1.0
    degree = a.sum(axis=1)
    a_hat = a / degree[:, None]
    return NormalizedAdjacency(a_hat=a_hat, degree=degree)


def read_pings_csv(path: str | Path) -> list[GeoPing]:
    """Read ``device_id,timestamp_iso8601,lat,lon`` rows."""
    path = Path(path)
    pings: list[GeoPing] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expect = ["device_id", "timestamp_iso8601", "lat", "lon"]
        if header is None or [c.strip().lower() for c in header[:4]] != expect:
            raise ValueError(f"{path}:1: expected header device_id,timestamp_iso8601,lat,lon")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                pings.append(
                    GeoPing(
                        device=row[0],
                        t_seconds=parse_timestamp_seconds(row[1]),
                        lat=float(row[2]),
                        lon=float(row[3]),
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return pings


def write_pings_csv(path: str | Path, pings: list[GeoPing]) -> None:
    from .series import format_seconds

    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["device_id", "timestamp_iso8601", "lat", "lon"])
        for p in pings:
            writer.writerow([p.device, format_seconds(p.t_seconds), repr(float(p.lat)), repr(float(p.lon))])


def bin_geolocations(
    graph: StreetGraph,
    pings: list[GeoPing],
    start_hour: int,
    end_hour: int,
) -> tuple[HourlySeries, int]:
    """Per-node hourly device counts over [start_hour, end_hour).

    Each ping maps to its nearest node; a device contributes at most one count
    per (node, hour) regardless of how many pings land there.  Returns the
    series and the number of pings skipped for falling outside the span.
    """
    if end_hour <= start_hour:
        raise ValueError("empty time span")
    n_hours = end_hour - start_hour
    counts = np.zeros((n_hours, graph.n_nodes), dtype=np.float64)
    grid = graph.grid()
    seen: set[tuple[str, int, int]] = set()
    skipped = 0
    for ping in pings:
        hour = hour_of_seconds(ping.t_seconds)
        if hour < start_hour or hour >= end_hour:
            skipped += 1
            continue
        node = grid.query(ping.lat, ping.lon)
        key = (ping.device, node, hour)
        if key in seen:
            continue
        seen.add(key)
        counts[hour - start_hour, node] += 1.0
    hours = np.arange(start_hour, end_hour, dtype=np.int64)
    names = [f"node_{int(i)}" for i in graph.node_ids]
    return HourlySeries(hours, counts, names), skipped


def graph_fingerprint(graph: StreetGraph) -> str:
    """Stable sha256 over nodes and undirected edges, for checkpoint pinning."""
    digest = hashlib.sha256()
    for k in range(graph.n_nodes):
        digest.update(
            f"n,{int(graph.node_ids[k])},{graph.lats[k]!r},{graph.lons[k]!r},"
            f"{int(graph.is_poi[k])},{int(graph.poi_ids[k])}\n".encode()
        )
    lo = np.minimum(graph.edge_u, graph.edge_v)
    hi = np.maximum(graph.edge_u, graph.edge_v)
    for e in np.lexsort((hi, lo)):
        digest.update(f"e,{int(lo[e])},{int(hi[e])},{graph.edge_len[e]!r}\n".encode())
    return digest.hexdigest()
