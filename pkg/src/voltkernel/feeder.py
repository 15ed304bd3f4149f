"""Radial feeder model, linearized voltage sensitivities, AC power flow.

The feeder is a single-phase radial network with the substation at bus 0.
Voltage sensitivities follow the linearized distribution-flow model

    v = R p + X q + v0 * 1

with R[n, m] (X[n, m]) equal to the sum of line resistances (reactances)
on the common path from the substation to buses n and m, divided by v0.
The linearization point is the flat voltage profile; re-linearizing at an
operating point is possible in principle but not implemented here.

Exact voltages come from a backward/forward sweep on the branch-flow
equations with constant-power injections.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class FeederParseError(ValueError):
    """Malformed feeder file."""


class FeederTopologyError(ValueError):
    """Feeder graph is not a valid radial network."""


@dataclass
class FeederModel:
    """Radial network: bus 0 is the substation, buses 1..N are loads.

    p_nom/q_nom are per-unit nominal (benchmark) loads per bus, index 0
    included for schema completeness but unused.  Lines are stored as
    (from_bus, to_bus, r_pu, x_pu) in arbitrary orientation; topology is
    oriented away from the substation at construction.  Instances are
    immutable after construction and safe to share across threads.
    """

    p_nom: np.ndarray
    q_nom: np.ndarray
    lines: list[tuple[int, int, float, float]]
    v0: float = 1.0
    s_base: float = 1.0
    v_base: float = 1.0

    def __post_init__(self):
        self.p_nom = np.asarray(self.p_nom, dtype=float)
        self.q_nom = np.asarray(self.q_nom, dtype=float)
        n_bus = len(self.p_nom)
        if len(self.q_nom) != n_bus:
            raise FeederParseError("p_nom and q_nom length mismatch")
        if n_bus < 2:
            raise FeederTopologyError("feeder needs the substation plus one bus")
        if len(self.lines) != n_bus - 1:
            raise FeederTopologyError(
                f"radial feeder with {n_bus} buses needs {n_bus - 1} lines, "
                f"got {len(self.lines)}"
            )
        seen = set()
        adj: dict[int, list[int]] = {i: [] for i in range(n_bus)}
        for li, (fb, tb, r, x) in enumerate(self.lines):
            if not (0 <= fb < n_bus and 0 <= tb < n_bus) or fb == tb:
                raise FeederTopologyError(f"line {li} endpoints out of range")
            key = (min(fb, tb), max(fb, tb))
            if key in seen:
                raise FeederTopologyError(f"duplicate line {key}")
            seen.add(key)
            if r < 0 or x < 0 or (r == 0 and x == 0):
                raise FeederTopologyError(
                    f"line {li} needs r, x >= 0 with at least one positive"
                )
            adj[fb].append(tb)
            adj[tb].append(fb)

        # orient away from bus 0; connectivity check doubles as cycle check
        # because the line count already matches a tree
        parent = np.full(n_bus, -1, dtype=int)
        line_in = np.full(n_bus, -1, dtype=int)
        order = [0]
        visited = {0}
        line_by_pair = {
            (min(fb, tb), max(fb, tb)): li for li, (fb, tb, _, _) in enumerate(self.lines)
        }
        queue = [0]
        while queue:
            u = queue.pop(0)
            for w in sorted(adj[u]):
                if w in visited:
                    continue
                visited.add(w)
                parent[w] = u
                line_in[w] = line_by_pair[(min(u, w), max(u, w))]
                order.append(w)
                queue.append(w)
        if len(visited) != n_bus:
            missing = sorted(set(range(n_bus)) - visited)
            raise FeederTopologyError(f"buses disconnected from substation: {missing}")

        self._parent = parent
        self._line_in = line_in
        self._order = np.array(order, dtype=int)
        self._children = {i: [] for i in range(n_bus)}
        for w in order[1:]:
            self._children[parent[w]].append(w)

    @property
    def n(self) -> int:
        """Number of non-substation buses."""
        return len(self.p_nom) - 1

    def parent_of(self, bus: int) -> int:
        return int(self._parent[bus])

    def line_into(self, bus: int) -> int:
        """Index of the line feeding this bus from its parent."""
        return int(self._line_in[bus])

    def subtree(self, bus: int) -> list[int]:
        """Buses in the subtree rooted at `bus` (inclusive), BFS order."""
        out = [bus]
        i = 0
        while i < len(out):
            out.extend(self._children[out[i]])
            i += 1
        return out

    def path_lines(self, bus: int) -> list[int]:
        """Line indices on the path from the substation to `bus`."""
        path = []
        while bus != 0:
            path.append(int(self._line_in[bus]))
            bus = int(self._parent[bus])
        return path[::-1]


@dataclass
class Sensitivities:
    """Linearized voltage sensitivity matrices R, X (N x N) and v0."""

    R: np.ndarray
    X: np.ndarray
    v0: float


@dataclass
class VoltageProfile:
    """AC power-flow result: bus 1..N voltage magnitudes in per-unit."""

    v: np.ndarray
    converged: bool
    iterations: int


def load_feeder(path, bus_path=None) -> FeederModel:
    """Read a feeder from a JSON document or from a line/bus CSV pair.

    JSON schema: {"lines": [[from,to,r_pu,x_pu],...],
    "buses": [[bus,p_nom,q_nom],...], "v0": 1.0, "s_base": .., "v_base": ..}.
    For CSV, `path` is the line table (header from,to,r_pu,x_pu) and
    `bus_path` the bus table (header bus,p_nom,q_nom).
    """
    path = Path(path)
    if not path.exists():
        raise FeederParseError(f"feeder file not found: {path}")
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FeederParseError(f"invalid JSON in {path}: {exc}") from exc
        return _feeder_from_tables(doc.get("lines"), doc.get("buses"),
                                   v0=doc.get("v0", 1.0),
                                   s_base=doc.get("s_base", 1.0),
                                   v_base=doc.get("v_base", 1.0))
    if bus_path is None:
        raise FeederParseError("CSV feeder input needs both a line and a bus table")
    lines = _read_csv_rows(path, ("from", "to", "r_pu", "x_pu"))
    buses = _read_csv_rows(Path(bus_path), ("bus", "p_nom", "q_nom"))
    return _feeder_from_tables(lines, buses)


def _read_csv_rows(path: Path, columns):
    if not path.exists():
        raise FeederParseError(f"feeder file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != list(columns):
            raise FeederParseError(
                f"{path}: expected header {','.join(columns)}, got {reader.fieldnames}"
            )
        rows = []
        for row in reader:
            try:
                rows.append([float(row[c]) for c in columns])
            except (TypeError, ValueError) as exc:
                raise FeederParseError(f"{path}: bad row {row}") from exc
    return rows


def _feeder_from_tables(lines, buses, v0=1.0, s_base=1.0, v_base=1.0) -> FeederModel:
    if not lines or not buses:
        raise FeederParseError("feeder document needs both line and bus tables")
    try:
        bus_ids = [int(round(row[0])) for row in buses]
        line_list = [(int(round(r[0])), int(round(r[1])), float(r[2]), float(r[3]))
                     for r in lines]
    except (TypeError, ValueError, IndexError) as exc:
        raise FeederParseError(f"malformed feeder tables: {exc}") from exc
    n_bus = len(bus_ids)
    if sorted(bus_ids) != list(range(n_bus)):
        raise FeederTopologyError("bus ids must be exactly 0..N with 0 the substation")
    p_nom = np.zeros(n_bus)
    q_nom = np.zeros(n_bus)
    for row in buses:
        p_nom[int(round(row[0]))] = float(row[1])
        q_nom[int(round(row[0]))] = float(row[2])
    return FeederModel(p_nom=p_nom, q_nom=q_nom, lines=line_list,
                       v0=v0, s_base=s_base, v_base=v_base)


def bundled_feeder_path() -> Path:
    """Path of the packaged 13-bus test feeder."""
    return Path(__file__).parent / "data" / "feeder13.json"


def build_sensitivities(f: FeederModel) -> Sensitivities:
    """Common-path impedance matrices of the flat-profile linearization.

    With P the bus-by-line path indicator, R = P diag(r) P' / v0, which is
    symmetric positive definite for a radial feeder.
    """
    n = f.n
    n_lines = len(f.lines)
    P = np.zeros((n, n_lines))
    for bus in range(1, n + 1):
        P[bus - 1, f.path_lines(bus)] = 1.0
    r = np.array([ln[2] for ln in f.lines])
    x = np.array([ln[3] for ln in f.lines])
    R = (P * r) @ P.T / f.v0
    X = (P * x) @ P.T / f.v0
    return Sensitivities(R=R, X=X, v0=f.v0)


def ac_power_flow(f: FeederModel, p: np.ndarray, q: np.ndarray,
                  tol: float = 1e-10, max_iters: int = 100) -> VoltageProfile:
    """Backward/forward sweep with constant-power injections.

    p, q are net per-unit injections at buses 1..N (generation positive).
    Convergence is declared when the successive-iterate complex voltage
    change drops below tol; non-convergence is reported through the flag,
    not raised.
    """
    n = f.n
    p = np.asarray(p, dtype=float).reshape(n)
    q = np.asarray(q, dtype=float).reshape(n)
    s_inj = np.zeros(n + 1, dtype=complex)
    s_inj[1:] = p + 1j * q
    z_line = np.zeros(n + 1, dtype=complex)
    for bus in range(1, n + 1):
        _, _, r, x = f.lines[f.line_into(bus)]
        z_line[bus] = r + 1j * x

    order = f._order
    v = np.full(n + 1, f.v0, dtype=complex)
    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        iterations = it
        i_inj = np.conj(s_inj / v)
        i_inj[0] = 0.0
        j_branch = np.zeros(n + 1, dtype=complex)
        for bus in order[:0:-1]:
            j_branch[bus] = -i_inj[bus] + sum(
                j_branch[c] for c in f._children[bus]
            )
        v_new = v.copy()
        for bus in order[1:]:
            v_new[bus] = v_new[f.parent_of(bus)] - z_line[bus] * j_branch[bus]
        change = float(np.abs(v_new - v).max())
        v = v_new
        if change < tol:
            converged = True
            break
    return VoltageProfile(v=np.abs(v[1:]), converged=converged, iterations=iterations)
