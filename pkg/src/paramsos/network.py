"""Network description for droop-controlled inverter microgrids (per-unit)."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class NetworkError(ValueError):
    pass


class DisconnectedNetwork(NetworkError):
    pass


class MissingInverter(NetworkError):
    pass


@dataclass
class Bus:
    id: str
    v_nominal: float = 1.0
    load_p: float = 0.0
    load_q: float = 0.0


@dataclass
class Line:
    """Line between buses ``i`` and ``k``.

    ``G`` and ``B`` are the transfer conductance and susceptance, i.e. the
    off-diagonal bus-admittance entries ``Y_ik = G + jB``.  An inductive line
    with series impedance ``r + jx`` has ``G = -r/(r^2+x^2)`` and
    ``B = x/(r^2+x^2)``.
    """

    i: str
    k: str
    G: float
    B: float


@dataclass
class Inverter:
    bus: str
    tau: float = 0.1
    p_set: float = 0.0
    q_set: float = 0.0


@dataclass
class NetworkSpec:
    buses: list
    lines: list
    inverters: list
    name: str = ""
    _order: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()
        self._order = {b.id: n for n, b in enumerate(self.buses)}

    @classmethod
    def from_impedances(cls, buses, branches, inverters, name=""):
        """Build from ``(i, k, r, x)`` series impedances."""
        lines = []
        for i, k, r, x in branches:
            z2 = r * r + x * x
            lines.append(Line(i, k, -r / z2, x / z2))
        return cls(buses, lines, inverters, name)

    def validate(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        if not self.inverters:
            raise MissingInverter("network has no inverters")
        for inv in self.inverters:
            if inv.bus not in ids:
                raise MissingInverter(f"inverter at unknown bus {inv.bus!r}")
            if not inv.tau > 0:
                raise NetworkError(f"inverter at {inv.bus}: tau must be positive")
        if len({inv.bus for inv in self.inverters}) != len(self.inverters):
            raise NetworkError("at most one inverter per bus")
        for ln in self.lines:
            if ln.i not in ids or ln.k not in ids:
                raise NetworkError(f"line {ln.i}-{ln.k} references an unknown bus")
            if ln.i == ln.k:
                raise NetworkError(f"line {ln.i}-{ln.k} is a self loop")
        for b in self.buses:
            if not b.v_nominal > 0:
                raise NetworkError(f"bus {b.id}: nominal voltage must be positive")
        adj = {i: set() for i in ids}
        for ln in self.lines:
            adj[ln.i].add(ln.k)
            adj[ln.k].add(ln.i)
        seen, todo = {ids[0]}, deque([ids[0]])
        while todo:
            u = todo.popleft()
            for w in adj[u] - seen:
                seen.add(w)
                todo.append(w)
        if seen != set(ids):
            raise DisconnectedNetwork(f"buses {sorted(set(ids) - seen)} are not connected")

    def index(self, bus_id: str) -> int:
        return self._order[bus_id]

    def neighbors(self, bus_id: str) -> list[tuple[str, float, float]]:
        """``(k, G_ik, B_ik)`` for every line at ``bus_id`` (parallel lines summed)."""
        acc: dict = {}
        for ln in self.lines:
            if ln.i == bus_id:
                k = ln.k
            elif ln.k == bus_id:
                k = ln.i
            else:
                continue
            g, b = acc.get(k, (0.0, 0.0))
            acc[k] = (g + ln.G, b + ln.B)
        return [(k, g, b) for k, (g, b) in sorted(acc.items(), key=lambda t: self.index(t[0]))]

    def admittance(self) -> np.ndarray:
        """Bus admittance matrix; diagonal is minus the sum of transfer entries (no shunts)."""
        n = len(self.buses)
        Y = np.zeros((n, n), dtype=complex)
        for ln in self.lines:
            a, b = self.index(ln.i), self.index(ln.k)
            y = complex(ln.G, ln.B)
            Y[a, b] += y
            Y[b, a] += y
            Y[a, a] -= y
            Y[b, b] -= y
        return Y

    def inverter_at(self, bus_id: str):
        for inv in self.inverters:
            if inv.bus == bus_id:
                return inv
        return None
