"""Placement problem instances: macros, nets, the canvas grid.

A netlist is stored as a single JSON document (``.netlist.json``)::

    {"grid_n": 16,
     "macros": [{"h": 2, "id": 0, "pins": [{"dx": 1.0, "dy": 1.0}], "w": 2}],
     "name": "d1",
     "nets": [{"endpoints": [[0, 0]], "terminals": [[3.5, 4.25]]}]}

Coordinates are in grid units; pin offsets are measured from the macro's
lower-left corner.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

MAX_DENSITY = 0.5
WARN_DENSITY = 0.9
MAX_REJECTION_ATTEMPTS = 1000


class NetlistError(ValueError):
    pass


class NetlistSyntaxError(NetlistError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class DanglingReferenceError(NetlistError):
    pass


class DimensionError(NetlistError):
    pass


class InfeasibleConfigError(NetlistError):
    pass


@dataclass(frozen=True)
class PinOffset:
    dx: float
    dy: float


@dataclass(frozen=True)
class Macro:
    id: int
    width_cells: int
    height_cells: int
    pins: tuple[PinOffset, ...]

    @property
    def area(self) -> int:
        return self.width_cells * self.height_cells


@dataclass(frozen=True)
class Net:
    endpoints: tuple[tuple[int, int], ...]
    fixed_terminals: tuple[tuple[float, float], ...] = ()

    @property
    def degree(self) -> int:
        return len(self.endpoints) + len(self.fixed_terminals)


@dataclass(frozen=True)
class Netlist:
    name: str
    grid_n: int
    macros: tuple[Macro, ...]
    nets: tuple[Net, ...]

    @property
    def density(self) -> float:
        return sum(m.area for m in self.macros) / float(self.grid_n ** 2)

    @cached_property
    def pin_table(self) -> list[list[tuple[int, float, float]]]:
        """Per net, the ``(macro_id, dx, dy)`` triple of every endpoint."""
        table = []
        for net in self.nets:
            rows = []
            for mid, pin in net.endpoints:
                p = self.macros[mid].pins[pin]
                rows.append((mid, p.dx, p.dy))
            table.append(rows)
        return table

    @cached_property
    def nets_of_macro(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.macros]
        for k, net in enumerate(self.nets):
            for mid in sorted({mid for mid, _ in net.endpoints}):
                out[mid].append(k)
        return out


@dataclass(frozen=True)
class SynthConfig:
    grid_n: int = 16
    macro_count: int = 8
    min_size: int = 2
    max_size: int = 4
    net_count: int = 12
    min_degree: int = 2
    max_degree: int = 4
    terminal_prob: float = 0.5
    max_density: float = MAX_DENSITY
    name: str = field(default="synth", compare=False)


def validate_netlist(n: Netlist) -> Netlist:
    """Check every structural invariant; returns ``n`` unchanged."""
    if n.grid_n < 1:
        raise DimensionError(f"grid_n must be positive, got {n.grid_n}")
    for i, m in enumerate(n.macros):
        if m.id != i:
            raise NetlistError(f"macro ids must be 0..{len(n.macros) - 1} without gaps; "
                               f"position {i} has id {m.id}")
        if not (1 <= m.width_cells <= n.grid_n and 1 <= m.height_cells <= n.grid_n):
            raise DimensionError(f"macro {m.id} ({m.width_cells}x{m.height_cells}) "
                                 f"does not fit a {n.grid_n}x{n.grid_n} grid")
        for j, p in enumerate(m.pins):
            if not (0 <= p.dx <= m.width_cells and 0 <= p.dy <= m.height_cells):
                raise DimensionError(f"macro {m.id} pin {j} offset ({p.dx}, {p.dy}) "
                                     f"lies outside the macro")
    for k, net in enumerate(n.nets):
        if net.degree < 2:
            raise NetlistError(f"net {k} has fewer than 2 endpoints/terminals")
        for mid, pin in net.endpoints:
            if not 0 <= mid < len(n.macros):
                raise DanglingReferenceError(f"net {k} references unknown macro {mid}")
            if not 0 <= pin < len(n.macros[mid].pins):
                raise DanglingReferenceError(f"net {k} references unknown pin {pin} of macro {mid}")
    if n.density > WARN_DENSITY:
        warnings.warn(f"netlist {n.name!r} has macro density {n.density:.3f} > {WARN_DENSITY}",
                      stacklevel=2)
    return n


def _line_of(text: str, needle: str) -> int:
    idx = text.find(needle)
    return text.count("\n", 0, idx) + 1 if idx >= 0 else 1


def parse_netlist(text: str) -> Netlist:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise NetlistSyntaxError(e.msg, e.lineno) from None
    if not isinstance(doc, dict):
        raise NetlistSyntaxError("top level must be an object", 1)
    missing = {"name", "grid_n", "macros", "nets"} - set(doc)
    if missing:
        raise NetlistSyntaxError(f"missing keys {sorted(missing)}", 1)
    try:
        macros = tuple(
            Macro(id=int(m["id"]), width_cells=int(m["w"]), height_cells=int(m["h"]),
                  pins=tuple(PinOffset(float(p["dx"]), float(p["dy"])) for p in m["pins"]))
            for m in doc["macros"]
        )
        nets = tuple(
            Net(endpoints=tuple((int(a), int(b)) for a, b in net["endpoints"]),
                fixed_terminals=tuple((float(x), float(y)) for x, y in net.get("terminals", [])))
            for net in doc["nets"]
        )
    except (KeyError, TypeError, ValueError) as e:
        key = e.args[0] if isinstance(e, KeyError) else ""
        raise NetlistSyntaxError(f"malformed record: {e!r}", _line_of(text, str(key))) from None
    return validate_netlist(Netlist(name=str(doc["name"]), grid_n=int(doc["grid_n"]),
                                    macros=macros, nets=nets))


def _fmt(x: float) -> str:
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def serialize_netlist(n: Netlist) -> str:
    """Canonical text: sorted keys, six-decimal floats, one record per line."""
    macros = []
    for m in n.macros:
        pins = ", ".join(f'{{"dx": {_fmt(p.dx)}, "dy": {_fmt(p.dy)}}}' for p in m.pins)
        macros.append(f'    {{"h": {m.height_cells}, "id": {m.id}, "pins": [{pins}], '
                      f'"w": {m.width_cells}}}')
    nets = []
    for net in n.nets:
        ends = ", ".join(f"[{a}, {b}]" for a, b in net.endpoints)
        terms = ", ".join(f"[{_fmt(x)}, {_fmt(y)}]" for x, y in net.fixed_terminals)
        nets.append(f'    {{"endpoints": [{ends}], "terminals": [{terms}]}}')

    def block(rows):
        return "[\n" + ",\n".join(rows) + "\n  ]" if rows else "[]"

    return ("{\n"
            f'  "grid_n": {n.grid_n},\n'
            f'  "macros": {block(macros)},\n'
            f'  "name": {json.dumps(n.name)},\n'
            f'  "nets": {block(nets)}\n'
            "}\n")


def load_netlist(path) -> Netlist:
    with open(path, encoding="utf-8") as f:
        return parse_netlist(f.read())


def save_netlist(n: Netlist, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_netlist(n))


def generate_synthetic(cfg: SynthConfig, seed: int) -> Netlist:
    """Draw a random design; a pure function of ``(cfg, seed)``.

    Macro sizes are rejection-sampled until the total area fits under
    ``cfg.max_density * grid_n**2``. Every macro gets one pin at its centre.
    A net draws its degree uniformly from the configured range; with
    probability ``terminal_prob`` one of those slots is a fixed terminal at
    a uniformly random canvas location.
    """
    N = cfg.grid_n
    if cfg.macro_count < 1 or cfg.min_size < 1 or cfg.min_size > cfg.max_size:
        raise InfeasibleConfigError("need macro_count >= 1 and 1 <= min_size <= max_size")
    if cfg.max_size > N:
        raise InfeasibleConfigError(f"max_size {cfg.max_size} exceeds grid {N}")
    if cfg.min_degree < 2 or cfg.min_degree > cfg.max_degree:
        raise InfeasibleConfigError("need 2 <= min_degree <= max_degree")
    rng = np.random.default_rng(seed)
    budget = cfg.max_density * N * N
    for _ in range(MAX_REJECTION_ATTEMPTS):
        sizes = rng.integers(cfg.min_size, cfg.max_size + 1, size=(cfg.macro_count, 2))
        if int((sizes[:, 0] * sizes[:, 1]).sum()) <= budget:
            break
    else:
        raise InfeasibleConfigError(
            f"{cfg.macro_count} macros of size {cfg.min_size}..{cfg.max_size} exceed the "
            f"area budget {budget:g} after {MAX_REJECTION_ATTEMPTS} attempts")
    macros = tuple(
        Macro(id=i, width_cells=int(w), height_cells=int(h),
              pins=(PinOffset(w / 2.0, h / 2.0),))
        for i, (w, h) in enumerate(sizes)
    )
    nets = []
    for _ in range(cfg.net_count):
        degree = int(rng.integers(cfg.min_degree, cfg.max_degree + 1))
        n_term = 1 if rng.random() < cfg.terminal_prob else 0
        n_mac = min(degree - n_term, cfg.macro_count)
        if n_mac + n_term < 2:
            n_term = 2 - n_mac
        mids = sorted(int(i) for i in rng.choice(cfg.macro_count, size=n_mac, replace=False))
        terms = tuple((round(float(x), 3), round(float(y), 3))
                      for x, y in rng.uniform(0.0, N, size=(n_term, 2)))
        nets.append(Net(endpoints=tuple((m, 0) for m in mids), fixed_terminals=terms))
    name = f"{cfg.name}_s{seed}"
    return validate_netlist(Netlist(name=name, grid_n=N, macros=macros, nets=tuple(nets)))


def macro_order(n: Netlist) -> list[int]:
    return sorted(range(len(n.macros)), key=lambda i: (-n.macros[i].area, i))


def areas(n: Netlist) -> Sequence[int]:
    return [m.area for m in n.macros]
