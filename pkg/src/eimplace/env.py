"""The macro placement MDP on an N x N grid.

Grids are indexed ``[y, x]`` so that flattening row-major gives the action
encoding ``cell = y * N + x``. An action anchors the current macro's
lower-left corner at that cell. Transitions are pure: ``step`` returns a new
state and never mutates its input.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .netlist import Netlist, macro_order

N_CHANNELS = 6
CHANNELS = ("view", "position", "wire", "macro_w", "macro_h", "progress")


class PlacementError(ValueError):
    pass


class EpisodeFinishedError(PlacementError):
    pass


class IllegalActionError(PlacementError):
    pass


class PlacementState:
    __slots__ = ("netlist", "occupancy", "placements", "cursor", "order")

    def __init__(self, netlist: Netlist, occupancy: np.ndarray, placements: dict,
                 cursor: int, order: tuple):
        self.netlist = netlist
        self.occupancy = occupancy
        self.placements = placements
        self.cursor = cursor
        self.order = order

    @property
    def done(self) -> bool:
        return self.cursor == len(self.order)

    @property
    def current_macro(self):
        if self.done:
            raise EpisodeFinishedError("all macros are placed")
        return self.netlist.macros[self.order[self.cursor]]

    def __eq__(self, other):
        if not isinstance(other, PlacementState):
            return NotImplemented
        return (self.cursor == other.cursor and self.placements == other.placements
                and self.order == other.order and self.netlist == other.netlist
                and np.array_equal(self.occupancy, other.occupancy))

    __hash__ = None

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.netlist.name.encode())
        h.update(np.ascontiguousarray(self.occupancy, dtype=np.uint8).tobytes())
        h.update(json.dumps(sorted(self.placements.items())).encode())
        h.update(str(self.cursor).encode())
        return h.hexdigest()[:16]

    def __repr__(self):
        return (f"PlacementState({self.netlist.name!r}, cursor={self.cursor}/{len(self.order)}, "
                f"placements={self.placements})")


@dataclass
class FeatureMaps:
    view: np.ndarray
    position: np.ndarray
    wire: np.ndarray
    macro_w: np.ndarray
    macro_h: np.ndarray
    progress: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.view, self.position, self.wire,
                         self.macro_w, self.macro_h, self.progress])


@dataclass(frozen=True)
class Layout:
    netlist: str
    grid_n: int
    placements: tuple[tuple[int, int, int], ...]


def decode(cell: int, n: int) -> tuple[int, int]:
    return cell % n, cell // n


def encode(x: int, y: int, n: int) -> int:
    return y * n + x


def reset(n: Netlist) -> PlacementState:
    N = n.grid_n
    return PlacementState(n, np.zeros((N, N), dtype=np.uint8), {}, 0, tuple(macro_order(n)))


def _footprint_sums(occ: np.ndarray, w: int, h: int) -> np.ndarray:
    N = occ.shape[0]
    sat = np.zeros((N + 1, N + 1), dtype=np.int64)
    sat[1:, 1:] = occ.cumsum(0).cumsum(1)
    return sat[h:, w:] - sat[:N + 1 - h, w:] - sat[h:, :N + 1 - w] + sat[:N + 1 - h, :N + 1 - w]


def position_mask(s: PlacementState) -> np.ndarray:
    m = s.current_macro
    N = s.netlist.grid_n
    w, h = m.width_cells, m.height_cells
    mask = np.zeros((N, N), dtype=np.uint8)
    mask[:N - h + 1, :N - w + 1] = _footprint_sums(s.occupancy, w, h) == 0
    return mask


def _net_points(s: PlacementState, k: int):
    net = s.netlist.nets[k]
    xs = [t[0] for t in net.fixed_terminals]
    ys = [t[1] for t in net.fixed_terminals]
    for mid, dx, dy in s.netlist.pin_table[k]:
        pos = s.placements.get(mid)
        if pos is not None:
            xs.append(pos[0] + dx)
            ys.append(pos[1] + dy)
    return xs, ys


def net_hpwl(s: PlacementState, k: int) -> float:
    xs, ys = _net_points(s, k)
    if len(xs) < 2:
        return 0.0
    return (max(xs) - min(xs)) + (max(ys) - min(ys))


def hpwl(s: PlacementState) -> float:
    total = 0.0
    for k in range(len(s.netlist.nets)):
        total += net_hpwl(s, k)
    return total


def raw_wire_delta(s: PlacementState) -> np.ndarray:
    """HPWL increase for placing the current macro at every cell.

    Per-net bounding boxes are summed in net order with the same arithmetic
    as :func:`hpwl`, so legal cells agree bit-for-bit with
    ``hpwl(step(s, c)) - hpwl(s)``. Illegal cells hold meaningless values.
    """
    n = s.netlist
    N = n.grid_n
    mid = s.current_macro.id
    grid = np.arange(N, dtype=np.float64)
    touched = set(n.nets_of_macro[mid])
    after = np.zeros((N, N))
    for k in range(len(n.nets)):
        if k not in touched:
            after += net_hpwl(s, k)
            continue
        xs, ys = _net_points(s, k)
        own = [(dx, dy) for m2, dx, dy in n.pin_table[k] if m2 == mid]
        if len(xs) + len(own) < 2:
            continue
        px = grid[:, None] + np.array([dx for dx, _ in own])[None, :]
        py = grid[:, None] + np.array([dy for _, dy in own])[None, :]
        hi_x, lo_x = px.max(1), px.min(1)
        hi_y, lo_y = py.max(1), py.min(1)
        if xs:
            hi_x = np.maximum(hi_x, max(xs))
            lo_x = np.minimum(lo_x, min(xs))
            hi_y = np.maximum(hi_y, max(ys))
            lo_y = np.minimum(lo_y, min(ys))
        after += (hi_x - lo_x)[None, :] + (hi_y - lo_y)[:, None]
    return after - hpwl(s)


def wire_mask(s: PlacementState, legal: np.ndarray | None = None) -> np.ndarray:
    if legal is None:
        legal = position_mask(s)
    raw = raw_wire_delta(s)
    out = np.ones_like(raw)
    ok = legal.astype(bool)
    if ok.any():
        vals = raw[ok]
        lo, hi = vals.min(), vals.max()
        out[ok] = 0.0 if hi == lo else (vals - lo) / (hi - lo)
    return out


def view_mask(s: PlacementState) -> np.ndarray:
    return s.occupancy.astype(np.float64)


def step(s: PlacementState, a: int) -> tuple[PlacementState, bool]:
    m = s.current_macro
    N = s.netlist.grid_n
    if not 0 <= a < N * N:
        raise IllegalActionError(f"cell {a} outside the {N}x{N} action space")
    x, y = decode(a, N)
    w, h = m.width_cells, m.height_cells
    if x + w > N or y + h > N:
        raise IllegalActionError(f"cell {a} = ({x}, {y}): macro {m.id} ({w}x{h}) "
                                 f"crosses the canvas boundary")
    if s.occupancy[y:y + h, x:x + w].any():
        raise IllegalActionError(f"cell {a} = ({x}, {y}): macro {m.id} overlaps placed macros")
    occ = s.occupancy.copy()
    occ[y:y + h, x:x + w] = 1
    placements = dict(s.placements)
    placements[m.id] = (x, y)
    nxt = PlacementState(s.netlist, occ, placements, s.cursor + 1, s.order)
    return nxt, nxt.done


def dense_hpwl_reward(s: PlacementState, a: int, s_next: PlacementState) -> float:
    return -(hpwl(s_next) - hpwl(s))


def feature_maps(s: PlacementState) -> FeatureMaps:
    m = s.current_macro
    N = s.netlist.grid_n
    legal = position_mask(s)
    full = np.ones((N, N))
    return FeatureMaps(
        view=view_mask(s),
        position=legal.astype(np.float64),
        wire=wire_mask(s, legal),
        macro_w=full * (m.width_cells / N),
        macro_h=full * (m.height_cells / N),
        progress=full * (s.cursor / len(s.order)),
    )


def replay(n: Netlist, actions) -> list[PlacementState]:
    """States ``s_0 .. s_T`` visited by applying ``actions`` from reset."""
    states = [reset(n)]
    for a in actions:
        states.append(step(states[-1], int(a))[0])
    return states


def touches_boundary(n: Netlist, mid: int, x: int, y: int) -> bool:
    m = n.macros[mid]
    N = n.grid_n
    return x == 0 or y == 0 or x + m.width_cells == N or y + m.height_cells == N


def periphery_occupancy(s: PlacementState) -> float:
    """Fraction of placed macros whose footprint touches the canvas edge."""
    if not s.placements:
        return 0.0
    hits = sum(touches_boundary(s.netlist, mid, x, y) for mid, (x, y) in s.placements.items())
    return hits / len(s.placements)


def layout_of(s: PlacementState) -> Layout:
    placed = [(mid, *s.placements[mid]) for mid in s.order[:s.cursor]]
    return Layout(s.netlist.name, s.netlist.grid_n, tuple(placed))


def layout_actions(n: Netlist, layout: Layout) -> list[int]:
    return [encode(x, y, n.grid_n) for _, x, y in layout.placements]


def layout_to_json(layout: Layout) -> str:
    doc = {"grid_n": layout.grid_n, "netlist": layout.netlist,
           "placements": [list(p) for p in layout.placements]}
    return json.dumps(doc, sort_keys=True) + "\n"


def layout_from_json(text: str) -> Layout:
    doc = json.loads(text)
    try:
        placements = tuple((int(m), int(x), int(y)) for m, x, y in doc["placements"])
        return Layout(str(doc["netlist"]), int(doc["grid_n"]), placements)
    except (KeyError, TypeError, ValueError) as e:
        raise PlacementError(f"malformed layout document: {e!r}") from None


def save_layout(layout: Layout, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(layout_to_json(layout))


def load_layout(path) -> Layout:
    with open(path, encoding="utf-8") as f:
        return layout_from_json(f.read())
