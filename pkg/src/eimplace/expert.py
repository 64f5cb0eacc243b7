"""Synthetic expert layouts and the reward-learning dataset built from them.

The stand-in expert places macros in the canonical order, restricting itself
to the outermost ring that still admits a legal placement and choosing the
cell with the smallest HPWL increase inside that ring. Each layout is then
decomposed into an (s, a, s') trajectory, from which preference tuples and
validation tuples are sampled.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import env
from .netlist import Netlist, macro_order

log = logging.getLogger(__name__)

JITTER_PROB = 0.2
DEFAULT_M = 15
DEFAULT_K_PER_STEP = 1
TRAIN_FRACTION = 0.8


class ExpertError(ValueError):
    pass


class InfeasibleLayoutError(ExpertError):
    pass


class OrderMismatchError(ExpertError):
    pass


class IllegalIntermediateError(ExpertError):
    pass


@dataclass
class Trajectory:
    netlist: Netlist = field(repr=False)
    actions: tuple[int, ...]
    traj_id: int = 0
    transitions: list[tuple[str, int, str]] = field(default_factory=list, repr=False)

    @property
    def design(self) -> str:
        return self.netlist.name

    def __len__(self):
        return len(self.actions)

    def states(self) -> list[env.PlacementState]:
        return env.replay(self.netlist, self.actions)


@dataclass(frozen=True)
class PreferenceTuple:
    traj_id: int
    step: int
    chosen: int
    rejected: int


@dataclass(frozen=True)
class ValidationTuple:
    traj_id: int
    step: int
    expert_action: int
    distractors: tuple[int, ...]


def ring_level(n: Netlist, mid: int) -> np.ndarray:
    """Distance (in cells) from each anchor's footprint to the nearest canvas edge."""
    N = n.grid_n
    m = n.macros[mid]
    ys, xs = np.mgrid[0:N, 0:N]
    return np.minimum.reduce([xs, ys, N - m.width_cells - xs, N - m.height_cells - ys])


def generate_expert_layout(n: Netlist, seed: int) -> env.Layout:
    rng = np.random.default_rng(seed)
    s = env.reset(n)
    while not s.done:
        mid = s.current_macro.id
        legal = env.position_mask(s).ravel().astype(bool)
        if not legal.any():
            raise InfeasibleLayoutError(f"{n.name}: no legal cell for macro {mid} "
                                        f"at step {s.cursor}")
        level = ring_level(n, mid).ravel()
        ring = level[legal].min()
        cand = np.flatnonzero(legal & (level == ring))
        raw = env.raw_wire_delta(s).ravel()[cand]
        # primary key raw delta, secondary a seeded random tie-break
        ranked = cand[np.lexsort((rng.random(len(cand)), raw))]
        pick = 1 if (rng.random() < JITTER_PROB and len(ranked) > 1) else 0
        s, _ = env.step(s, int(ranked[pick]))
    return env.layout_of(s)


def decompose_layout(n: Netlist, layout: env.Layout, traj_id: int = 0) -> Trajectory:
    order = macro_order(n)
    listed = [p[0] for p in layout.placements]
    if listed != order:
        raise OrderMismatchError(f"layout lists macros {listed}, canonical order is {order}")
    if layout.grid_n != n.grid_n:
        raise OrderMismatchError(f"layout grid {layout.grid_n} != netlist grid {n.grid_n}")
    actions = tuple(env.layout_actions(n, layout))
    s = env.reset(n)
    transitions = []
    for t, a in enumerate(actions):
        try:
            s2, _ = env.step(s, a)
        except env.PlacementError as e:
            raise IllegalIntermediateError(f"step {t}: {e}") from None
        transitions.append((s.digest(), a, s2.digest()))
        s = s2
    return Trajectory(n, actions, traj_id, transitions)


def _legal_cells(s: env.PlacementState) -> np.ndarray:
    return np.flatnonzero(env.position_mask(s).ravel())


def assign_preferences(traj: Trajectory, k_per_step: int = DEFAULT_K_PER_STEP,
                       seed: int = 0) -> list[PreferenceTuple]:
    rng = np.random.default_rng([seed, traj.traj_id])
    out = []
    for t, s in enumerate(traj.states()[:-1]):
        a = traj.actions[t]
        others = _legal_cells(s)
        others = others[others != a]
        if len(others) == 0:
            continue
        picks = rng.choice(others, size=min(k_per_step, len(others)), replace=False)
        out.extend(PreferenceTuple(traj.traj_id, t, a, int(r)) for r in picks)
    return out


def build_validation_set(trajs: list[Trajectory], m: int = DEFAULT_M,
                         seed: int = 0) -> list[ValidationTuple]:
    out = []
    for traj in trajs:
        rng = np.random.default_rng([seed, traj.traj_id])
        for t, s in enumerate(traj.states()[:-1]):
            a = traj.actions[t]
            others = _legal_cells(s)
            others = others[others != a]
            picks = rng.choice(others, size=min(m, len(others)), replace=False)
            out.append(ValidationTuple(traj.traj_id, t, a, tuple(int(c) for c in picks)))
    return out


@dataclass
class EIMDataset:
    netlist: Netlist
    trajectories: list[Trajectory]
    train_ids: list[int]
    validation_ids: list[int]
    preferences: list[PreferenceTuple]
    validation: list[ValidationTuple]

    def traj(self, traj_id: int) -> Trajectory:
        return self._by_id[traj_id]

    @property
    def _by_id(self):
        return {t.traj_id: t for t in self.trajectories}

    @property
    def train_trajectories(self) -> list[Trajectory]:
        by_id = self._by_id
        return [by_id[i] for i in self.train_ids]

    @property
    def validation_trajectories(self) -> list[Trajectory]:
        by_id = self._by_id
        return [by_id[i] for i in self.validation_ids]


def split_ids(count: int) -> tuple[list[int], list[int]]:
    """80/20 split of layout indices; a single layout serves both sides."""
    if count == 1:
        warnings.warn("only one expert layout: validation reuses the training layout",
                      stacklevel=2)
        return [0], [0]
    n_train = max(1, min(count - 1, int(round(TRAIN_FRACTION * count))))
    return list(range(n_train)), list(range(n_train, count))


def build_dataset(n: Netlist, layouts: list[env.Layout], m: int = DEFAULT_M,
                  k_per_step: int = DEFAULT_K_PER_STEP, seed: int = 0) -> EIMDataset:
    trajs = [decompose_layout(n, lay, i) for i, lay in enumerate(layouts)]
    train_ids, val_ids = split_ids(len(trajs))
    prefs = []
    for i in train_ids:
        prefs.extend(assign_preferences(trajs[i], k_per_step, seed))
    val = build_validation_set([trajs[i] for i in val_ids], m, seed)
    return EIMDataset(n, trajs, train_ids, val_ids, prefs, val)


def dataset_to_jsonl(ds: EIMDataset) -> str:
    lines = []
    val_set = set(ds.validation_ids)
    train_set = set(ds.train_ids)
    for t in ds.trajectories:
        split = ("train+validation" if t.traj_id in val_set and t.traj_id in train_set
                 else "validation" if t.traj_id in val_set else "train")
        lines.append({"kind": "trajectory", "id": t.traj_id, "design": t.design,
                      "split": split, "actions": list(t.actions),
                      "digests": [t.transitions[0][0]] + [tr[2] for tr in t.transitions]})
    for p in ds.preferences:
        lines.append({"kind": "preference", "traj": p.traj_id, "step": p.step,
                      "chosen": p.chosen, "rejected": p.rejected})
    for v in ds.validation:
        lines.append({"kind": "validation", "traj": v.traj_id, "step": v.step,
                      "expert": v.expert_action, "distractors": list(v.distractors)})
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in lines)


def dataset_from_jsonl(text: str, n: Netlist, verify: bool = True) -> EIMDataset:
    """Rebuild a dataset; with ``verify`` every trajectory is replayed against its digests."""
    trajs, train_ids, val_ids, prefs, val = [], [], [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.get("kind")
        if kind == "trajectory":
            if rec["design"] != n.name:
                raise ExpertError(f"line {lineno}: trajectory for design {rec['design']!r}, "
                                  f"netlist is {n.name!r}")
            t = Trajectory(n, tuple(rec["actions"]), rec["id"])
            digests = rec["digests"]
            if verify:
                states = t.states()
                if [s.digest() for s in states] != digests:
                    raise IllegalIntermediateError(f"line {lineno}: replay does not "
                                                   f"reproduce trajectory {t.traj_id}")
            t.transitions = [(digests[i], a, digests[i + 1]) for i, a in enumerate(t.actions)]
            trajs.append(t)
            if "train" in rec["split"]:
                train_ids.append(t.traj_id)
            if "validation" in rec["split"]:
                val_ids.append(t.traj_id)
        elif kind == "preference":
            prefs.append(PreferenceTuple(rec["traj"], rec["step"], rec["chosen"], rec["rejected"]))
        elif kind == "validation":
            val.append(ValidationTuple(rec["traj"], rec["step"], rec["expert"],
                                       tuple(rec["distractors"])))
        else:
            raise ExpertError(f"line {lineno}: unknown record kind {kind!r}")
    return EIMDataset(n, trajs, train_ids, val_ids, prefs, val)
