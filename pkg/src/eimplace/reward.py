"""Reward learning from expert layouts.

Two learners share the :class:`~eimplace.approximator.QMapModel` substrate:

* demonstrations: the map is a soft Q-function; the reward of a transition
  is ``Q(s, a) - gamma * V(s')`` with ``V`` the log-sum-exp of Q over the
  legal actions of ``s'``. Training maximises the offline inverse soft-Q
  objective ``E[r - alpha r^2] - (1 - gamma) E[V(s0)]`` over expert data.
* preferences: the map is the reward itself and is fitted with the
  pairwise logistic loss plus an ``alpha * r^2`` penalty.

Both are scored with Top-1 reward accuracy on held-out expert states.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import env
from .approximator import (Arch, OptimizerState, QMapModel, adam_step, backward, forward,
                           init_model, model_from_dict, model_to_dict)
from .expert import EIMDataset, PreferenceTuple, Trajectory, ValidationTuple
from .parallel import parallel_map

log = logging.getLogger(__name__)

DEMONSTRATION = "demonstration"
PREFERENCE = "preference"


class RewardLearningError(ValueError):
    pass


class NoLegalActionError(RewardLearningError):
    pass


class TransitionMismatchError(RewardLearningError):
    pass


class EmptyBatchError(RewardLearningError):
    pass


@dataclass
class RewardModel:
    kind: str
    model: QMapModel
    gamma: float = 0.99
    alpha: float = 1e-3

    def __post_init__(self):
        if self.kind not in (DEMONSTRATION, PREFERENCE):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if not (np.isfinite(self.gamma) and np.isfinite(self.alpha)):
            raise ValueError("gamma and alpha must be finite")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    alpha: float = 1e-3
    gamma: float = 0.99
    seed: int = 0
    eval_every: int = 5
    hidden: int = 0
    pixel_hidden: int = 32
    record_time: bool = False


# --- soft-Q primitives -----------------------------------------------------

def soft_value(q_map, legal, terminal: bool = False) -> float:
    q = np.asarray(q_map, dtype=np.float64).ravel()
    ok = np.asarray(legal).ravel().astype(bool)
    if not ok.any():
        if terminal:
            return 0.0
        raise NoLegalActionError("soft value of a non-terminal state without legal actions")
    v = q[ok]
    top = v.max()
    return float(top + np.log(np.exp(v - top).sum()))


def policy_from_q(q_map, legal) -> np.ndarray:
    q = np.asarray(q_map, dtype=np.float64).ravel()
    ok = np.asarray(legal).ravel().astype(bool)
    if not ok.any():
        raise NoLegalActionError("no legal action")
    p = np.zeros_like(q)
    e = np.exp(q[ok] - q[ok].max())
    p[ok] = e / e.sum()
    return p


def _masked_lse_softmax(Q: np.ndarray, legal: np.ndarray):
    """Row-wise log-sum-exp and softmax of ``Q`` restricted to ``legal``."""
    ok = legal.astype(bool)
    z = np.where(ok, Q, -np.inf)
    top = z.max(1, keepdims=True)
    e = np.where(ok, np.exp(z - top), 0.0)
    s = e.sum(1, keepdims=True)
    return (top + np.log(s))[:, 0], e / s


def features_of(s: env.PlacementState) -> np.ndarray:
    return env.feature_maps(s).stack().ravel()


def extract_reward(rm: RewardModel, s: env.PlacementState, a: int,
                   s_next: env.PlacementState) -> float:
    if rm.kind != DEMONSTRATION:
        raise RewardLearningError("extract_reward applies to demonstration models")
    if env.step(s, a)[0] != s_next:
        raise TransitionMismatchError(f"s' is not the successor of s under action {a}")
    q = forward(rm.model, features_of(s))[a]
    if s_next.done:
        return float(q)
    v = soft_value(forward(rm.model, features_of(s_next)), env.position_mask(s_next))
    return float(q - rm.gamma * v)


# --- materialised training data ---------------------------------------------

@dataclass
class TrajectoryCache:
    """Replayed states of one trajectory with their features and legal masks."""
    states: list
    X: np.ndarray        # (T, D) features of s_0 .. s_{T-1}
    legal: np.ndarray    # (T, N^2)

    @classmethod
    def build(cls, traj: Trajectory) -> "TrajectoryCache":
        states = traj.states()
        live = states[:-1]
        X = np.stack([features_of(s) for s in live])
        legal = np.stack([env.position_mask(s).ravel() for s in live])
        return cls(states, X, legal)


def build_caches(trajs: list[Trajectory], threads: int = 1) -> dict[int, TrajectoryCache]:
    caches = parallel_map(TrajectoryCache.build, trajs, threads)
    return {t.traj_id: c for t, c in zip(trajs, caches)}


@dataclass
class DemoBatch:
    X: np.ndarray            # (B, D) features of s
    actions: np.ndarray      # (B,)
    Xn: np.ndarray           # (B', D) features of the non-terminal successors
    next_idx: np.ndarray     # (B',) row in the batch each successor belongs to
    legal_n: np.ndarray      # (B', N^2)
    X0: np.ndarray           # (B0, D) initial states
    legal0: np.ndarray       # (B0, N^2)

    @property
    def size(self) -> int:
        return len(self.actions)


def demo_batch(caches: dict[int, TrajectoryCache], refs) -> DemoBatch:
    """Batch of expert transitions addressed by ``(traj_id, step)`` references."""
    X, acts, Xn, nidx, ln = [], [], [], [], []
    x0, l0 = {}, {}
    for i, (tid, t) in enumerate(refs):
        c = caches[tid]
        X.append(c.X[t])
        acts.append(_action_between(c.states[t], c.states[t + 1]))
        if t + 1 < len(c.X):
            Xn.append(c.X[t + 1])
            ln.append(c.legal[t + 1])
            nidx.append(i)
        x0.setdefault(tid, c.X[0])
        l0.setdefault(tid, c.legal[0])
    D = len(X[0])
    O = len(next(iter(caches.values())).legal[0])
    return DemoBatch(np.array(X), np.array(acts), np.array(Xn).reshape(-1, D),
                     np.array(nidx, dtype=int), np.array(ln).reshape(-1, O),
                     np.array(list(x0.values())), np.array(list(l0.values())))


def _action_between(s: env.PlacementState, s_next: env.PlacementState) -> int:
    mid = s.order[s.cursor]
    x, y = s_next.placements[mid]
    return env.encode(x, y, s.netlist.grid_n)


def iq_objective(rm: RewardModel, batch: DemoBatch, alpha: float | None = None):
    """Negated offline inverse soft-Q objective and its parameter gradient."""
    if batch.size == 0:
        raise EmptyBatchError("empty transition batch")
    alpha = rm.alpha if alpha is None else alpha
    g = rm.gamma
    B = batch.size
    nn_ = len(batch.Xn)
    Xall = np.concatenate([batch.X, batch.Xn, batch.X0])
    out = forward(rm.model, Xall)
    Q, Qn, Q0 = out[:B], out[B:B + nn_], out[B + nn_:]
    rows = np.arange(B)
    v_next = np.zeros(B)
    p_next = None
    if nn_:
        lse, p_next = _masked_lse_softmax(Qn, batch.legal_n)
        v_next[batch.next_idx] = lse
    v0, p0 = _masked_lse_softmax(Q0, batch.legal0)
    r = Q[rows, batch.actions] - g * v_next
    J = np.mean(r - alpha * r * r) - (1 - g) * np.mean(v0)
    dr = -(1.0 - 2.0 * alpha * r) / B
    G = np.zeros_like(out)
    G[rows, batch.actions] = dr
    if nn_:
        G[B:B + nn_] = (-g * dr[batch.next_idx])[:, None] * p_next
    G[B + nn_:] = (1 - g) / len(Q0) * p0
    return float(-J), backward(rm.model, Xall, G)


@dataclass
class PrefBatch:
    X: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray

    @property
    def size(self) -> int:
        return len(self.chosen)


def pref_batch(caches: dict[int, TrajectoryCache], prefs: list[PreferenceTuple]) -> PrefBatch:
    X = np.array([caches[p.traj_id].X[p.step] for p in prefs])
    return PrefBatch(X, np.array([p.chosen for p in prefs]),
                     np.array([p.rejected for p in prefs]))


def pref_loss(rm: RewardModel, batch: PrefBatch, alpha: float | None = None):
    """Pairwise logistic loss with the squared-reward penalty, and its gradient."""
    if batch.size == 0:
        raise EmptyBatchError("empty preference batch")
    alpha = rm.alpha if alpha is None else alpha
    B = batch.size
    out = forward(rm.model, batch.X)
    rows = np.arange(B)
    rc, rr = out[rows, batch.chosen], out[rows, batch.rejected]
    z = rc - rr
    # -log sigmoid(z) = softplus(-z)
    loss = np.mean(np.logaddexp(0.0, -z)) + alpha * np.mean(rc * rc + rr * rr)
    s_neg = np.exp(-np.logaddexp(0.0, z))   # sigmoid(-z)
    G = np.zeros_like(out)
    np.add.at(G, (rows, batch.chosen), (-s_neg + 2 * alpha * rc) / B)
    np.add.at(G, (rows, batch.rejected), (s_neg + 2 * alpha * rr) / B)
    return float(loss), backward(rm.model, batch.X, G)


# --- evaluation --------------------------------------------------------------

@dataclass
class ValidationSet:
    """Validation tuples with their states materialised for scoring."""
    X: np.ndarray                    # (n, D)
    candidates: np.ndarray           # (n, 1 + m) expert first, -1 padded
    tuples: list[ValidationTuple]
    states: list = field(repr=False)
    _next: tuple | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.tuples)

    @classmethod
    def build(cls, dataset_or_trajs, tuples: list[ValidationTuple] | None = None,
              threads: int = 1, caches: dict | None = None) -> "ValidationSet":
        if isinstance(dataset_or_trajs, EIMDataset):
            trajs = dataset_or_trajs.validation_trajectories
            tuples = dataset_or_trajs.validation if tuples is None else tuples
        else:
            trajs = dataset_or_trajs
        if not tuples:
            raise EmptyBatchError("empty validation set")
        if caches is None:
            needed = {v.traj_id for v in tuples}
            caches = build_caches([t for t in trajs if t.traj_id in needed], threads)
        width = 1 + max(len(v.distractors) for v in tuples)
        cand = np.full((len(tuples), width), -1, dtype=int)
        for i, v in enumerate(tuples):
            row = (v.expert_action,) + v.distractors
            cand[i, :len(row)] = row
        X = np.array([caches[v.traj_id].X[v.step] for v in tuples])
        states = [caches[v.traj_id].states[v.step] for v in tuples]
        return cls(X, cand, list(tuples), states)

    def successors(self, threads: int = 1):
        """Features/legal masks of every live ``step(s, candidate)``; computed once."""
        if self._next is None:
            def one(i):
                rows = []
                for j, a in enumerate(self.candidates[i]):
                    if a < 0:
                        continue
                    s2, done = env.step(self.states[i], int(a))
                    if not done:
                        rows.append((j, features_of(s2), env.position_mask(s2).ravel()))
                return rows

            feats, legal, where = [], [], []
            for i, rows in enumerate(parallel_map(one, range(len(self.tuples)), threads)):
                for j, f, l in rows:
                    feats.append(f)
                    legal.append(l)
                    where.append((i, j))
            D = self.X.shape[1]
            O = self.states[0].netlist.grid_n ** 2
            self._next = (np.array(feats).reshape(-1, D), np.array(legal).reshape(-1, O),
                          np.array(where, dtype=int).reshape(-1, 2))
        return self._next


def score_candidates(rm: RewardModel, vset: ValidationSet, threads: int = 1) -> np.ndarray:
    """Reward of every candidate action; padding slots are ``-inf``."""
    out = forward(rm.model, vset.X)
    pad = vset.candidates < 0
    cand = np.where(pad, 0, vset.candidates)
    scores = np.take_along_axis(out, cand, axis=1)
    if rm.kind == DEMONSTRATION:
        Xn, legal_n, where = vset.successors(threads)
        if len(Xn):
            v, _ = _masked_lse_softmax(forward(rm.model, Xn), legal_n)
            scores[where[:, 0], where[:, 1]] -= rm.gamma * v
    return np.where(pad, -np.inf, scores)


def reward_accuracy(rm: RewardModel, vset: ValidationSet, threads: int = 1) -> float:
    """Top-1 accuracy; the expert must score strictly above every distractor."""
    if len(vset) == 0:
        raise EmptyBatchError("empty validation set")
    return top1_accuracy(score_candidates(rm, vset, threads))


def top1_accuracy(scores: np.ndarray) -> float:
    """Share of rows whose first (expert) score beats every other entry strictly."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] == 0:
        raise EmptyBatchError("empty validation set")
    best_other = scores[:, 1:].max(1) if scores.shape[1] > 1 else np.full(len(scores), -np.inf)
    return float(np.mean(scores[:, 0] > best_other))


# --- training ----------------------------------------------------------------

def _train(rm: RewardModel, n_items: int, loss_fn, cfg: TrainConfig,
           vset: ValidationSet | None, threads: int):
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState.fresh(rm.model, lr=cfg.lr)
    history = []
    best_acc, best_params, best_epoch = -1.0, rm.model.params.copy(), 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n_items)
        losses, weights = [], []
        for lo in range(0, n_items, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            loss, grad = loss_fn(rm, idx)
            opt, rm.model = adam_step(opt, rm.model, grad)
            losses.append(loss)
            weights.append(len(idx))
        rec = {"epoch": epoch, "loss": float(np.average(losses, weights=weights)),
               "val_accuracy": None, "wall_ms": None}
        if vset is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            acc = reward_accuracy(rm, vset, threads)
            rec["val_accuracy"] = acc
            if acc > best_acc:
                best_acc, best_params, best_epoch = acc, rm.model.params.copy(), epoch
        if cfg.record_time:
            rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        history.append(rec)
        log.debug("epoch %d loss %.6f acc %s", epoch, rec["loss"], rec["val_accuracy"])
    if vset is not None:
        rm.model = rm.model.with_params(best_params)
    return rm, history, {"best_epoch": best_epoch, "best_val_accuracy": best_acc}


def _new_reward_model(kind: str, grid_n: int, cfg: TrainConfig) -> RewardModel:
    model = init_model(Arch(grid_n=grid_n, hidden=cfg.hidden, pixel_hidden=cfg.pixel_hidden), cfg.seed)
    return RewardModel(kind, model, gamma=cfg.gamma, alpha=cfg.alpha)


def train_eim_d(dataset: EIMDataset, cfg: TrainConfig, vset: ValidationSet | None = None,
                threads: int = 1):
    """Fit a soft-Q reward on the training trajectories.

    Returns ``(reward_model, history, summary)``; the model is the checkpoint
    with the best validation accuracy when validation data is available.
    """
    trajs = dataset.train_trajectories
    if not trajs:
        raise EmptyBatchError("dataset holds no training trajectories")
    caches = build_caches(trajs, threads)
    refs = [(t.traj_id, k) for t in trajs for k in range(len(t))]
    if vset is None and dataset.validation:
        vset = ValidationSet.build(dataset, threads=threads)
    rm = _new_reward_model(DEMONSTRATION, dataset.netlist.grid_n, cfg)

    def loss_fn(model, idx):
        return iq_objective(model, demo_batch(caches, [refs[i] for i in idx]))

    return _train(rm, len(refs), loss_fn, cfg, vset, threads)


def train_eim_p(dataset: EIMDataset, cfg: TrainConfig, vset: ValidationSet | None = None,
                threads: int = 1):
    """Fit a preference reward on the training preference tuples."""
    prefs = dataset.preferences
    if not prefs:
        raise EmptyBatchError("dataset holds no preference tuples")
    needed = {p.traj_id for p in prefs}
    caches = build_caches([t for t in dataset.trajectories if t.traj_id in needed], threads)
    full = pref_batch(caches, prefs)
    if vset is None and dataset.validation:
        vset = ValidationSet.build(dataset, threads=threads)
    rm = _new_reward_model(PREFERENCE, dataset.netlist.grid_n, cfg)

    def loss_fn(model, idx):
        return pref_loss(model, PrefBatch(full.X[idx], full.chosen[idx], full.rejected[idx]))

    return _train(rm, full.size, loss_fn, cfg, vset, threads)


# --- checkpoints -------------------------------------------------------------

def reward_to_dict(rm: RewardModel) -> dict:
    doc = model_to_dict(rm.model)
    doc.update(kind=rm.kind, gamma=rm.gamma, alpha=rm.alpha)
    return doc


def reward_from_dict(doc: dict) -> RewardModel:
    return RewardModel(doc["kind"], model_from_dict(doc), float(doc["gamma"]),
                       float(doc["alpha"]))


def save_reward(rm: RewardModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(reward_to_dict(rm), f, sort_keys=True)
        f.write("\n")


def load_reward(path) -> RewardModel:
    with open(path, encoding="utf-8") as f:
        return reward_from_dict(json.load(f))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
