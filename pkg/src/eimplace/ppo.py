"""PPO for the masked grid placement policy.

The actor is a :class:`QMapModel` producing one logit per cell; illegal
cells are masked out before the softmax. The critic is the same network
with a single output. Rewards come from a pluggable source: the dense HPWL
reward or one of the learned reward models.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import env
from .approximator import (Arch, OptimizerState, QMapModel, adam_step, backward, forward,
                           init_model, model_from_dict, model_to_dict)
from .netlist import Netlist
from .parallel import parallel_map
from .reward import DEMONSTRATION, NoLegalActionError, RewardModel, _masked_lse_softmax

log = logging.getLogger(__name__)

REWARD_SOURCES = ("hpwl", "eim_d", "eim_p")


class StaleBatchError(RuntimeError):
    pass


@dataclass
class PPOConfig:
    clip: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    epochs_per_update: int = 4
    rollout_episodes: int = 16
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 3e-3
    total_updates: int = 200
    seed: int = 0
    reward_source: str = "hpwl"
    reward_standardize: bool = True
    hidden: int = 0
    pixel_hidden: int = 32
    critic_hidden: int = 64

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError(f"clip must lie in (0, 1), got {self.clip}")
        if min(self.epochs_per_update, self.rollout_episodes, self.total_updates) < 1:
            raise ValueError("epochs_per_update, rollout_episodes and total_updates must be >= 1")
        if self.reward_source not in REWARD_SOURCES:
            raise ValueError(f"reward_source must be one of {REWARD_SOURCES}")


@dataclass
class PolicyModel:
    actor: QMapModel
    critic: QMapModel


def init_policy(grid_n: int, hidden: int = 256, seed: int = 0, pixel_hidden: int = 0,
                critic_hidden: int | None = None) -> PolicyModel:
    actor = init_model(Arch(grid_n=grid_n, hidden=hidden, pixel_hidden=pixel_hidden), seed)
    ch = hidden if critic_hidden is None else critic_hidden
    critic = init_model(Arch(grid_n=grid_n, hidden=ch, out_dim=1), seed + 1)
    return PolicyModel(actor, critic)


def uniform_policy(grid_n: int, hidden: int = 8) -> PolicyModel:
    """All-zero actor: uniform over legal cells."""
    p = init_policy(grid_n, hidden)
    return PolicyModel(p.actor.with_params(np.zeros_like(p.actor.params)),
                       p.critic.with_params(np.zeros_like(p.critic.params)))


def _masked_log_softmax(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    lse, _ = _masked_lse_softmax(logits, legal)
    return np.where(legal.astype(bool), logits - lse[:, None], -np.inf)


def policy_distribution(p: PolicyModel, s: env.PlacementState) -> np.ndarray:
    legal = env.position_mask(s).ravel()
    if not legal.any():
        raise NoLegalActionError(f"no legal cell at step {s.cursor}")
    logits = forward(p.actor, env.feature_maps(s).stack().ravel())
    _, probs = _masked_lse_softmax(logits[None, :], legal[None, :])
    return probs[0]


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))


# --- reward sources ------------------------------------------------------------

class RunningStats:
    """Welford mean/variance, updated one sample at a time."""

    def __init__(self):
        self.count, self.mean, self.m2 = 0, 0.0, 0.0

    def update(self, x: float) -> None:
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += d * (x - self.mean)

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / self.count)) if self.count > 1 else 1.0


class HPWLReward:
    name = "hpwl"
    standardize = False

    def raw(self, states, actions, next_states, X, Xn):
        return np.array([env.dense_hpwl_reward(s, a, s2)
                         for s, a, s2 in zip(states, actions, next_states)])


class LearnedReward:
    """Reward from a trained model, optionally standardized with running statistics."""

    def __init__(self, rm: RewardModel, standardize: bool = True):
        self.rm = rm
        self.name = "eim_d" if rm.kind == DEMONSTRATION else "eim_p"
        self.standardize = standardize
        self.stats = RunningStats()

    def raw(self, states, actions, next_states, X, Xn):
        rows = np.arange(len(actions))
        r = forward(self.rm.model, X)[rows, actions]
        if self.rm.kind == DEMONSTRATION:
            live = [i for i, s2 in enumerate(next_states) if not s2.done]
            if live:
                legal = np.stack([env.position_mask(next_states[i]).ravel() for i in live])
                v, _ = _masked_lse_softmax(forward(self.rm.model, Xn[live]), legal)
                r[live] -= self.rm.gamma * v
        return r


def make_reward_source(name: str, rm: RewardModel | None = None, standardize: bool = True):
    if name == "hpwl":
        return HPWLReward()
    if rm is None:
        raise ValueError(f"reward source {name!r} needs a reward model")
    expected = "eim_d" if rm.kind == DEMONSTRATION else "eim_p"
    if expected != name:
        raise ValueError(f"reward source {name!r} given a {rm.kind} model")
    return LearnedReward(rm, standardize)


# --- rollouts -------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    X: list = field(default_factory=list)
    legal: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    raw_rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    final_hpwl: float = float("nan")
    periphery: float = float("nan")
    failed: bool = False
    layout: env.Layout | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.actions)


def _features_and_legal(s: env.PlacementState):
    fm = env.feature_maps(s)
    return fm.stack().ravel(), fm.position.ravel().astype(np.uint8)


def collect_rollouts(p: PolicyModel, n: Netlist, reward_source, count: int, seed: int,
                     threads: int = 1) -> list[EpisodeRecord]:
    """Run ``count`` episodes in lockstep; each episode has its own seeded generator."""
    rngs = [np.random.default_rng([seed, i]) for i in range(count)]
    eps = [EpisodeRecord() for _ in range(count)]
    states = [env.reset(n) for _ in range(count)]
    active = list(range(count))
    cur = parallel_map(_features_and_legal, states, threads)
    while active:
        live = [i for i in active if cur[i][1].any()]
        for i in active:
            if i not in live:
                eps[i].failed = True
                log.warning("episode %d failed at step %d: no legal cell", i, states[i].cursor)
        if not live:
            break
        X = np.stack([cur[i][0] for i in live])
        legal = np.stack([cur[i][1] for i in live])
        logp = _masked_log_softmax(forward(p.actor, X), legal)
        values = forward(p.critic, X)[:, 0]
        acts, nxt = [], []
        for j, i in enumerate(live):
            a = sample_action(np.exp(logp[j]), rngs[i])
            acts.append(a)
            nxt.append(env.step(states[i], a)[0])
        feats = parallel_map(lambda s2: _features_and_legal(s2) if not s2.done else None,
                             nxt, threads)
        D = X.shape[1]
        Xn = np.stack([f[0] if f is not None else np.zeros(D) for f in feats])
        raw = reward_source.raw([states[i] for i in live], np.array(acts), nxt, X, Xn)
        for j, i in enumerate(live):
            r = float(raw[j])
            if reward_source.standardize:
                reward_source.stats.update(r)
                std = reward_source.stats.std
                r_used = (r - reward_source.stats.mean) / max(std, 1e-8)
            else:
                r_used = r
            ep = eps[i]
            ep.X.append(X[j]); ep.legal.append(legal[j]); ep.actions.append(acts[j])
            ep.log_probs.append(float(logp[j, acts[j]])); ep.values.append(float(values[j]))
            ep.rewards.append(r_used); ep.raw_rewards.append(r)
            ep.dones.append(nxt[j].done)
            states[i] = nxt[j]
            cur[i] = feats[j]
        active = [i for i in live if not states[i].done]
    for ep, s in zip(eps, states):
        ep.final_hpwl = env.hpwl(s)
        ep.periphery = env.periphery_occupancy(s)
        ep.layout = env.layout_of(s)
    return eps


def gae_advantages(ep: EpisodeRecord, gamma: float, lam: float):
    """Generalized advantage estimates and returns for one complete episode."""
    r = np.asarray(ep.rewards, dtype=np.float64)
    v = np.asarray(ep.values, dtype=np.float64)
    done = np.asarray(ep.dones, dtype=np.float64)
    T = len(r)
    adv = np.zeros(T)
    last = 0.0
    for t in reversed(range(T)):
        v_next = v[t + 1] if t + 1 < T else 0.0
        delta = r[t] + gamma * v_next * (1.0 - done[t]) - v[t]
        last = delta + gamma * lam * (1.0 - done[t]) * last
        adv[t] = last
    return adv, adv + v


# --- update ---------------------------------------------------------------------

@dataclass
class PPOBatch:
    X: np.ndarray
    legal: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    @classmethod
    def from_episodes(cls, episodes: list[EpisodeRecord], gamma: float, lam: float):
        eps = [e for e in episodes if not e.failed and len(e)]
        advs, rets = zip(*(gae_advantages(e, gamma, lam) for e in eps))
        return cls(np.concatenate([np.stack(e.X) for e in eps]),
                   np.concatenate([np.stack(e.legal) for e in eps]),
                   np.concatenate([e.actions for e in eps]).astype(int),
                   np.concatenate([e.log_probs for e in eps]),
                   np.concatenate(advs), np.concatenate(rets))


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(adv.std(), 1e-8)


def ppo_loss(p: PolicyModel, batch: PPOBatch, cfg: PPOConfig, advantages=None):
    """Clipped surrogate + value + entropy terms.

    Returns ``(loss, actor_grad, critic_grad, info)``; ``advantages``
    defaults to the batch's (already normalized) advantages.
    """
    adv = batch.advantages if advantages is None else advantages
    B = len(batch.actions)
    rows = np.arange(B)
    ok = batch.legal.astype(bool)
    logits = forward(p.actor, batch.X)
    lse, probs = _masked_lse_softmax(logits, batch.legal)
    logp_all = np.where(ok, logits - lse[:, None], 0.0)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.old_log_probs)
    clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip)
    unclipped_term, clipped_term = ratio * adv, clipped * adv
    surrogate = np.minimum(unclipped_term, clipped_term)
    entropy = -(probs * logp_all).sum(1)
    values = forward(p.critic, batch.X)[:, 0]
    v_err = values - batch.returns
    loss = (-surrogate.mean() + cfg.value_coef * np.mean(v_err ** 2)
            - cfg.entropy_coef * entropy.mean())

    # d loss / d logp(a) from the surrogate; zero where the clipped branch is active
    active = unclipped_term <= clipped_term
    d_logp = np.where(active, -ratio * adv, 0.0) / B
    G = -probs * d_logp[:, None]
    G[rows, batch.actions] += d_logp
    # entropy: dH/dz_j = -p_j (log p_j + H)
    dH = -probs * (logp_all + entropy[:, None])
    G -= cfg.entropy_coef * dH / B
    G = np.where(ok, G, 0.0)
    actor_grad = backward(p.actor, batch.X, G)
    critic_grad = backward(p.critic, batch.X, (2 * cfg.value_coef * v_err / B)[:, None])
    info = {"surrogate": float(surrogate.mean()), "value_loss": float(np.mean(v_err ** 2)),
            "entropy": float(entropy.mean()), "max_logp_drift": float(
                np.max(np.abs(logp - batch.old_log_probs)))}
    return float(loss), actor_grad, critic_grad, info


@dataclass
class PPOState:
    policy: PolicyModel
    actor_opt: OptimizerState
    critic_opt: OptimizerState

    @classmethod
    def fresh(cls, policy: PolicyModel, lr: float) -> "PPOState":
        return cls(policy, OptimizerState.fresh(policy.actor, lr=lr),
                   OptimizerState.fresh(policy.critic, lr=lr))


def ppo_update(state: PPOState, batch: PPOBatch, cfg: PPOConfig):
    """``epochs_per_update`` full-batch passes; returns ``(state, info)``."""
    adv = normalize_advantages(batch.advantages)
    p, aopt, copt = state.policy, state.actor_opt, state.critic_opt
    info = {}
    for epoch in range(cfg.epochs_per_update):
        loss, ga, gc, info = ppo_loss(p, batch, cfg, adv)
        if epoch == 0 and info["max_logp_drift"] > 1e-6:
            raise StaleBatchError(f"batch log-probs differ from the current policy by "
                                  f"{info['max_logp_drift']:.3g}")
        aopt, actor = adam_step(aopt, p.actor, ga)
        copt, critic = adam_step(copt, p.critic, gc)
        p = PolicyModel(actor, critic)
        info["loss"] = loss
    return PPOState(p, aopt, copt), info


def train_policy(n: Netlist, reward_source, cfg: PPOConfig, threads: int = 1,
                 policy: PolicyModel | None = None):
    """Full PPO run; returns ``(policy, history)`` with one record per update."""
    if policy is None:
        policy = init_policy(n.grid_n, cfg.hidden, cfg.seed, cfg.pixel_hidden,
                             cfg.critic_hidden)
    state = PPOState.fresh(policy, cfg.lr)
    history = []
    for u in range(cfg.total_updates):
        eps = collect_rollouts(state.policy, n, reward_source, cfg.rollout_episodes,
                               seed=cfg.seed * 1_000_003 + u, threads=threads)
        good = [e for e in eps if not e.failed]
        rec = {"update": u + 1, "failures": len(eps) - len(good)}
        if good:
            batch = PPOBatch.from_episodes(good, cfg.gamma, cfg.gae_lambda)
            state, info = ppo_update(state, batch, cfg)
            rec.update(
                loss=info["loss"], entropy=info["entropy"],
                mean_hpwl=float(np.mean([e.final_hpwl for e in good])),
                mean_periphery=float(np.mean([e.periphery for e in good])),
                mean_reward=float(np.mean([sum(e.raw_rewards) for e in good])))
        history.append(rec)
        log.debug("update %d %s", u + 1, rec)
    return state.policy, history


def episode_metrics(p: PolicyModel, n: Netlist, episodes: int = 100, seed: int = 0,
                    reward_source=None, threads: int = 1) -> list[dict]:
    """One record per evaluation episode; failed episodes carry ``failed=True``."""
    source = HPWLReward() if reward_source is None else reward_source
    eps = collect_rollouts(p, n, source, episodes, seed, threads)
    return [{"episode": i, "failed": e.failed, "hpwl": e.final_hpwl,
             "periphery": e.periphery, "reward_sum": float(sum(e.raw_rewards)),
             "layout": e.layout} for i, e in enumerate(eps)]


def summarize_episodes(rows: list[dict]) -> dict:
    good = [r for r in rows if not r["failed"]]
    out = {"episodes": len(rows), "failures": len(rows) - len(good)}
    for key in ("hpwl", "periphery", "reward_sum"):
        xs = np.asarray([r[key] for r in good], dtype=np.float64)
        out[f"{key}_mean"] = float(xs.mean()) if len(xs) else float("nan")
        out[f"{key}_std"] = float(xs.std()) if len(xs) else float("nan")
    return out


def evaluate_policy(p: PolicyModel, n: Netlist, episodes: int = 100, seed: int = 0,
                    reward_source=None, threads: int = 1) -> dict:
    source = HPWLReward() if reward_source is None else reward_source
    rows = episode_metrics(p, n, episodes, seed, source, threads)
    return {"design": n.name, "seed": seed, "reward_source": source.name,
            **summarize_episodes(rows)}


def policy_to_dict(p: PolicyModel, cfg: PPOConfig | None = None) -> dict:
    doc = {"actor": model_to_dict(p.actor), "critic": model_to_dict(p.critic)}
    if cfg is not None:
        doc["config"] = asdict(cfg)
    return doc


def policy_from_dict(doc: dict) -> PolicyModel:
    return PolicyModel(model_from_dict(doc["actor"]), model_from_dict(doc["critic"]))


def save_policy(p: PolicyModel, path, cfg: PPOConfig | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(policy_to_dict(p, cfg), f, sort_keys=True)
        f.write("\n")


def load_policy(path) -> PolicyModel:
    with open(path, encoding="utf-8") as f:
        return policy_from_dict(json.load(f))
