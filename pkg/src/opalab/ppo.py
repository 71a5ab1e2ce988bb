"""PPO for online parcel assignment, with a learned immediate-reward baseline.

One training episode:

1. roll out ``trajectories_per_episode`` trajectories of the current actor;
2. advantage ``A_t = r_t - R_phi(obs_t)`` with the current reward network;
3. shuffle every step into one buffer, ascend the clipped surrogate in
   minibatches with Adam;
4. regress the reward network on ``(obs_t, r_t)`` by minibatch MSE.

:func:`train_ppo_pd` runs the same loop on the bare ``-cost`` reward and
prices constraint consumption with projected dual multipliers updated once per
episode.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .env import PARCEL_DIM, ROUTE_DIM, BatchEnv, Report, evaluate_assignment
from .model import Instance
from .nets import ActorNet, Batch, NetConfig, RewardNet
from .neural import AdamState, TrainingError, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 20
    trajectories_per_episode: int = 50
    minibatch: int = 2048
    clip_eps: float = 0.2
    lambda_cap: float = 10.0
    lambda_prop: float = 300.0
    lr_actor: float = 1e-3
    lr_reward: float = 1e-3
    gamma: float = 1.0          # kept for completeness; the advantage uses immediate rewards only
    update_epochs: int = 1
    dual_step: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    normalized_attention: bool = False

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.minibatch < 1 or self.episodes < 0 or self.trajectories_per_episode < 1:
            raise ValueError("minibatch and trajectories_per_episode must be >= 1, episodes >= 0")


@dataclass
class Trajectory:
    """One rollout. Observation arrays are stacked over time."""

    instance_label: str
    seed: int
    worker: int
    obs: Batch
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class Rollouts:
    """``n`` lockstep trajectories; every array is indexed ``[t, worker, ...]``."""

    instance: Instance
    seed: int
    parcel: np.ndarray        # (T, B, PARCEL_DIM)
    routes: np.ndarray        # (T, B, N, ROUTE_DIM)
    mask: np.ndarray          # (T, N)
    actions: np.ndarray       # (T, B)
    logp: np.ndarray          # (T, B) behavior log-probability of the sampled slot
    rewards: np.ndarray       # (T, B)
    costs: np.ndarray         # (T, B)
    slots: np.ndarray         # (B, T) assignment per worker

    @property
    def n(self) -> int:
        return self.actions.shape[1]

    def flat(self) -> tuple[Batch, np.ndarray, np.ndarray, np.ndarray]:
        """Time-major flattening: ``(obs, actions, logp, rewards)`` with one row per step."""
        T, B = self.actions.shape
        mask = np.broadcast_to(self.mask[:, None, :], (T, B, self.mask.shape[1])).reshape(T * B, -1)
        obs = Batch(self.parcel.reshape(T * B, -1), self.routes.reshape(T * B, *self.routes.shape[2:]), mask)
        return obs, self.actions.reshape(-1), self.logp.reshape(-1), self.rewards.reshape(-1)

    def trajectories(self) -> list[Trajectory]:
        out = []
        for b in range(self.n):
            obs = Batch(self.parcel[:, b], self.routes[:, b], self.mask)
            out.append(Trajectory(self.instance.label, self.seed, b, obs, self.actions[:, b],
                                  self.logp[:, b], self.rewards[:, b]))
        return out

    def reports(self) -> list[Report]:
        return [evaluate_assignment(self.instance, self.slots[b]) for b in range(self.n)]


def sample_slots(probs: np.ndarray, mask: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row; never lands on a masked or zero-probability slot."""
    # slot i is drawn iff cum[i-1] <= u * total < cum[i], so probs[i] > 0
    cum = np.cumsum(probs, axis=-1)
    idx = (cum <= u[:, None] * cum[:, -1:]).sum(axis=-1)
    positive = (probs > 0) & mask
    last = mask.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    return np.minimum(idx, last)


def collect(actor: ActorNet, instance: Instance, n: int, seed: int, lambda_cap: float = 10.0,
            lambda_prop: float = 300.0, greedy: bool = False) -> Rollouts:
    """Run ``n`` trajectories of ``actor``; worker ``b`` draws from ``SeedSequence([seed, b])``."""
    m = instance.m
    env = BatchEnv(instance, n, lambda_cap, lambda_prop)
    draws = np.stack([np.random.default_rng(np.random.SeedSequence([seed, b])).random(m) for b in range(n)])
    dt = actor.dtype
    N = instance.n_r_max
    parcel = np.empty((m, n, PARCEL_DIM), dtype=dt)
    routes = np.empty((m, n, N, ROUTE_DIM), dtype=dt)
    actions = np.empty((m, n), dtype=np.int64)
    logp = np.empty((m, n))
    rewards = np.empty((m, n))
    costs = np.empty((m, n))
    obs = env.observe()
    rows = np.arange(n)
    scorer = actor.rollout_scorer(env.parcel_static, env.route_static, instance.arrays.cand_mask)
    for t in range(m):
        parcel[t] = obs.parcel_feat
        routes[t] = obs.route_feats
        lp = scorer.log_probs(t, obs.route_feats).astype(np.float64)
        probs = np.exp(lp)
        if greedy:
            a = np.argmax(np.where(obs.mask, lp, -np.inf), axis=1)
        else:
            a = sample_slots(probs, obs.mask, draws[:, t])
        actions[t] = a
        logp[t] = lp[rows, a]
        r, c, _, _, obs = env.step(a)
        rewards[t] = r
        costs[t] = c
    return Rollouts(instance, seed, parcel, routes, instance.arrays.cand_mask.copy(), actions, logp,
                    rewards, costs, env.slots.copy())


def _chunks(n: int, size: int) -> Iterator[slice]:
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def predict_rewards(reward_net: RewardNet, obs: Batch, chunk: int = 8192) -> np.ndarray:
    out = np.empty(len(obs))
    for s in _chunks(len(obs), chunk):
        out[s] = reward_net.forward(obs.take(s))[0]
    return out


def behavior_log_probs(actor: ActorNet, obs: Batch, actions: np.ndarray,
                       minibatches: list[np.ndarray] | None = None) -> np.ndarray:
    """Log-probabilities of the taken actions under the full forward pass.

    The rollout scorer is a faster but differently rounded path, and float32
    BLAS rounding can depend on a row's position in the batch. Evaluating each
    minibatch exactly as the update will see it makes the ratio exactly 1
    before the first step.
    """
    if minibatches is None:
        minibatches = [np.arange(s.start, s.stop) for s in _chunks(len(actions), 8192)]
    out = np.empty(len(actions))
    for idx in minibatches:
        lp = actor.log_probs(obs.take(idx))[0]
        out[idx] = lp[np.arange(len(idx)), actions[idx]]
    return out


def advantages(rollouts: Rollouts, reward_net: RewardNet) -> np.ndarray:
    """``A_t = r_t - R_phi(obs_t)`` for every step, shape ``(T, B)``; no discounting."""
    obs, _, _, rewards = rollouts.flat()
    return (rewards - predict_rewards(reward_net, obs)).reshape(rollouts.actions.shape)


def clip_objective(actor: ActorNet, obs: Batch, actions: np.ndarray, behavior_logp: np.ndarray,
                   adv: np.ndarray, eps: float, need_grad: bool = True):
    """Mean clipped surrogate over the batch and its gradient w.r.t. the actor parameters.

    Returns ``(value, grads, terms, ratio)``; ``grads`` is None when ``need_grad`` is False.
    """
    if not np.all(np.isfinite(behavior_logp)):
        raise TrainingError("behavior probability of a taken action is zero")
    logp_all, cache = actor.log_probs(obs)
    rows = np.arange(len(actions))
    logp = logp_all[rows, actions].astype(np.float64)
    ratio = np.exp(logp - behavior_logp)
    if not np.all(np.isfinite(ratio)):
        raise TrainingError("non-finite probability ratio")
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    terms = np.minimum(ratio * adv, clipped * adv)
    value = float(terms.mean())
    if not need_grad:
        return value, None, terms, ratio
    # unclipped branch active: derivative adv * ratio w.r.t. log-prob
    active = np.where(adv >= 0, ratio <= 1.0 + eps, ratio >= 1.0 - eps)
    g_logp = np.where(active, adv * ratio, 0.0) / len(actions)
    probs = cache["probs"]
    g_logits = -probs * g_logp[:, None]
    g_logits[rows, actions] += g_logp
    grads = actor.backward_logits(cache, g_logits.astype(actor.dtype))
    return value, grads, terms, ratio


def reward_mse(reward_net: RewardNet, obs: Batch, rewards: np.ndarray, need_grad: bool = True):
    pred, cache = reward_net.forward(obs)
    err = pred.astype(np.float64) - rewards
    loss = float(np.mean(err ** 2))
    if not math.isfinite(loss):
        raise TrainingError("non-finite reward-network loss")
    if not need_grad:
        return loss, None
    return loss, reward_net.backward(cache, 2.0 * err / len(err))


def fit_reward_net(reward_net: RewardNet, obs: Batch, rewards: np.ndarray, adam: AdamState,
                   minibatch: int = 2048, rng: np.random.Generator | None = None,
                   epochs: int = 1) -> list[float]:
    """Minibatch Adam on the squared error; returns each minibatch's pre-update loss."""
    if len(rewards) == 0:
        raise ValueError("empty batch")
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(rewards)) if rng is not None else np.arange(len(rewards))
        for s in _chunks(len(order), minibatch):
            idx = order[s]
            loss, grads = reward_mse(reward_net, obs.take(idx), rewards[idx])
            history.append(loss)
            adam_step(reward_net.params, grads, adam)
    return history


# -- dual prices for the constrained variant ---------------------------------

@dataclass
class DualState:
    """One multiplier per constraint row: capacity upper bounds, proportion upper and lower bounds."""

    lam_cap: np.ndarray
    lam_prop_up: np.ndarray
    lam_prop_lo: np.ndarray
    step: float = 1.0
    consumption: dict[str, float] = field(default_factory=dict)

    @classmethod
    def zeros(cls, instance: Instance, step: float = 1.0) -> "DualState":
        arr = instance.arrays
        return cls(np.zeros(len(arr.cap_index)), np.zeros(len(arr.prop_index)),
                   np.zeros(len(arr.prop_index)), step)

    def step_penalty(self, instance: Instance, rollouts: Rollouts) -> np.ndarray:
        """``sum_k lam_k * consumption increment of k`` for every step, shape ``(T, B)``."""
        arr = instance.arrays
        route = arr.cand_route[np.arange(instance.m)[:, None], rollouts.actions]    # (T, B)
        pen = arr.route_cap[route] @ self.lam_cap
        if len(arr.prop_index):
            seen = arr.od_prop[arr.parcel_od][:, None, :]                          # (T, 1, P)
            hit = arr.route_prop[route]                                             # (T, B, P)
            pen = pen + (hit - arr.prop_upper * seen) @ self.lam_prop_up
            pen = pen + (arr.prop_lower * seen - hit) @ self.lam_prop_lo
        return pen

    def update(self, instance: Instance, rollouts: Rollouts) -> None:
        """Projected step on the batch-mean consumption ``J_k`` relative to each bound."""
        arr = instance.arrays
        route = arr.cand_route[np.arange(instance.m)[None, :], rollouts.slots]       # (B, T)
        used = arr.route_cap[route].sum(axis=1).mean(axis=0)
        scale = np.maximum(arr.cap_upper, 1.0)
        self.lam_cap = np.maximum(0.0, self.lam_cap + self.step * (used - arr.cap_upper) / scale)
        self.consumption = {instance.constraints[i].id: float(u) for i, u in zip(arr.cap_index, used)}
        if len(arr.prop_index):
            hit = arr.route_prop[route].sum(axis=1).mean(axis=0)
            n_k = arr.od_prop[arr.parcel_od].sum(axis=0)
            up, lo = arr.prop_upper * n_k, arr.prop_lower * n_k
            pscale = np.maximum(n_k, 1.0)
            self.lam_prop_up = np.maximum(0.0, self.lam_prop_up + self.step * (hit - up) / pscale)
            self.lam_prop_lo = np.maximum(0.0, self.lam_prop_lo + self.step * (lo - hit) / pscale)
            for i, h in zip(arr.prop_index, hit):
                self.consumption[instance.constraints[i].id] = float(h)


# -- training loop -------------------------------------------------------------

@dataclass
class EpisodeMetrics:
    episode: int
    shaped_return: float       # mean over trajectories of the per-trajectory reward sum
    average_cost: float
    violation_rate: float
    reward_mse: float
    surrogate: float


@dataclass
class TrainResult:
    actor: ActorNet
    reward_net: RewardNet
    metrics: list[EpisodeMetrics]
    dual: DualState | None = None


def init_networks(instance: Instance, config: TrainConfig) -> tuple[ActorNet, RewardNet]:
    net_cfg = NetConfig.for_instance(instance, dtype=config.dtype,
                                     normalized_attention=config.normalized_attention)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    return ActorNet.init(net_cfg, rng), RewardNet.init(net_cfg, rng)


def _train(instance: Instance, config: TrainConfig, dual: DualState | None, out_dir: Path | None,
           update_duals: bool = True) -> TrainResult:
    actor, reward_net = init_networks(instance, config)
    adam_a = AdamState(lr=config.lr_actor)
    adam_r = AdamState(lr=config.lr_reward)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    lam_cap, lam_prop = (0.0, 0.0) if dual is not None else (config.lambda_cap, config.lambda_prop)
    metrics = []
    log_lines = ["episode\tshaped_return\taverage_cost\tviolation_rate\treward_mse\tsurrogate"]
    for k in range(config.episodes):
        roll = collect(actor, instance, config.trajectories_per_episode, seed=config.seed * 100_003 + k,
                       lambda_cap=lam_cap, lambda_prop=lam_prop)
        if dual is not None:
            roll.rewards = roll.rewards - dual.step_penalty(instance, roll)
        obs, actions, _, rewards = roll.flat()
        if k == 0:
            # start the output unit at the batch-mean reward so regression need not climb to it
            reward_net.params["out.y.b"][:] = rewards.mean()
        adv = rewards - predict_rewards(reward_net, obs)
        epochs = []
        for _ in range(config.update_epochs):
            order = rng.permutation(len(actions))
            epochs.append([order[s] for s in _chunks(len(order), config.minibatch)])
        logp = behavior_log_probs(actor, obs, actions, epochs[0] if epochs else None)
        surrogate = []
        for minibatches in epochs:
            for idx in minibatches:
                val, grads, _, _ = clip_objective(actor, obs.take(idx), actions[idx], logp[idx], adv[idx],
                                                  config.clip_eps)
                surrogate.append(val)
                adam_step(actor.params, {n: -g for n, g in grads.items()}, adam_a)
        losses = fit_reward_net(reward_net, obs, rewards, adam_r, config.minibatch, rng)
        reports = roll.reports()
        em = EpisodeMetrics(
            episode=k,
            shaped_return=float(roll.rewards.sum(axis=0).mean()),
            average_cost=float(np.mean([r.average_cost for r in reports])),
            violation_rate=float(np.mean([r.violation_rate for r in reports])),
            reward_mse=float(np.mean(losses)),
            surrogate=float(np.mean(surrogate)) if surrogate else 0.0,
        )
        metrics.append(em)
        if dual is not None and update_duals:
            dual.update(instance, roll)
        log.info("episode %d: return %.4g cost %.5g violation %.4f mse %.4g", k, em.shaped_return,
                 em.average_cost, em.violation_rate, em.reward_mse)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            actor.save(out_dir / "actor.npz")
            reward_net.save(out_dir / "reward.npz")
            log_lines.append(f"{k}\t{em.shaped_return!r}\t{em.average_cost!r}\t{em.violation_rate!r}\t"
                             f"{em.reward_mse!r}\t{em.surrogate!r}")
            (out_dir / "train_log.tsv").write_text("\n".join(log_lines) + "\n")
    return TrainResult(actor, reward_net, metrics, dual)


def train(instance: Instance, config: TrainConfig, out_dir: str | Path | None = None) -> TrainResult:
    return _train(instance, config, None, Path(out_dir) if out_dir else None)


def train_ppo_pd(instance: Instance, config: TrainConfig, dual: DualState | None = None,
                 out_dir: str | Path | None = None, update_duals: bool = True) -> TrainResult:
    """PPO on the bare negative-cost reward with per-episode projected dual updates."""
    dual = dual or DualState.zeros(instance, config.dual_step)
    return _train(instance, config, dual, Path(out_dir) if out_dir else None, update_duals)


def evaluate_policy(actor: ActorNet, instance: Instance, seed: int, greedy: bool = False) -> tuple[Report, np.ndarray]:
    roll = collect(actor, instance, 1, seed, greedy=greedy)
    return roll.reports()[0], roll.slots[0]
