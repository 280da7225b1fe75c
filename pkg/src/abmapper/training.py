"""Episodic actor-critic training and evaluation.

One update per episode, whole episode as the batch:

* bootstrap targets ``y = r + gamma * Q_target(o', a') * (1 - done)`` with
  ``a'`` sampled from the current actor;
* critic: one Adam step on ``sum (Q(o, a) - y)^2``;
* actor: one Adam step on ``-sum log pi(a | o) * y``; with
  ``critic_trains_encoder`` the shared CNN encoder also receives the critic
  loss gradient through the features it hands to the critic;
* soft update of the target critic.

``MapperBaseline`` trains one independent model set per agent and every
``evolution_period`` episodes lets each agent copy the networks of an agent
drawn from a softmax over the period's returns.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neural as nn
from .config import RunConfig
from .environment import GridWorld, RewardConfig, reset
from .errors import LengthMismatch, NonFiniteLoss
from .grid import N_ACTIONS, Action, GridMap
from .models import Dims, ModelSet, StackedActors, build_model_sets, neighbor_table, soft_update

log = logging.getLogger(__name__)


def td_target(r, gamma, q_next, done):
    """``r + gamma * q_next * (1 - done)``; works element-wise on arrays."""
    r = np.asarray(r, dtype=np.float64)
    return r + gamma * np.asarray(q_next, dtype=np.float64) * (1.0 - np.asarray(done, dtype=np.float64))


def actor_loss(log_probs, y) -> float:
    lp = np.asarray(log_probs, dtype=np.float64)
    yy = np.asarray(y, dtype=np.float64)
    if lp.shape != yy.shape:
        raise LengthMismatch(f"log_probs {lp.shape} vs y {yy.shape}")
    return float(-np.sum(lp * yy))


def critic_loss(q, y) -> float:
    qq = np.asarray(q, dtype=np.float64)
    yy = np.asarray(y, dtype=np.float64)
    if qq.shape != yy.shape:
        raise LengthMismatch(f"q {qq.shape} vs y {yy.shape}")
    return float(np.sum((qq - yy) ** 2))


@dataclass
class Trajectory:
    obs: np.ndarray  # [T+1, n, C, F, F] uint8
    actions: np.ndarray  # [T, n]
    rewards: np.ndarray  # [T, n]
    live: np.ndarray  # [T, n] agent still acting at step t
    terminal: np.ndarray  # [T, n] agent reached its goal during step t
    positions: np.ndarray  # [T+1, n, 2]
    done: np.ndarray  # [n] final goal flags

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=0)

    @property
    def success_rate(self) -> float:
        return float(self.done.mean())


@dataclass
class Learner:
    """Everything that changes during training."""

    config: RunConfig
    sets: list
    rng: np.random.Generator

    @property
    def n_agents(self) -> int:
        return sum(s.n for s in self.sets)


def dims_from(cfg: RunConfig) -> Dims:
    return Dims(cfg.conv_channels, cfg.feature, cfg.bicnet_hidden, cfg.embed, cfg.attn, cfg.f_hidden)


def make_learner(cfg: RunConfig) -> Learner:
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    sets = build_model_sets(cfg.mode, cfg.n_agents, init_rng, dims_from(cfg),
                            shared_critic=cfg.shared_critic(), query_from=cfg.query_from)
    return Learner(cfg, sets, np.random.default_rng(np.random.SeedSequence([cfg.seed, 2])))


def mode_rates(cfg: RunConfig) -> tuple[float, float, float]:
    """(actor lr, critic lr, tau) for the configured mode.

    Modes without the attention critic train both networks at one rate and
    bootstrap from the live critic (tau = 1).
    """
    if cfg.mode in ("ABMapper", "AttentionOnly"):
        return cfg.lr_actor, cfg.lr_critic, cfg.tau
    if cfg.mode == "BicNetOnly":
        return cfg.lr_actor, cfg.lr_actor, 1.0
    return cfg.lr_baseline, cfg.lr_baseline, 1.0


def sample_actions(probs, rng, greedy=False):
    """Row-wise categorical draw (or argmax) from ``probs [m, 5]``."""
    if greedy:
        return np.argmax(probs, axis=-1)
    cdf = np.cumsum(probs.astype(np.float64), axis=-1)
    u = rng.random(len(probs)) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=-1), N_ACTIONS - 1)


def policy_probs(sets, obs) -> np.ndarray:
    """``obs [n, C, F, F]`` -> action probabilities ``[n, 5]``."""
    n = obs.shape[0]
    out = np.empty((n, N_ACTIONS), dtype=np.float64)
    for s in sets:
        logits, _ = s.actor.forward(s.actor_params.values(), obs[s.agent_ids][None].astype(nn.DTYPE))
        out[s.agent_ids] = nn.softmax(logits[0].astype(np.float64))
    return out


def policy_fn(sets):
    """``obs -> probs`` for a roll-out with fixed parameters; independent
    single-agent actors are evaluated together in one stacked pass."""
    if len(sets) > 1 and all(s.n == 1 and not s.actor.use_bicnet for s in sets):
        return StackedActors(sets).probs
    return lambda obs: policy_probs(sets, obs)


def run_episode(world: GridWorld, sets, rng, greedy=False, policy=None) -> Trajectory:
    """Roll out one episode until every agent is done or the step budget ends.

    ``policy(world, obs) -> actions`` replaces the networks (scripted runs).
    """
    n = world.n_agents
    obs_l, act_l, rew_l, live_l, term_l, pos_l = [], [], [], [], [], []
    probs_of = policy_fn(sets) if policy is None else None
    obs = world.observe_all()
    while not world.finished:
        obs_l.append(obs.astype(np.uint8))
        pos_l.append(world.pos.copy())
        if policy is not None:
            acts = np.asarray(policy(world, obs), dtype=np.int64)
        else:
            acts = sample_actions(probs_of(obs), rng, greedy)
        live = ~world.done
        acts = np.where(live, acts, Action.STAY)
        res = world.step(acts)
        act_l.append(acts)
        rew_l.append(res.rewards)
        live_l.append(live)
        term_l.append(live & res.dones)
        obs = world.observe_all()
    obs_l.append(obs.astype(np.uint8))
    pos_l.append(world.pos.copy())
    return Trajectory(
        obs=np.stack(obs_l),
        actions=np.array(act_l, dtype=np.int64).reshape(-1, n),
        rewards=np.array(rew_l, dtype=np.float64).reshape(-1, n),
        live=np.array(live_l, dtype=bool).reshape(-1, n),
        terminal=np.array(term_l, dtype=bool).reshape(-1, n),
        positions=np.stack(pos_l),
        done=world.done.copy(),
    )


def _take(qvec, acts):
    return np.take_along_axis(qvec, np.asarray(acts)[..., None], axis=-1)[..., 0]


def _set_grads(store: nn.ParamStore, grads: dict):
    for name, p in store.entries.items():
        g = grads.get(name)
        if g is None:
            p.grad[...] = 0
        else:
            p.grad[...] = g


@dataclass
class UpdateStats:
    actor_loss: float
    critic_loss: float
    clipped: int = 0


def compute_targets(ms: ModelSet, traj: Trajectory, cfg: RunConfig, rng, feat=None, probs=None):
    """TD targets ``y [T, m]`` for the agents of ``ms``; constants w.r.t. every
    parameter."""
    ids = ms.agent_ids
    T = traj.length
    if feat is None:
        logits, cache = ms.actor.forward(ms.actor_params.values(), traj.obs[:, ids].astype(nn.DTYPE))
        feat, probs = cache["feat"], nn.softmax(logits.astype(np.float64))
    done_after = ~traj.live[:, ids] | traj.terminal[:, ids]
    nxt = sample_actions(probs[1:].reshape(-1, N_ACTIONS), rng).reshape(T, len(ids))
    nxt = np.where(done_after, Action.STAY, nxt)
    nbr_next = neighbor_table(traj.positions[1:, ids], cfg.z)
    qn, _ = ms.critic.forward(ms.target_params.values(), feat[1:], nxt, nbr_next)
    return td_target(traj.rewards[:, ids], cfg.gamma, _take(qn, nxt), traj.terminal[:, ids])


def update_set(ms: ModelSet, traj: Trajectory, cfg: RunConfig, rng) -> UpdateStats:
    lr_a, lr_c, tau = mode_rates(cfg)
    ids = ms.agent_ids
    ap = ms.actor_params.values()
    cp = ms.critic_params.values()
    obs = traj.obs[:, ids].astype(nn.DTYPE)
    acts = traj.actions[:, ids]
    mask = traj.live[:, ids].astype(np.float64)
    T = traj.length

    logits, acache = ms.actor.forward(ap, obs)
    probs = nn.softmax(logits.astype(np.float64))
    feat = acache["feat"]
    y = compute_targets(ms, traj, cfg, rng, feat=feat, probs=probs)

    # critic
    nbr = neighbor_table(traj.positions[:-1, ids], cfg.z)
    qvec, ccache = ms.critic.forward(cp, feat[:-1], acts, nbr)
    q = _take(qvec, acts).astype(np.float64)
    diff = (q - y) * mask
    l_c = float(np.sum(diff ** 2))
    dq = np.zeros_like(qvec)
    np.put_along_axis(dq, acts[..., None], (2 * diff)[..., None].astype(dq.dtype), axis=-1)
    cgrads, dfeat_c = ms.critic.backward(cp, dq, ccache)

    # actor
    weight = y
    if cfg.value_baseline:
        weight = y - np.sum(probs[:-1] * qvec.astype(np.float64), axis=-1)
    logp = np.log(np.take_along_axis(probs[:-1], acts[..., None], axis=-1)[..., 0] + 1e-300)
    l_a = float(-np.sum(mask * logp * weight))
    if not (math.isfinite(l_a) and math.isfinite(l_c)):
        raise NonFiniteLoss(f"actor loss {l_a}, critic loss {l_c}")
    onehot = np.zeros_like(probs[:-1])
    np.put_along_axis(onehot, acts[..., None], 1.0, axis=-1)
    dlogits = np.zeros(logits.shape, dtype=np.float64)
    dlogits[:-1] = -(mask * weight)[..., None] * (onehot - probs[:-1])
    dfeat = None
    if cfg.critic_trains_encoder:
        dfeat = np.zeros_like(feat)
        dfeat[:-1] = dfeat_c
    agrads = ms.actor.backward(ap, dlogits.astype(nn.DTYPE), acache, dfeat)

    clipped = 0
    _set_grads(ms.critic_params, cgrads)
    clipped += nn.clip_grad_norm(ms.critic_params, cfg.grad_clip)[1]
    nn.adam_step(ms.critic_params, lr_c)
    _set_grads(ms.actor_params, agrads)
    clipped += nn.clip_grad_norm(ms.actor_params, cfg.grad_clip)[1]
    nn.adam_step(ms.actor_params, lr_a)
    soft_update(ms.target_params, ms.critic_params, tau)
    if clipped:
        log.debug("gradient norm clipped (%d stores)", clipped)
    return UpdateStats(l_a, l_c, clipped)


def update(learner: Learner, traj: Trajectory) -> tuple[float, float]:
    """One learning step from one episode; returns ``(actor_loss, critic_loss)``."""
    if traj.length == 0:
        raise ValueError("empty trajectory")
    la = lc = 0.0
    for ms in learner.sets:
        st = update_set(ms, traj, learner.config, learner.rng)
        la += st.actor_loss
        lc += st.critic_loss
    return la, lc


def evolution_distribution(returns, temperature=1.0) -> np.ndarray:
    r = np.asarray(returns, dtype=np.float64) / temperature
    return nn.softmax(r)


def mapper_evolution(sets: list, returns, rng, temperature=1.0) -> np.ndarray:
    """Each agent copies the networks of a source agent drawn from a softmax
    over ``returns``; optimiser moments are reset. Returns the sources."""
    probs = evolution_distribution(returns, temperature)
    sources = np.array([int(rng.choice(len(probs), p=probs)) for _ in sets], dtype=np.int64)
    snapshot = [(s.actor_params.copy(), s.critic_params.copy(), s.target_params.copy()) for s in sets]
    for dst, src in zip(sets, sources):
        a, c, t = snapshot[src]
        dst.actor_params = a.copy()
        dst.critic_params = c.copy()
        dst.target_params = t.copy()
        for store in (dst.actor_params, dst.critic_params, dst.target_params):
            store.reset_moments()
    return sources


def episode_seed(seed: int, stream: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, stream, k]).generate_state(1)[0])


def make_world(cfg: RunConfig, grid: GridMap, seed: int) -> GridWorld:
    rc = RewardConfig(cfg.step_penalty, cfg.goal_reward, cfg.collision_penalty, cfg.lam, cfg.gamma)
    return reset(grid, cfg.n_agents, cfg.n_dyn, cfg.init_mode, seed=seed, rewards=rc,
                 max_steps=cfg.max_steps or None)


@dataclass
class EvalResult:
    episodes: int
    success_mean: float | None = None
    success_std: float | None = None
    mean_steps: float | None = None
    mean_reward: float | None = None
    per_episode: list = field(default_factory=list)

    def as_dict(self):
        return {
            "episodes": self.episodes,
            "success_mean": self.success_mean,
            "success_std": self.success_std,
            "mean_steps": self.mean_steps,
            "mean_reward": self.mean_reward,
        }


def evaluate(sets, cfg: RunConfig, grid: GridMap, n_episodes: int, seed: int | None = None,
             policy=None) -> EvalResult:
    """Greedy roll-outs on ``n_episodes`` distinct seeded worlds, no learning."""
    if n_episodes <= 0:
        return EvalResult(0)
    base = cfg.seed if seed is None else seed
    succ, steps, rew = [], [], []
    for k in range(n_episodes):
        world = make_world(cfg, grid, episode_seed(base, 1, k))
        traj = run_episode(world, sets, None, greedy=True, policy=policy)
        succ.append(traj.success_rate)
        steps.append(traj.length)
        rew.append(float(traj.returns.mean()))
    return EvalResult(
        n_episodes,
        float(np.mean(succ)),
        float(np.std(succ)),
        float(np.mean(steps)),
        float(np.mean(rew)),
        succ,
    )


METRIC_FIELDS = ["episode", "mode", "success_rate", "mean_reward", "actor_loss", "critic_loss"]
EVAL_FIELDS = ["episode", "success_mean", "success_std", "mean_steps", "mean_reward"]


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


@dataclass
class TrainResult:
    learner: Learner
    metrics: list
    evals: list
    timing: list

    def metrics_csv(self) -> str:
        return _csv(METRIC_FIELDS, self.metrics)

    def eval_csv(self) -> str:
        return _csv(EVAL_FIELDS, self.evals)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def train(cfg: RunConfig, grid: GridMap, on_eval=None, on_episode=None) -> TrainResult:
    """Train for ``cfg.episodes`` episodes.

    ``on_eval(episode, learner, eval_result)`` runs after every evaluation
    (every ``eval_every`` episodes and at the end); ``on_episode(row)`` after
    every training episode.
    """
    learner = make_learner(cfg)
    metrics, evals, timing = [], [], []
    period_returns = np.zeros(cfg.n_agents)
    t0 = time.perf_counter()
    for ep in range(cfg.episodes):
        world = make_world(cfg, grid, episode_seed(cfg.seed, 0, ep))
        traj = run_episode(world, learner.sets, learner.rng)
        la, lc = update(learner, traj)
        period_returns += traj.returns
        if cfg.mode == "MapperBaseline" and (ep + 1) % cfg.evolution_period == 0:
            src = mapper_evolution(learner.sets, period_returns, learner.rng, cfg.evolution_temperature)
            log.debug("episode %d evolution sources %s", ep + 1, src.tolist())
            period_returns[:] = 0
        row = {
            "episode": ep + 1,
            "mode": cfg.mode,
            "success_rate": traj.success_rate,
            "mean_reward": float(traj.returns.mean()),
            "actor_loss": la,
            "critic_loss": lc,
        }
        metrics.append(row)
        timing.append({"episode": ep + 1, "wall_clock_s": time.perf_counter() - t0})
        if on_episode is not None:
            on_episode(row)
        last = ep + 1 == cfg.episodes
        if (cfg.eval_every > 0 and (ep + 1) % cfg.eval_every == 0) or last:
            res = evaluate(learner.sets, cfg, grid, cfg.eval_episodes)
            evals.append({"episode": ep + 1, **{k: v for k, v in res.as_dict().items() if k != "episodes"}})
            if on_eval is not None:
                on_eval(ep + 1, learner, res)
    return TrainResult(learner, metrics, evals, timing)
