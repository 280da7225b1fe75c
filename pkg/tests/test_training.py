import math

import numpy as np
import pytest

from abmapper import neural as nn
from abmapper.config import RunConfig
from abmapper.environment import GridWorld, RewardConfig
from abmapper.errors import LengthMismatch
from abmapper.grid import GridMap, action_between
from abmapper.models import Dims, build_model_sets, neighbor_table
from abmapper.planning import astar, reference_path
from abmapper.scenarios import get_bundle
from abmapper.training import (Learner, actor_loss, compute_targets, critic_loss, evaluate,
                               evolution_distribution, make_learner, make_world, mapper_evolution,
                               policy_fn, policy_probs, run_episode, td_target, train, update,
                               update_set)

from oracles import manhattan

TINY = dict(conv_channels=2, feature=8, bicnet_hidden=4, embed=6, attn=5, f_hidden=7)


def empty(h, w):
    return GridMap(w, h, np.zeros((h, w), dtype=bool))


def small_cfg(**kw):
    base = dict(scenario="mini-II", n_agents=2, n_dyn=0, init_mode="uniform", max_steps=6, z=1,
                episodes=3, eval_every=0, eval_episodes=2, **TINY)
    base.update(kw)
    return RunConfig(**base)


def rollout(cfg, grid, seed=0):
    learner = make_learner(cfg)
    traj = run_episode(make_world(cfg, grid, seed), learner.sets, learner.rng)
    return learner, traj


def scripted(world, obs):
    """Step along a fresh shortest path for every agent that is still out."""
    acts = []
    for i in range(world.n_agents):
        if world.done[i]:
            acts.append(0)
            continue
        path = astar(world.grid, tuple(world.pos[i]), tuple(world.goals[i]))
        acts.append(int(action_between(path[0], path[1])))
    return acts


# losses ----------------------------------------------------------------------------

def test_td_target_examples():
    assert td_target(1, 0.99, 2, 0) == pytest.approx(2.98)
    assert td_target(1.5, 0.99, 7, 1) == 1.5
    assert td_target(-0.3, 0.0, 9, 0) == -0.3


def test_actor_loss_examples():
    assert actor_loss([math.log(0.5)], [2]) == pytest.approx(1.3863, abs=1e-4)
    assert actor_loss(np.log([0.2, 0.7]), [0, 0]) == 0
    assert actor_loss([math.log(0.5), math.log(0.25)], [1, -1]) == pytest.approx(-0.6931, abs=1e-4)
    with pytest.raises(LengthMismatch):
        actor_loss([0.0, 0.0], [1.0])


def test_critic_loss_examples():
    assert critic_loss([1, 2], [1, 1]) == 1.0
    assert critic_loss([0.3, -2], [0.3, -2]) == 0.0
    rng = np.random.default_rng(0)
    q, y = rng.normal(size=10), rng.normal(size=10)
    assert critic_loss(q, y) == pytest.approx(sum((a - b) ** 2 for a, b in zip(q, y)), abs=1e-12)
    with pytest.raises(LengthMismatch):
        critic_loss([1.0], [1.0, 2.0])


# roll-outs ---------------------------------------------------------------------------

def test_max_steps_one():
    _, traj = rollout(small_cfg(max_steps=1), empty(5, 5))
    assert traj.length == 1 and traj.obs.shape[0] == 2


def test_greedy_rollouts_repeat():
    cfg = small_cfg(n_dyn=2, max_steps=12)
    grid = empty(6, 6)
    learner = make_learner(cfg)
    runs = [run_episode(make_world(cfg, grid, 5), learner.sets, None, greedy=True) for _ in range(2)]
    assert np.array_equal(runs[0].actions, runs[1].actions)
    assert np.array_equal(runs[0].positions, runs[1].positions)


def test_scripted_optimal_play():
    grid = empty(8, 8)
    starts, goals = [(0, 0), (7, 7)], [(0, 7), (7, 0)]
    refs = [reference_path(grid, s, g) for s, g in zip(starts, goals)]
    world = GridWorld(grid, starts, goals, [], refs, RewardConfig(), 64, np.random.default_rng(0))
    traj = run_episode(world, None, None, policy=scripted)
    assert traj.done.all()
    assert traj.length == max(manhattan(s, g) for s, g in zip(starts, goals))
    for i, (s, g) in enumerate(zip(starts, goals)):
        assert traj.terminal[:, i].argmax() + 1 == manhattan(s, g)


def test_done_agents_have_no_records():
    grid = empty(4, 4)
    starts, goals = [(0, 0), (3, 0)], [(0, 1), (3, 3)]
    refs = [reference_path(grid, s, g) for s, g in zip(starts, goals)]
    world = GridWorld(grid, starts, goals, [], refs, RewardConfig(), 20, np.random.default_rng(0))
    traj = run_episode(world, None, None, policy=scripted)
    assert traj.live[:, 0].tolist() == [True, False, False]
    assert np.all(traj.actions[1:, 0] == 0)


# update ------------------------------------------------------------------------------

def test_critic_step_reduces_loss():
    cfg = small_cfg(gamma=0.0, step_penalty=0.0, collision_penalty=0.0, lam=0.0, goal_reward=0.0,
                    lr_critic=1e-3, max_steps=8)
    learner, traj = rollout(cfg, empty(6, 6))
    ms = learner.sets[0]

    def loss():
        _, acache = ms.actor.forward(ms.actor_params.values(), traj.obs.astype(nn.DTYPE))
        nbr = neighbor_table(traj.positions[:-1], cfg.z)
        qvec, _ = ms.critic.forward(ms.critic_params.values(), acache["feat"][:-1], traj.actions, nbr)
        q = np.take_along_axis(qvec, traj.actions[..., None], -1)[..., 0]
        return critic_loss(q * traj.live, 0 * q)

    before = loss()
    _, lc = update(learner, traj)
    assert lc == pytest.approx(before, rel=1e-5)
    assert loss() < before


def test_zero_tau_keeps_target():
    cfg = small_cfg(tau=0.0)
    learner, traj = rollout(cfg, empty(6, 6))
    before = {k: v.copy() for k, v in learner.sets[0].target_params.values().items()}
    update(learner, traj)
    after = learner.sets[0].target_params.values()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert not all(np.array_equal(before[k], learner.sets[0].critic_params[k]) for k in before)


def test_zero_learning_rate_is_bit_identical():
    for mode in ("ABMapper", "MapperBaseline"):
        cfg = small_cfg(mode=mode)
        cfg.lr_actor = cfg.lr_critic = cfg.lr_baseline = 0.0
        learner, traj = rollout(cfg, empty(6, 6))
        snap = [{k: v.tobytes() for s in ms.stores().values() for k, v in s.values().items()} for ms in learner.sets]
        update(learner, traj)
        now = [{k: v.tobytes() for s in ms.stores().values() for k, v in s.values().items()} for ms in learner.sets]
        assert snap == now


def _two_step_batch(**kw):
    cfg = small_cfg(**{"max_steps": 2, "grad_clip": 1e9, "tau": 0.0, "critic_trains_encoder": False, **kw})
    cfg.lr_actor = cfg.lr_critic = 0.0
    learner, traj = rollout(cfg, empty(6, 6), seed=3)
    assert traj.length == 2 and traj.actions.shape[1] == 2
    ms = learner.sets[0]
    ms.actor_params["head.W"][...] *= 50
    return cfg, ms, traj


def _frozen_actor_loss(ms, traj, y, params):
    logits, _ = ms.actor.forward(params, traj.obs.astype(np.float64))
    logp = nn.log_softmax(logits[:-1])
    lp = np.take_along_axis(logp, traj.actions[..., None], -1)[..., 0]
    return -np.sum(traj.live * lp * y)


def _check_coords(ms, name, grad, loss_at, coords, eps=1e-4):
    base = {k: v.astype(np.float64) for k, v in ms.actor_params.values().items()}
    for idx in coords:
        hi = {k: v.copy() for k, v in base.items()}
        lo = {k: v.copy() for k, v in base.items()}
        hi[name][idx] += eps
        lo[name][idx] -= eps
        num = (loss_at(hi) - loss_at(lo)) / (2 * eps)
        assert abs(num - grad[idx]) <= 1e-3 * max(1.0, abs(num)), (name, idx, num, grad[idx])


def test_actor_gradient_matches_finite_differences():
    cfg, ms, traj = _two_step_batch()
    y = compute_targets(ms, traj, cfg, np.random.default_rng(11))
    update_set(ms, traj, cfg, np.random.default_rng(11))
    rng = np.random.default_rng(0)
    for name in ("head.W", "rnn.fwd.Wx", "fc1.W", "conv3.K", "conv0.K"):
        grad = ms.actor_params.grad(name).astype(np.float64)
        coords = [tuple(rng.integers(0, s) for s in grad.shape) for _ in range(6)]
        _check_coords(ms, name, grad, lambda p: _frozen_actor_loss(ms, traj, y, p), coords)


def test_encoder_gradient_includes_critic_loss():
    cfg, ms, traj = _two_step_batch(critic_trains_encoder=True)
    y = compute_targets(ms, traj, cfg, np.random.default_rng(11))
    update_set(ms, traj, cfg, np.random.default_rng(11))
    cp = {k: v.astype(np.float64) for k, v in ms.critic_params.values().items()}
    nbr = neighbor_table(traj.positions[:-1], cfg.z)

    def joint(p):
        _, cache = ms.actor.forward(p, traj.obs.astype(np.float64))
        qvec, _ = ms.critic.forward(cp, cache["feat"][:-1], traj.actions, nbr)
        q = np.take_along_axis(qvec, traj.actions[..., None], -1)[..., 0]
        return _frozen_actor_loss(ms, traj, y, p) + np.sum(traj.live * (q - y) ** 2)

    rng = np.random.default_rng(1)
    for name in ("fc1.W", "conv2.K"):
        grad = ms.actor_params.grad(name).astype(np.float64)
        coords = [tuple(rng.integers(0, s) for s in grad.shape) for _ in range(6)]
        _check_coords(ms, name, grad, joint, coords)
    # the head only sees the actor loss
    grad = ms.actor_params.grad("head.W").astype(np.float64)
    _check_coords(ms, "head.W", grad, lambda p: _frozen_actor_loss(ms, traj, y, p), [(0, 0), (3, 2), (7, 4)])


def test_targets_carry_no_gradient():
    """Shifting the target critic moves y, and the actor gradient follows
    the frozen-y loss at the new y exactly; the target store itself is
    never stepped."""
    cfg, ms, traj = _two_step_batch()
    ms.target_params["f1.b"][...] += 3.0
    tgt = {k: v.copy() for k, v in ms.target_params.values().items()}
    y = compute_targets(ms, traj, cfg, np.random.default_rng(4))
    update_set(ms, traj, cfg, np.random.default_rng(4))
    grad = ms.actor_params.grad("head.W").astype(np.float64)
    coords = [(i, a) for i in range(grad.shape[0]) for a in range(5)][:20]
    _check_coords(ms, "head.W", grad, lambda p: _frozen_actor_loss(ms, traj, y, p), coords)
    assert all(np.array_equal(tgt[k], ms.target_params[k]) for k in tgt)
    assert all(not ms.target_params.grad(k).any() for k in tgt)


def test_targets_use_target_network_and_terminal_flag():
    cfg, ms, traj = _two_step_batch()
    y0 = compute_targets(ms, traj, cfg, np.random.default_rng(4))
    ms.target_params["f1.b"][...] += 1.0
    y1 = compute_targets(ms, traj, cfg, np.random.default_rng(4))
    expect = cfg.gamma * (~traj.terminal).astype(float)
    np.testing.assert_allclose(y1 - y0, expect, atol=1e-5)


# evolution ---------------------------------------------------------------------------

def test_evolution_distribution_examples():
    np.testing.assert_allclose(evolution_distribution([2.0, 2.0, 2.0, 2.0]), 0.25)
    assert evolution_distribution([0.0, 100.0, 1.0])[1] == pytest.approx(1.0, abs=1e-12)
    e = math.e
    np.testing.assert_allclose(evolution_distribution([1.0, 0.0]), [e / (e + 1), 1 / (e + 1)], atol=1e-12)


def test_mapper_evolution_copies_and_resets():
    rng = np.random.default_rng(0)
    sets = build_model_sets("MapperBaseline", 3, rng, Dims(**TINY))
    sets[1].actor_params.entries["head.b"].m[...] = 1.0
    sets[1].actor_params.entries["head.b"].t = 4
    src = mapper_evolution(sets, [0.0, 500.0, 0.0], np.random.default_rng(1))
    assert src.tolist() == [1, 1, 1]
    for s in sets:
        assert np.array_equal(s.actor_params["head.W"], sets[1].actor_params["head.W"])
    sets[0].actor_params["head.W"][...] += 1
    assert not np.array_equal(sets[0].actor_params["head.W"], sets[2].actor_params["head.W"])
    moments = sets[1].actor_params.entries["head.b"]
    assert not moments.m.any() and moments.t == 0
    a = mapper_evolution(build_model_sets("MapperBaseline", 3, np.random.default_rng(0), Dims(**TINY)),
                         [1.0, 2.0, 0.5], np.random.default_rng(9))
    b = mapper_evolution(build_model_sets("MapperBaseline", 3, np.random.default_rng(0), Dims(**TINY)),
                         [1.0, 2.0, 0.5], np.random.default_rng(9))
    assert a.tolist() == b.tolist()


# evaluation ----------------------------------------------------------------------------

def test_oracle_policy_scores_one():
    # a single agent, so the shortest-path script never meets a blocker
    cfg = small_cfg(max_steps=0, n_agents=1)
    res = evaluate(None, cfg, empty(8, 8), 10, policy=scripted)
    assert res.success_mean == 1.0
    assert res.episodes == 10


def test_random_policy_on_crowded_map_scores_low():
    bundle = get_bundle("II")
    cfg = RunConfig(scenario="II", n_agents=bundle.n_agents, n_dyn=bundle.n_dyn, init_mode="clustered",
                    z=bundle.z, **TINY)
    rng = np.random.default_rng(0)
    res = evaluate(None, cfg, bundle.grid(), 5, policy=lambda w, o: rng.integers(0, 5, w.n_agents))
    assert res.success_mean < 0.2


def test_zero_episode_evaluation():
    res = evaluate(None, small_cfg(), empty(4, 4), 0)
    assert res.as_dict() == {"episodes": 0, "success_mean": None, "success_std": None,
                             "mean_steps": None, "mean_reward": None}


# mode isolation --------------------------------------------------------------------------

def test_attention_only_actor_is_per_agent():
    learner = make_learner(small_cfg(mode="AttentionOnly", n_agents=4))
    ms = learner.sets[0]
    ms.actor_params["head.W"][...] *= 100
    rng = np.random.default_rng(0)
    obs = (rng.random((1, 4, 4, 11, 11)) < 0.3).astype(np.float32)
    base = ms.actor.probs(ms.actor_params.values(), obs)
    for k in range(4):
        pert = obs.copy()
        pert[0, k] = 1 - pert[0, k]
        out = ms.actor.probs(ms.actor_params.values(), pert)
        assert np.array_equal(np.delete(out, k, 1), np.delete(base, k, 1))


def test_bicnet_only_critic_is_per_agent():
    learner = make_learner(small_cfg(mode="BicNetOnly", n_agents=4, z=3))
    ms = learner.sets[0]
    rng = np.random.default_rng(1)
    feat = rng.normal(size=(1, 4, TINY["feature"])).astype(np.float32)
    acts = rng.integers(0, 5, (1, 4))
    nbr = neighbor_table(rng.integers(0, 5, (1, 4, 2)), 3)
    base, _ = ms.critic.forward(ms.critic_params.values(), feat, acts, nbr)
    for k in range(4):
        f2, a2 = feat.copy(), acts.copy()
        f2[0, k] += 1.0
        a2[0, k] = (a2[0, k] + 1) % 5
        q, _ = ms.critic.forward(ms.critic_params.values(), f2, a2, nbr)
        assert np.array_equal(np.delete(q, k, 1), np.delete(base, k, 1))


# reproducibility ---------------------------------------------------------------------------

def test_training_is_reproducible():
    cfg = small_cfg(episodes=6, eval_every=3, n_dyn=1, mode="ABMapper")
    grid = empty(6, 6)
    a, b = train(cfg, grid), train(cfg, grid)
    assert a.metrics_csv() == b.metrics_csv()
    assert a.eval_csv() == b.eval_csv()
    assert len(a.evals) == 2
    assert a.metrics_csv().splitlines()[0] == "episode,mode,success_rate,mean_reward,actor_loss,critic_loss"


def test_mapper_baseline_trains_and_evolves():
    cfg = small_cfg(mode="MapperBaseline", episodes=4, evolution_period=2, n_agents=3)
    res = train(cfg, empty(6, 6))
    assert len(res.learner.sets) == 3 and len(res.metrics) == 4
    assert isinstance(res.learner, Learner)


@pytest.mark.parametrize("backend", ["numpy", "torch"])
def test_stacked_policy_matches_per_set_forward(backend):
    if backend == "torch":
        pytest.importorskip("torch")
    cfg = small_cfg(mode="MapperBaseline", n_agents=4, n_dyn=0)
    sets = make_learner(cfg).sets
    world = make_world(cfg, get_bundle("mini-II").grid(), 0)
    obs = world.observe_all()
    old = nn.set_conv_backend(backend)
    try:
        got = policy_fn(sets)(obs)
        want = policy_probs(sets, obs)
    finally:
        nn.set_conv_backend(old)
    np.testing.assert_allclose(got, want, atol=1e-6)
    assert policy_fn(sets).__self__.ids == [0, 1, 2, 3]
