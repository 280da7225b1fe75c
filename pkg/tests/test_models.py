import math

import numpy as np
import pytest

from abmapper import neural as nn
from abmapper.errors import NameMismatch
from abmapper.grid import N_ACTIONS
from abmapper.models import (ActorNet, CriticNet, Dims, build_model_sets, critic_q, neighbor_table,
                             select_neighbors, soft_update)

from oracles import brute_neighbors, straight_line_q

TINY = Dims(conv_channels=2, feature=8, bicnet_hidden=4, embed=6, attn=5, f_hidden=7)


def random_obs(rng, n, dims=TINY):
    return (rng.random((n, dims.in_channels, dims.fov, dims.fov)) < 0.3).astype(np.float32)


def actor(rng, use_bicnet=True, dims=TINY):
    net = ActorNet(dims, use_bicnet)
    return net, net.init_params(nn.ParamStore(), rng)


# actor ----------------------------------------------------------------------------

@pytest.mark.parametrize("n", range(1, 9))
def test_actor_outputs_distributions(n):
    rng = np.random.default_rng(n)
    net, p = actor(rng)
    p["head.W"][...] *= 100  # move away from uniform
    probs = net.probs(p.values(), random_obs(rng, n)[None])
    assert probs.shape == (1, n, N_ACTIONS)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)


def test_actor_communication_probe():
    rng = np.random.default_rng(0)
    net, p = actor(rng)
    p["head.W"][...] *= 100
    obs = random_obs(rng, 4)[None]
    base = net.probs(p.values(), obs)
    for k in range(4):
        pert = obs.copy()
        pert[0, k] = 1.0 - pert[0, k]
        delta = np.abs(net.probs(p.values(), pert) - base)
        others = [i for i in range(4) if i != k]
        assert delta[0, others].max() > 0


def test_actor_without_bicnet_is_per_agent():
    rng = np.random.default_rng(1)
    net, p = actor(rng, use_bicnet=False)
    p["head.W"][...] *= 100
    obs = random_obs(rng, 4)[None]
    base = net.probs(p.values(), obs)
    pert = obs.copy()
    pert[0, 2] = 1.0 - pert[0, 2]
    out = net.probs(p.values(), pert)
    assert np.array_equal(np.delete(out, 2, axis=1), np.delete(base, 2, axis=1))


def test_fresh_actor_is_near_uniform():
    net, p = actor(np.random.default_rng(2), dims=Dims())
    probs = net.probs(p.values(), np.zeros((1, 3, 4, 11, 11), np.float32))
    entropy = -(probs * np.log(probs)).sum(-1)
    assert np.all(entropy >= 0.95 * math.log(5))


# neighbour selection --------------------------------------------------------------

def test_two_agents_pick_each_other():
    assert select_neighbors([(0, 0), (4, 4)], 0, 1) == [1]
    assert select_neighbors([(0, 0), (4, 4)], 1, 1) == [0]


def test_neighbor_example():
    assert set(select_neighbors([(0, 0), (0, 1), (0, 5), (3, 0)], 0, 2)) == {1, 3}


def test_z_is_clamped():
    assert select_neighbors([(0, 0), (1, 1), (2, 2)], 1, 9) == [0, 2]


def test_ties_go_to_lower_id():
    pos = [(2, 2), (2, 3), (1, 2), (3, 2), (2, 1)]
    assert select_neighbors(pos, 0, 2) == [1, 2]


def test_neighbors_match_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(300):
        n = int(rng.integers(2, 12))
        pos = rng.integers(0, 6, size=(n, 2))
        z = int(rng.integers(1, 8))
        table = neighbor_table(pos, z)
        for j in range(n):
            assert table[j].tolist() == brute_neighbors(pos.tolist(), j, z)


# critic ------------------------------------------------------------------------------

def critic_set(rng, n, mode="ABMapper", query_from="state_action", shared=False):
    ms = build_model_sets(mode, n, rng, TINY, shared_critic=shared, query_from=query_from)[0]
    return ms


def features(ms, obs):
    _, cache = ms.actor.forward(ms.actor_params.values(), obs[None])
    return cache["feat"][0]


@pytest.mark.parametrize("query_from", ["state_action", "state"])
@pytest.mark.parametrize("shared", [False, True])
def test_critic_matches_straight_line(query_from, shared):
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = 3
        ms = critic_set(rng, n, query_from=query_from, shared=shared)
        obs = random_obs(rng, n)
        acts = rng.integers(0, 5, n)
        pos = rng.integers(0, 5, size=(n, 2))
        feat = features(ms, obs)
        params = ms.critic_params.values()
        for j in range(n):
            for z in (1, 2):
                q, x, alpha = critic_q(ms, obs, acts, pos, j, z)
                ref_q, ref_x, ref_alpha = straight_line_q(feat, acts, pos.tolist(), j, z, params,
                                                          shared=shared, query_from=query_from)
                np.testing.assert_allclose(q, ref_q, atol=1e-5)
                np.testing.assert_allclose(x, ref_x, atol=1e-5)
                np.testing.assert_allclose(alpha, ref_alpha, atol=1e-6)
                assert abs(alpha.sum() - 1) <= 1e-6


def test_single_neighbor_gets_all_weight():
    rng = np.random.default_rng(5)
    ms = critic_set(rng, 3)
    obs, acts, pos = random_obs(rng, 3), np.array([0, 1, 2]), np.array([[0, 0], [0, 1], [4, 4]])
    _, x, alpha = critic_q(ms, obs, acts, pos, 0, 1)
    assert alpha.tolist() == [1.0]
    feat = features(ms, obs)
    p = ms.critic_params.values()
    gin = np.concatenate([feat[1], np.eye(5)[1]])
    v1 = np.maximum(gin @ p["g.W"][1] + p["g.b"][1], 0) @ p["att.V"]
    np.testing.assert_allclose(x, v1, atol=1e-6)


def test_identical_neighbors_share_weight():
    rng = np.random.default_rng(6)
    ms = critic_set(rng, 3, shared=True)
    obs = random_obs(rng, 3)
    obs[2] = obs[1]
    acts = np.array([0, 3, 3])
    _, _, alpha = critic_q(ms, obs, acts, np.array([[2, 2], [2, 3], [1, 2]]), 0, 2)
    assert alpha[0] == pytest.approx(alpha[1], abs=1e-7)


def test_critic_is_local():
    rng = np.random.default_rng(7)
    ms = critic_set(rng, 5)
    obs, acts = random_obs(rng, 5), rng.integers(0, 5, 5)
    pos = np.array([[0, 0], [0, 1], [1, 0], [6, 6], [7, 7]])
    base, _, _ = critic_q(ms, obs, acts, pos, 0, 2)
    for far in (3, 4):
        pert_obs = obs.copy()
        pert_obs[far] = 1 - pert_obs[far]
        pert_acts = acts.copy()
        pert_acts[far] = (acts[far] + 1) % 5
        q, _, _ = critic_q(ms, pert_obs, pert_acts, pos, 0, 2)
        assert np.array_equal(q, base)
    near = obs.copy()
    near[1] = 1 - near[1]
    q, _, _ = critic_q(ms, near, acts, pos, 0, 2)
    assert not np.array_equal(q, base)


def test_swapping_identical_neighbors_keeps_q():
    rng = np.random.default_rng(8)
    ms = critic_set(rng, 4, shared=True)
    obs = random_obs(rng, 4)
    obs[2] = obs[1]
    acts = np.array([1, 4, 4, 0])
    pos = np.array([[3, 3], [3, 4], [2, 3], [0, 0]])
    q, _, _ = critic_q(ms, obs, acts, pos, 0, 2)
    q2, _, _ = critic_q(ms, obs, acts, pos[[0, 2, 1, 3]], 0, 2)
    np.testing.assert_allclose(q, q2, atol=1e-6)


def test_independent_critic_ignores_others():
    rng = np.random.default_rng(9)
    ms = critic_set(rng, 3, mode="BicNetOnly")
    assert ms.critic.attention is False
    p = ms.critic_params.values()
    feat = rng.normal(size=(1, 3, TINY.feature)).astype(np.float32)
    acts = np.array([[0, 1, 2]])
    base, _ = ms.critic.forward(p, feat, acts, np.array([[[1], [0], [1]]]))
    feat2 = feat.copy()
    feat2[0, 1:] += 1
    q, _ = ms.critic.forward(p, feat2, np.array([[0, 4, 4]]), None)
    assert np.array_equal(q[0, 0], base[0, 0])


def test_per_agent_encoder_count():
    c = CriticNet(6, TINY).init_params(nn.ParamStore(), np.random.default_rng(0))
    assert c["g.W"].shape[0] == 6 and c["att.Wq"].shape == (TINY.embed, TINY.attn)


def test_query_from_is_validated():
    with pytest.raises(ValueError):
        CriticNet(2, TINY, query_from="key")


# soft update ----------------------------------------------------------------------------

def _pair(t, s):
    a, b = nn.ParamStore(), nn.ParamStore()
    a.add("w", np.asarray(t, np.float32))
    b.add("w", np.asarray(s, np.float32))
    return a, b


def test_soft_update_examples():
    t, s = _pair([0.0, 3.0], [2.0, -1.0])
    soft_update(t, s, 1.0)
    assert t["w"].tolist() == [2.0, -1.0]
    t, s = _pair([0.0, 3.0], [2.0, -1.0])
    soft_update(t, s, 0.0)
    assert t["w"].tolist() == [0.0, 3.0]
    t, s = _pair([0.0], [2.0])
    soft_update(t, s, 0.5)
    assert t["w"].tolist() == [1.0]


def test_soft_update_blend():
    rng = np.random.default_rng(0)
    t, s = _pair(rng.normal(size=20), rng.normal(size=20))
    expect = 0.001 * s["w"].astype(np.float64) + 0.999 * t["w"].astype(np.float64)
    soft_update(t, s, 0.001)
    np.testing.assert_allclose(t["w"], expect, rtol=1e-6, atol=1e-7)


def test_soft_update_name_mismatch():
    a = nn.ParamStore()
    a.add("w", np.zeros(2))
    b = nn.ParamStore()
    b.add("v", np.zeros(2))
    with pytest.raises(NameMismatch):
        soft_update(a, b, 0.1)


# modes -------------------------------------------------------------------------------------

def test_mode_wiring():
    rng = np.random.default_rng(0)
    wiring = {}
    for mode in ("ABMapper", "AttentionOnly", "BicNetOnly", "MapperBaseline"):
        sets = build_model_sets(mode, 3, rng, TINY)
        wiring[mode] = (len(sets), sets[0].actor.use_bicnet, sets[0].critic.attention)
    assert wiring == {
        "ABMapper": (1, True, True),
        "AttentionOnly": (1, False, True),
        "BicNetOnly": (1, True, False),
        "MapperBaseline": (3, False, False),
    }
    with pytest.raises(ValueError):
        build_model_sets("Mapper2", 3, rng, TINY)


def test_end_to_end_gradchecks():
    from abmapper.gradcheck import run_block
    for name in ("actor_bicnet", "actor_plain", "critic_attention", "critic_state_query", "critic_independent"):
        res = run_block(name, trials=5, seed=3)
        assert res.passed, res.line()
