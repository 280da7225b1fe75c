"""Actor and critic networks.

The actor encodes each agent's observation with a shared CNN (four 3x3 conv
layers and two dense layers), optionally runs the per-agent features through
a bidirectional recurrent layer in agent-id order so that every agent's
policy sees every other agent, and maps the result to a 5-way softmax.

The critic scores agent ``j`` as ``f_j(h_j(o_j) ++ x_j)`` where ``x_j`` is an
attention mix over the state-action encodings ``e_i = g_i(o_i, a_i)`` of the
``z`` nearest other agents. It consumes the actor's CNN features, so the
encoder can be trained by both losses (see ``ActorNet.backward``).

Networks are stateless descriptions: ``forward`` and ``backward`` take the
parameter mapping explicitly, so the same code runs on a live
:class:`ParamStore`, on the target copy, or on float64 copies while
gradient checking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import neural as nn
from .environment import FOV, N_CHANNELS
from .errors import NameMismatch
from .grid import N_ACTIONS


@dataclass(frozen=True)
class Dims:
    conv_channels: int = 8
    feature: int = 128
    bicnet_hidden: int = 64
    embed: int = 64
    attn: int = 32
    f_hidden: int = 128
    fov: int = FOV
    in_channels: int = N_CHANNELS


def _he(rng, shape, fan_in):
    lim = math.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, shape).astype(nn.DTYPE)


def _glorot(rng, shape, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape).astype(nn.DTYPE)


def relu_signature(cache) -> bytes:
    return b"".join(np.packbits(y > 0).tobytes() for y in cache["relu"])


class ActorNet:
    N_CONV = 4

    def __init__(self, dims: Dims = Dims(), use_bicnet: bool = True):
        self.dims = dims
        self.use_bicnet = use_bicnet

    def init_params(self, store: nn.ParamStore, rng) -> nn.ParamStore:
        d = self.dims
        c_in = d.in_channels
        for i in range(self.N_CONV):
            store.add(f"conv{i}.K", _he(rng, (d.conv_channels, c_in, 3, 3), c_in * 9))
            store.add(f"conv{i}.b", np.zeros(d.conv_channels))
            c_in = d.conv_channels
        flat = d.conv_channels * d.fov * d.fov
        store.add("fc0.W", _he(rng, (flat, d.feature), flat))
        store.add("fc0.b", np.zeros(d.feature))
        store.add("fc1.W", _he(rng, (d.feature, d.feature), d.feature))
        store.add("fc1.b", np.zeros(d.feature))
        head_in = d.feature
        if self.use_bicnet:
            for side in ("fwd", "bwd"):
                for k, v in nn.gru_params(rng, d.feature, d.bicnet_hidden).items():
                    store.add(f"rnn.{side}.{k}", v)
            head_in = 2 * d.bicnet_hidden
        # small head keeps the initial policy close to uniform
        store.add("head.W", 0.01 * _glorot(rng, (head_in, N_ACTIONS), head_in, N_ACTIONS))
        store.add("head.b", np.zeros(N_ACTIONS))
        return store

    # CNN encoder ------------------------------------------------------------
    def encode(self, p, obs):
        """``obs [M, C, F, F]`` -> features ``[M, feature]``."""
        relus, convs = [], []
        x = obs.astype(p["conv0.K"].dtype)
        for i in range(self.N_CONV):
            y, c = nn.conv_forward(x, p[f"conv{i}.K"], p[f"conv{i}.b"])
            x = nn.relu_forward(y)
            relus.append(x)
            convs.append(c)
        flat = x.reshape(len(x), -1)
        h0 = nn.relu_forward(nn.dense_forward(flat, p["fc0.W"], p["fc0.b"]))
        h1 = nn.relu_forward(nn.dense_forward(h0, p["fc1.W"], p["fc1.b"]))
        cache = {"relu": relus + [h0, h1], "conv": convs, "flat": flat}
        return h1, cache

    def encode_backward(self, p, dfeat, cache, grads):
        h0, h1 = cache["relu"][-2:]
        d = nn.relu_backward(dfeat, h1)
        d, grads["fc1.W"], grads["fc1.b"] = nn.dense_backward(d, h0, p["fc1.W"])
        d = nn.relu_backward(d, h0)
        d, grads["fc0.W"], grads["fc0.b"] = nn.dense_backward(d, cache["flat"], p["fc0.W"])
        d = d.reshape(cache["relu"][self.N_CONV - 1].shape)
        for i in reversed(range(self.N_CONV)):
            d = nn.relu_backward(d, cache["relu"][i])
            d, grads[f"conv{i}.K"], grads[f"conv{i}.b"] = nn.conv_backward(
                d, cache["conv"][i], p[f"conv{i}.K"], need_dx=i > 0
            )
        return grads

    # full policy ------------------------------------------------------------
    def forward(self, p, obs):
        """``obs [B, n, C, F, F]`` -> ``(logits [B, n, 5], cache)``.

        ``cache["feat"]`` holds the CNN features ``[B, n, feature]``.
        """
        B, n = obs.shape[:2]
        feat, enc = self.encode(p, obs.reshape((B * n,) + obs.shape[2:]))
        feat = feat.reshape(B, n, -1)
        cache = {"enc": enc, "feat": feat, "relu": enc["relu"]}
        z = feat
        if self.use_bicnet:
            fwd = {k: p[f"rnn.fwd.{k}"] for k in nn.RNN_KEYS}
            bwd = {k: p[f"rnn.bwd.{k}"] for k in nn.RNN_KEYS}
            z, cache["rnn"] = nn.birecurrent_forward(feat, fwd, bwd)
        cache["head_in"] = z
        logits = nn.dense_forward(z, p["head.W"], p["head.b"])
        return logits, cache

    def backward(self, p, dlogits, cache, dfeat=None):
        """Gradients of the actor parameters. ``dfeat [B, n, feature]`` is an
        extra upstream gradient on the CNN features (e.g. from the critic)."""
        grads: dict = {}
        dz, grads["head.W"], grads["head.b"] = nn.dense_backward(dlogits, cache["head_in"], p["head.W"])
        if self.use_bicnet:
            fwd = {k: p[f"rnn.fwd.{k}"] for k in nn.RNN_KEYS}
            bwd = {k: p[f"rnn.bwd.{k}"] for k in nn.RNN_KEYS}
            dz, gf, gb = nn.birecurrent_backward(dz, cache["rnn"], fwd, bwd)
            for k in nn.RNN_KEYS:
                grads[f"rnn.fwd.{k}"] = gf[k]
                grads[f"rnn.bwd.{k}"] = gb[k]
        if dfeat is not None:
            dz = dz + dfeat
        B, n = dz.shape[:2]
        self.encode_backward(p, dz.reshape(B * n, -1), cache["enc"], grads)
        return grads

    def probs(self, p, obs):
        logits, _ = self.forward(p, obs)
        return nn.softmax(logits)


class StackedActors:
    """Inference-only view of several single-agent actors without BicNet
    (the independent-agent setting), evaluated in one batched pass.

    The parameters are copied at construction, so build a fresh view after
    every update.
    """

    def __init__(self, sets):
        actors = [s.actor for s in sets]
        if any(a.use_bicnet for a in actors) or any(s.n != 1 for s in sets):
            raise ValueError("stacking needs single-agent actors without BicNet")
        self.ids = [s.agent_ids[0] for s in sets]
        values = [s.actor_params.values() for s in sets]
        self.p = {k: np.stack([v[k] for v in values]) for k in values[0]}

    def probs(self, obs):
        """``obs [n, C, F, F]`` -> ``[n, 5]`` float64 probabilities."""
        p = self.p
        x = obs[self.ids][:, None].astype(p["conv0.K"].dtype)
        for i in range(ActorNet.N_CONV):
            x = nn.relu_forward(nn.conv_stack_forward(x, p[f"conv{i}.K"], p[f"conv{i}.b"]))
        h = x.reshape(len(self.ids), 1, -1)
        h = nn.relu_forward(h @ p["fc0.W"] + p["fc0.b"][:, None])
        h = nn.relu_forward(h @ p["fc1.W"] + p["fc1.b"][:, None])
        logits = h @ p["head.W"] + p["head.b"][:, None]
        out = np.empty((obs.shape[0], N_ACTIONS))
        out[self.ids] = nn.softmax(logits[:, 0].astype(np.float64))
        return out


def neighbor_table(positions, z):
    """Indices of the ``min(z, n-1)`` nearest other agents for every agent.

    ``positions`` is ``[n, 2]`` or ``[B, n, 2]``; distance is Manhattan, ties
    go to the lower id. Returns ``[n, z']`` or ``[B, n, z']``.
    """
    pos = np.asarray(positions, dtype=np.int64)
    single = pos.ndim == 2
    if single:
        pos = pos[None]
    B, n, _ = pos.shape
    zz = max(0, min(int(z), n - 1))
    dist = np.abs(pos[:, :, None, :] - pos[:, None, :, :]).sum(-1)
    dist[:, np.arange(n), np.arange(n)] = np.iinfo(np.int64).max
    order = np.argsort(dist, axis=-1, kind="stable")[..., :zz]
    return order[0] if single else order


def select_neighbors(positions, j: int, z: int) -> list[int]:
    return neighbor_table(positions, z)[j].tolist()


class CriticNet:
    """Neighbour-attention critic.

    ``attention=False`` gives the independent critic used by the ablations
    without attention: ``x_j`` is then agent ``j``'s own value projection, so
    ``Q_j`` depends on ``(o_j, a_j)`` alone. ``query_from="state"`` derives
    the query from ``h_j(o_j)`` instead of the state-action encoding.
    """

    def __init__(self, n_agents: int, dims: Dims = Dims(), attention: bool = True, shared: bool = False,
                 query_from: str = "state_action"):
        if query_from not in ("state_action", "state"):
            raise ValueError(f"query_from must be 'state_action' or 'state', got {query_from!r}")
        self.n = n_agents
        self.dims = dims
        self.attention = attention
        self.shared = shared
        self.query_from = query_from

    def _agent_shape(self, *shape):
        return shape if self.shared else (self.n,) + shape

    def init_params(self, store: nn.ParamStore, rng) -> nn.ParamStore:
        d = self.dims
        ga = d.feature + N_ACTIONS
        store.add("g.W", _he(rng, self._agent_shape(ga, d.embed), ga))
        store.add("g.b", np.zeros(self._agent_shape(d.embed)))
        store.add("h.W", _he(rng, self._agent_shape(d.feature, d.embed), d.feature))
        store.add("h.b", np.zeros(self._agent_shape(d.embed)))
        if self.attention:
            store.add("att.Wq", _glorot(rng, (d.embed, d.attn), d.embed, d.attn))
            store.add("att.Wk", _glorot(rng, (d.embed, d.attn), d.embed, d.attn))
        store.add("att.V", _glorot(rng, (d.embed, d.attn), d.embed, d.attn))
        fi = d.embed + d.attn
        store.add("f0.W", _he(rng, self._agent_shape(fi, d.f_hidden), fi))
        store.add("f0.b", np.zeros(self._agent_shape(d.f_hidden)))
        store.add("f1.W", _glorot(rng, self._agent_shape(d.f_hidden, N_ACTIONS), d.f_hidden, N_ACTIONS))
        store.add("f1.b", np.zeros(self._agent_shape(N_ACTIONS)))
        return store

    def forward(self, p, feat, acts, nbr=None):
        """Per-action values for every agent.

        ``feat [B, n, feature]``, ``acts [B, n]`` ints, ``nbr [B, n, z']``
        neighbour indices (ignored without attention). Returns
        ``(qvec [B, n, 5], cache)``; ``cache["alpha"]`` is ``[B, n, z']``.
        """
        B, n, _ = feat.shape
        dt = p["g.W"].dtype
        onehot = np.zeros((B, n, N_ACTIONS), dtype=dt)
        np.put_along_axis(onehot, np.asarray(acts)[..., None], 1.0, axis=-1)
        gin = np.concatenate([feat.astype(dt, copy=False), onehot], axis=-1)
        e = nn.relu_forward(nn.agent_dense_forward(gin, p["g.W"], p["g.b"]))
        hs = nn.relu_forward(nn.agent_dense_forward(feat, p["h.W"], p["h.b"]))
        v = e @ p["att.V"]
        cache = {"gin": gin, "e": e, "hs": hs, "v": v, "feat": feat}
        if self.attention and nbr is not None and np.asarray(nbr).shape[-1] > 0:
            nbr = np.asarray(nbr)
            qsrc = e if self.query_from == "state_action" else hs
            q = qsrc @ p["att.Wq"]
            k = e @ p["att.Wk"]
            bidx = np.arange(B)[:, None, None]
            keys = k[bidx, nbr]
            vals = v[bidx, nbr]
            alpha, x = nn.scaled_attention(q, keys, vals)
            cache.update(nbr=nbr, q=q, keys=keys, vals=vals, alpha=alpha, qsrc=qsrc)
        elif self.attention:
            x = np.zeros((B, n, self.dims.attn), dtype=dt)
            cache["alpha"] = np.zeros((B, n, 0), dtype=dt)
        else:
            x = v
        cache["x"] = x
        fin = np.concatenate([hs, x], axis=-1)
        f0 = nn.relu_forward(nn.agent_dense_forward(fin, p["f0.W"], p["f0.b"]))
        qvec = nn.agent_dense_forward(f0, p["f1.W"], p["f1.b"])
        cache.update(fin=fin, f0=f0, relu=[e, hs, f0])
        return qvec, cache

    def backward(self, p, dq, cache):
        """Returns ``(grads, dfeat)``."""
        g: dict = {}
        d = self.dims
        df0, g["f1.W"], g["f1.b"] = nn.agent_dense_backward(dq, cache["f0"], p["f1.W"])
        df0 = nn.relu_backward(df0, cache["f0"])
        dfin, g["f0.W"], g["f0.b"] = nn.agent_dense_backward(df0, cache["fin"], p["f0.W"])
        dhs = dfin[..., :d.embed]
        dx = dfin[..., d.embed:]
        e = cache["e"]
        de = np.zeros_like(e)
        if "alpha" in cache and "q" in cache:
            dq_, dkeys, dvals = nn.scaled_attention_backward(dx, cache["q"], cache["keys"], cache["vals"], cache["alpha"])
            B, n = e.shape[:2]
            nbr = cache["nbr"]
            dk = np.zeros((B, n, d.attn), dtype=e.dtype)
            dv = np.zeros((B, n, d.attn), dtype=e.dtype)
            bidx = np.broadcast_to(np.arange(B)[:, None, None], nbr.shape)
            np.add.at(dk, (bidx, nbr), dkeys)
            np.add.at(dv, (bidx, nbr), dvals)
            g["att.Wq"] = cache["qsrc"].reshape(-1, d.embed).T @ dq_.reshape(-1, d.attn)
            g["att.Wk"] = e.reshape(-1, d.embed).T @ dk.reshape(-1, d.attn)
            g["att.V"] = e.reshape(-1, d.embed).T @ dv.reshape(-1, d.attn)
            dsrc = dq_ @ p["att.Wq"].T
            if self.query_from == "state_action":
                de += dsrc
            else:
                dhs = dhs + dsrc
            de += dk @ p["att.Wk"].T + dv @ p["att.V"].T
        elif self.attention:
            g["att.Wq"] = np.zeros_like(p["att.Wq"])
            g["att.Wk"] = np.zeros_like(p["att.Wk"])
            g["att.V"] = np.zeros_like(p["att.V"])
        else:
            g["att.V"] = e.reshape(-1, d.embed).T @ dx.reshape(-1, d.attn)
            de += dx @ p["att.V"].T
        dhs = nn.relu_backward(dhs, cache["hs"])
        dfeat, g["h.W"], g["h.b"] = nn.agent_dense_backward(dhs, cache["feat"], p["h.W"])
        de = nn.relu_backward(de, e)
        dgin, g["g.W"], g["g.b"] = nn.agent_dense_backward(de, cache["gin"], p["g.W"])
        dfeat = dfeat + dgin[..., :d.feature]
        return g, dfeat


def soft_update(target: nn.ParamStore, source: nn.ParamStore, tau: float):
    """``target <- tau * source + (1 - tau) * target`` element-wise.

    Written as ``target + tau * (source - target)`` so that ``tau=0`` and
    identical stores leave the target bit-for-bit unchanged; ``tau=1`` copies.
    """
    if list(target.entries) != list(source.entries):
        raise NameMismatch("target and source parameter names differ")
    for name, p in target.entries.items():
        s = source.entries[name].value
        if s.shape != p.value.shape:
            raise NameMismatch(f"{name}: shape {s.shape} vs {p.value.shape}")
        if tau == 1:
            p.value[...] = s
        elif tau != 0:
            p.value += nn.DTYPE(tau) * (s - p.value)


MODES = ("ABMapper", "AttentionOnly", "BicNetOnly", "MapperBaseline")


@dataclass
class ModelSet:
    """One actor/critic pair plus the critic's target copy, serving the agents
    in ``agent_ids`` (all of them, except in the independent Mapper setting)."""

    actor: ActorNet
    critic: CriticNet
    actor_params: nn.ParamStore
    critic_params: nn.ParamStore
    target_params: nn.ParamStore
    agent_ids: list

    @property
    def n(self):
        return len(self.agent_ids)

    def stores(self):
        return {"actor": self.actor_params, "critic": self.critic_params, "target": self.target_params}


def build_model_sets(mode: str, n_agents: int, rng, dims: Dims = Dims(), shared_critic=None,
                     query_from="state_action") -> list[ModelSet]:
    """Networks for one of the four experiment modes.

    * ``ABMapper``: BicNet actor, attention critic.
    * ``AttentionOnly``: per-agent (shared-weight) actor without BicNet,
      attention critic.
    * ``BicNetOnly``: BicNet actor, independent critics.
    * ``MapperBaseline``: one fully independent actor/critic per agent.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if shared_critic is None:
        shared_critic = n_agents > 64
    use_bicnet = mode in ("ABMapper", "BicNetOnly")
    attention = mode in ("ABMapper", "AttentionOnly")
    groups = [[i] for i in range(n_agents)] if mode == "MapperBaseline" else [list(range(n_agents))]
    sets = []
    for ids in groups:
        actor = ActorNet(dims, use_bicnet=use_bicnet)
        critic = CriticNet(len(ids), dims, attention=attention, shared=shared_critic, query_from=query_from)
        ap = actor.init_params(nn.ParamStore(), rng)
        cp = critic.init_params(nn.ParamStore(), rng)
        sets.append(ModelSet(actor, critic, ap, cp, cp.copy(), ids))
    return sets


def critic_q(ms: ModelSet, obs, acts, positions, j: int, z: int, params=None):
    """Single-state convenience wrapper: ``(qvec [5], x_j, alpha)`` for agent ``j``.

    ``obs [n, C, F, F]``, ``acts [n]``, ``positions [n, 2]``.
    """
    ap = ms.actor_params.values()
    cp = params if params is not None else ms.critic_params.values()
    _, acache = ms.actor.forward(ap, np.asarray(obs)[None])
    nbr = neighbor_table(positions, z)[None]
    qvec, cache = ms.critic.forward(cp, acache["feat"], np.asarray(acts)[None], nbr)
    alpha = cache.get("alpha", np.zeros((1, len(acts), 0)))
    return qvec[0, j], cache["x"][0, j], alpha[0, j]
