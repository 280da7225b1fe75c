"""Finite-difference audit of every layer and of both networks.

Each block draws random shapes and inputs per trial and checks the gradient
of a random linear read-out ``sum(w * output)`` of the block.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import neural as nn
from .grid import N_ACTIONS
from .models import ActorNet, CriticNet, Dims, neighbor_table, relu_signature


@dataclass
class BlockResult:
    name: str
    trials: int
    worst: float
    failures: int
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<18} trials={self.trials} worst_rel_err={self.worst:.2e} "
                f"kink_skips={self.skipped} time={self.seconds:.1f}s")


def _readout(rng, shape, dtype):
    return rng.normal(size=shape).astype(dtype)


def _dense(rng, dtype):
    b, i, o = rng.integers(1, 6, size=3)
    x, W, bias = rng.normal(size=(b, i)), rng.normal(size=(i, o)), rng.normal(size=o)
    w = _readout(rng, (b, o), dtype)

    def fn(a):
        y = nn.dense_forward(a["x"], a["W"], a["b"])
        dx, dW, db = nn.dense_backward(w, a["x"], a["W"])
        return float(np.sum(y * w)), {"x": dx, "W": dW, "b": db}

    return fn, {"x": x, "W": W, "b": bias}


def _agent_dense(rng, dtype):
    b, n, i, o = rng.integers(1, 5, size=4)
    x, W, bias = rng.normal(size=(b, n, i)), rng.normal(size=(n, i, o)), rng.normal(size=(n, o))
    w = _readout(rng, (b, n, o), dtype)

    def fn(a):
        y = nn.agent_dense_forward(a["x"], a["W"], a["b"])
        dx, dW, db = nn.agent_dense_backward(w, a["x"], a["W"])
        return float(np.sum(y * w)), {"x": dx, "W": dW, "b": db}

    return fn, {"x": x, "W": W, "b": bias}


def _conv(rng, dtype, backend=None):
    b, c, o = rng.integers(1, 4, size=3)
    h, wd = rng.integers(3, 7, size=2)
    x, K, bias = rng.normal(size=(b, c, h, wd)), rng.normal(size=(o, c, 3, 3)), rng.normal(size=o)
    w = _readout(rng, (b, o, h, wd), dtype)

    def fn(a):
        prev = nn.set_conv_backend(backend) if backend else None
        try:
            y, cache = nn.conv_forward(a["x"], a["K"], a["b"])
            dx, dK, db = nn.conv_backward(w, cache, a["K"])
        finally:
            if prev:
                nn.set_conv_backend(prev)
        return float(np.sum(y * w)), {"x": dx, "K": dK, "b": db}

    return fn, {"x": x, "K": K, "b": bias}


def _relu(rng, dtype):
    shape = tuple(rng.integers(1, 6, size=2))
    w = _readout(rng, shape, dtype)

    def fn(a):
        y = nn.relu_forward(a["x"])
        return float(np.sum(y * w)), {"x": nn.relu_backward(w, y)}, np.packbits(y > 0).tobytes()

    return fn, {"x": rng.normal(size=shape)}


def _softmax(rng, dtype):
    shape = (int(rng.integers(1, 5)), int(rng.integers(2, 7)))
    w = _readout(rng, shape, dtype)

    def fn(a):
        p = nn.softmax(a["s"])
        return float(np.sum(p * w)), {"s": nn.softmax_backward(w, p)}

    return fn, {"s": 2 * rng.normal(size=shape)}


def _gru(rng, dtype):
    b, n = rng.integers(1, 4, size=2)
    d, h = rng.integers(2, 6, size=2)
    seq = rng.normal(size=(b, n, d))
    pf = nn.gru_params(rng, d, h, dtype=np.float64)
    pb = nn.gru_params(rng, d, h, dtype=np.float64)
    arrays = {"seq": seq, **{f"f.{k}": v for k, v in pf.items()}, **{f"b.{k}": v for k, v in pb.items()}}
    for k in arrays:
        if k.endswith(".b"):
            arrays[k] = 0.5 * rng.normal(size=arrays[k].shape)
    w = _readout(rng, (b, n, 2 * h), dtype)

    def fn(a):
        fwd = {k: a[f"f.{k}"] for k in nn.RNN_KEYS}
        bwd = {k: a[f"b.{k}"] for k in nn.RNN_KEYS}
        out, cache = nn.birecurrent_forward(a["seq"], fwd, bwd)
        dseq, gf, gb = nn.birecurrent_backward(w, cache, fwd, bwd)
        g = {"seq": dseq, **{f"f.{k}": v for k, v in gf.items()}, **{f"b.{k}": v for k, v in gb.items()}}
        return float(np.sum(out * w)), g

    return fn, arrays


def _attention(rng, dtype):
    b, z = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    dk, dv = rng.integers(1, 6, size=2)
    q, k, v = rng.normal(size=(b, dk)), rng.normal(size=(b, z, dk)), rng.normal(size=(b, z, dv))
    wm = _readout(rng, (b, dv), dtype)
    ww = _readout(rng, (b, z), dtype)

    def fn(a):
        weights, mix = nn.scaled_attention(a["q"], a["k"], a["v"])
        dq, dkeys, dvals = nn.scaled_attention_backward(wm, a["q"], a["k"], a["v"], weights, ww)
        return float(np.sum(mix * wm) + np.sum(weights * ww)), {"q": dq, "k": dkeys, "v": dvals}

    return fn, {"q": q, "k": k, "v": v}


def _small_dims(rng) -> Dims:
    c, f, h, e, k, fh = (int(v) for v in rng.integers(2, 6, size=6))
    return Dims(conv_channels=c, feature=2 * f, bicnet_hidden=h, embed=2 * e, attn=k, f_hidden=2 * fh,
                fov=int(rng.choice([3, 5])))


def _actor(use_bicnet):
    def make(rng, dtype):
        dims = _small_dims(rng)
        b, n = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        net = ActorNet(dims, use_bicnet=use_bicnet)
        params = net.init_params(nn.ParamStore(), rng).values()
        # a larger head makes the check sensitive to every layer
        params["head.W"] = params["head.W"] * 100
        obs = (rng.random((b, n, dims.in_channels, dims.fov, dims.fov)) < 0.4).astype(dtype)
        w = _readout(rng, (b, n, N_ACTIONS), dtype)

        def fn(a):
            logits, cache = net.forward(a, obs)
            return float(np.sum(logits * w)), net.backward(a, w, cache), relu_signature(cache)

        return fn, params

    return make


def _critic(attention, query_from="state_action"):
    def make(rng, dtype):
        dims = _small_dims(rng)
        b, n = int(rng.integers(1, 3)), int(rng.integers(2, 5))
        z = int(rng.integers(1, n))
        net = CriticNet(n, dims, attention=attention, query_from=query_from)
        params = net.init_params(nn.ParamStore(), rng).values()
        feat = rng.normal(size=(b, n, dims.feature))
        acts = rng.integers(0, N_ACTIONS, size=(b, n))
        nbr = neighbor_table(rng.integers(0, 6, size=(b, n, 2)), z)
        w = _readout(rng, (b, n, N_ACTIONS), dtype)

        def fn(a):
            q, cache = net.forward(a, a["__feat"], acts, nbr)
            g, dfeat = net.backward(a, w, cache)
            g["__feat"] = dfeat
            return float(np.sum(q * w)), g, relu_signature(cache)

        return fn, {**params, "__feat": feat}

    return make


BLOCKS = {
    "dense": _dense,
    "agent_dense": _agent_dense,
    "conv3x3": _conv,
    "conv3x3_numpy": lambda rng, dtype: _conv(rng, dtype, "numpy"),
    "relu": _relu,
    "softmax": _softmax,
    "birecurrent": _gru,
    "attention": _attention,
    "actor_bicnet": _actor(True),
    "actor_plain": _actor(False),
    "critic_attention": _critic(True),
    "critic_state_query": _critic(True, "state"),
    "critic_independent": _critic(False),
}
NETWORK_BLOCKS = ("actor_bicnet", "actor_plain", "critic_attention", "critic_state_query", "critic_independent")


def run_block(name, trials=50, seed=0, tol=1e-3, eps=1e-3, analytic_dtype=np.float32,
              max_coords=6) -> BlockResult:
    """Analytic gradients in ``analytic_dtype`` against float64 central
    differences; a trial fails if any tensor's relative error reaches ``tol``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(name), sum(map(ord, name))]))
    make = BLOCKS[name]
    worst, failures, skipped = 0.0, 0, 0
    t0 = time.perf_counter()
    for _ in range(trials):
        fn, arrays = make(rng, analytic_dtype)
        rep = nn.grad_check(fn, arrays, eps=eps, tol=tol, name=name, max_coords=max_coords, rng=rng,
                            analytic_dtype=analytic_dtype)
        worst = max(worst, rep.max_rel_error)
        failures += not rep.passed
        skipped += rep.skipped
    return BlockResult(name, trials, worst, failures, skipped, time.perf_counter() - t0)


def run_suite(trials=50, seed=0, tol=1e-3, eps=1e-3, analytic_dtype=np.float32, blocks=None, report=None):
    """Run every block; ``report(result)`` is called as each finishes."""
    results = []
    for name in blocks or BLOCKS:
        res = run_block(name, trials, seed, tol, eps, analytic_dtype)
        results.append(res)
        if report is not None:
            report(res)
    return results
