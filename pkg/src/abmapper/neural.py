"""Small numpy layer library with hand-written backward passes.

Every forward function is a pure function of its arguments; the matching
backward takes the upstream gradient plus whatever the forward returned as a
cache. Arrays keep the dtype they come in with (float32 in training, float64
when the gradient checker promotes them).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:  # optional: torch supplies faster 3x3 conv kernels
    import torch
    from torch.nn import grad as _torch_grad
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None
from .errors import CorruptManifest, MissingCheckpoint, NameMismatch, ShapeMismatch

DTYPE = np.float32


def _check(cond, msg):
    if not cond:
        raise ShapeMismatch(msg)


# dense ----------------------------------------------------------------------

def dense_forward(x, W, b):
    _check(W.ndim == 2 and x.shape[-1] == W.shape[0], f"dense: x {x.shape} vs W {W.shape}")
    _check(b.shape == (W.shape[1],), f"dense: b {b.shape} vs W {W.shape}")
    return x @ W + b


def dense_backward(dy, x, W):
    I, O = W.shape
    dx = dy @ W.T
    dW = x.reshape(-1, I).T @ dy.reshape(-1, O)
    db = dy.reshape(-1, O).sum(axis=0)
    return dx, dW, db


def agent_dense_forward(x, W, b):
    """Dense layer with one weight matrix per agent.

    ``x`` is ``[B, n, I]``; ``W`` is ``[n, I, O]`` (or ``[I, O]`` to share one
    matrix across agents) and ``b`` is ``[n, O]`` (or ``[O]``).
    """
    if W.ndim == 2:
        return dense_forward(x, W, b)
    _check(x.ndim == 3 and W.shape[0] == x.shape[1] and W.shape[1] == x.shape[2],
           f"agent dense: x {x.shape} vs W {W.shape}")
    return np.matmul(x.transpose(1, 0, 2), W).transpose(1, 0, 2) + b


def agent_dense_backward(dy, x, W):
    if W.ndim == 2:
        return dense_backward(dy, x, W)
    xt = x.transpose(1, 0, 2)
    dyt = dy.transpose(1, 0, 2)
    dx = np.matmul(dyt, W.transpose(0, 2, 1)).transpose(1, 0, 2)
    dW = np.matmul(xt.transpose(0, 2, 1), dyt)
    db = dy.sum(axis=0)
    return dx, dW, db


# 3x3 convolution, stride 1, zero padding 1 ------------------------------------
#
# The public pair works on [B, C, H, W]; the *_nhwc pair keeps channels last,
# which is what the actor uses to avoid a transpose per layer.

def _kmat(K):
    """[O, C, 3, 3] -> [(kh, kw, C), O]."""
    O, C = K.shape[:2]
    return K.transpose(2, 3, 1, 0).reshape(9 * C, O)


def conv_forward_nhwc(x, K, b):
    """``x [B, H, W, C]`` -> ``(y [B, H, W, O], cols)``."""
    _check(x.ndim == 4 and K.ndim == 4 and K.shape[1] == x.shape[3] and K.shape[2:] == (3, 3),
           f"conv: x {x.shape} vs K {K.shape}")
    _check(b.shape == (K.shape[0],), f"conv: b {b.shape} vs K {K.shape}")
    B, H, W, C = x.shape
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((B, H, W, 9, C), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j] = xp[:, i:i + H, j:j + W]
    cols = cols.reshape(B * H * W, 9 * C)
    y = cols @ _kmat(K) + b
    return y.reshape(B, H, W, -1), cols


def conv_backward_nhwc(dy, cols, K, x_shape, need_dx=True):
    B, H, W, C = x_shape
    O = K.shape[0]
    dy2 = dy.reshape(B * H * W, O)
    dK = (cols.T @ dy2).reshape(3, 3, C, O).transpose(3, 2, 0, 1)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dK, db
    dcols = (dy2 @ _kmat(K).T).reshape(B, H, W, 9, C)
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + H, j:j + W] += dcols[:, :, :, 3 * i + j]
    return dxp[:, 1:-1, 1:-1], dK, db


_CONV_BACKEND = "torch" if torch is not None else "numpy"


def conv_backend() -> str:
    return _CONV_BACKEND


def set_conv_backend(name: str) -> str:
    """Select ``"numpy"`` or ``"torch"`` kernels; returns the previous choice."""
    global _CONV_BACKEND
    if name not in ("numpy", "torch"):
        raise ValueError(f"unknown conv backend {name!r}")
    if name == "torch" and torch is None:
        raise RuntimeError("torch is not installed")
    prev, _CONV_BACKEND = _CONV_BACKEND, name
    return prev


def conv_forward(x, K, b):
    """``x [B, C, H, W]`` -> ``(y [B, O, H, W], cache)``."""
    _check(x.ndim == 4 and K.ndim == 4 and K.shape[1] == x.shape[1] and K.shape[2:] == (3, 3),
           f"conv: x {x.shape} vs K {K.shape}")
    _check(b.shape == (K.shape[0],), f"conv: b {b.shape} vs K {K.shape}")
    if _CONV_BACKEND == "torch":
        xt = torch.from_numpy(np.ascontiguousarray(x))
        y = torch.nn.functional.conv2d(xt, torch.from_numpy(np.ascontiguousarray(K, dtype=x.dtype)), padding=1).numpy()
        y += b[:, None, None]
        return y, ("torch", xt)
    y, cols = conv_forward_nhwc(x.transpose(0, 2, 3, 1), K, b)
    return y.transpose(0, 3, 1, 2), ("numpy", cols, x.shape)


def conv_backward(dy, cache, K, need_dx=True):
    """Returns ``(dx or None, dK, db)``."""
    if cache[0] == "torch":
        xt = cache[1]
        dt = xt.numpy().dtype
        dyt = torch.from_numpy(np.ascontiguousarray(dy, dtype=dt))
        Kt = torch.from_numpy(np.ascontiguousarray(K, dtype=dt))
        dK = _torch_grad.conv2d_weight(xt, K.shape, dyt, padding=1).numpy()
        db = dy.sum(axis=(0, 2, 3))
        dx = _torch_grad.conv2d_input(xt.shape, Kt, dyt, padding=1).numpy() if need_dx else None
        return dx, dK, db
    _, cols, (B, C, H, W) = cache
    dx, dK, db = conv_backward_nhwc(np.ascontiguousarray(dy.transpose(0, 2, 3, 1)), cols, K, (B, H, W, C), need_dx)
    return (None if dx is None else dx.transpose(0, 3, 1, 2)), dK, db


def conv_stack_forward(x, K, b):
    """Forward-only convolution of ``S`` independent layers at once.

    ``x [S, B, C, H, W]``, ``K [S, O, C, 3, 3]``, ``b [S, O]`` ->
    ``y [S, B, O, H, W]``. The torch backend runs one grouped convolution.
    """
    S, B, C, H, W = x.shape
    _check(K.ndim == 5 and K.shape[0] == S and K.shape[2] == C and K.shape[3:] == (3, 3),
           f"conv stack: x {x.shape} vs K {K.shape}")
    O = K.shape[1]
    if _CONV_BACKEND == "torch":
        xt = torch.from_numpy(np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4).reshape(B, S * C, H, W)))
        Kt = torch.from_numpy(np.ascontiguousarray(K.reshape(S * O, C, 3, 3), dtype=x.dtype))
        y = torch.nn.functional.conv2d(xt, Kt, padding=1, groups=S).numpy()
        y = y.reshape(B, S, O, H, W).transpose(1, 0, 2, 3, 4) + b[:, None, :, None, None]
        return y
    return np.stack([conv_forward(x[i], K[i], b[i])[0] for i in range(S)])


# nonlinearities ---------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, y):
    return dy * (y > 0)


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1)


def softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(s, axis=-1):
    shifted = s - s.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_backward(dp, p, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


# bidirectional gated recurrence over the agent axis ---------------------------

RNN_KEYS = ("Wx", "Uh", "b")


def gru_params(rng, in_dim, hidden, dtype=DTYPE):
    lim_x = math.sqrt(6.0 / (in_dim + hidden))
    lim_h = math.sqrt(6.0 / (2 * hidden))
    return {
        "Wx": rng.uniform(-lim_x, lim_x, (in_dim, 3 * hidden)).astype(dtype),
        "Uh": rng.uniform(-lim_h, lim_h, (hidden, 3 * hidden)).astype(dtype),
        "b": np.zeros(3 * hidden, dtype=dtype),
    }


def _gru_run(seq, Wx, Uh, b):
    """Left-to-right gated recurrence. ``seq`` is ``[B, N, D]``."""
    B, N, _ = seq.shape
    H = Uh.shape[0]
    xproj = seq @ Wx + b  # B,N,3H
    h = np.zeros((B, H), dtype=seq.dtype)
    out = np.empty((B, N, H), dtype=seq.dtype)
    hs, zs, rs, ns = [], [], [], []
    Uzr = Uh[:, :2 * H]
    Un = Uh[:, 2 * H:]
    for t in range(N):
        hs.append(h)
        zr = sigmoid(xproj[:, t, :2 * H] + h @ Uzr)
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(xproj[:, t, 2 * H:] + (r * h) @ Un)
        h = n + z * (h - n)
        out[:, t] = h
        zs.append(z)
        rs.append(r)
        ns.append(n)
    return out, (hs, zs, rs, ns)


def _gru_back(dout, seq, Wx, Uh, cache):
    hs, zs, rs, ns = cache
    B, N, _ = seq.shape
    H = Uh.shape[0]
    Uz, Ur, Un = Uh[:, :H], Uh[:, H:2 * H], Uh[:, 2 * H:]
    dpre = np.zeros((B, N, 3 * H), dtype=dout.dtype)
    dUh = np.zeros_like(Uh)
    dh_next = np.zeros((B, H), dtype=dout.dtype)
    for t in reversed(range(N)):
        h, z, r, n = hs[t], zs[t], rs[t], ns[t]
        dh = dout[:, t] + dh_next
        dn = dh * (1 - z)
        dz = dh * (h - n)
        dh_prev = dh * z
        dn_pre = dn * (1 - n * n)
        drh = dn_pre @ Un.T
        dr = drh * h
        dh_prev += drh * r
        dz_pre = dz * z * (1 - z)
        dr_pre = dr * r * (1 - r)
        dh_prev += dz_pre @ Uz.T + dr_pre @ Ur.T
        dUh[:, :H] += h.T @ dz_pre
        dUh[:, H:2 * H] += h.T @ dr_pre
        dUh[:, 2 * H:] += (r * h).T @ dn_pre
        dpre[:, t, :H] = dz_pre
        dpre[:, t, H:2 * H] = dr_pre
        dpre[:, t, 2 * H:] = dn_pre
        dh_next = dh_prev
    D = seq.shape[2]
    dWx = seq.reshape(-1, D).T @ dpre.reshape(-1, 3 * H)
    db = dpre.reshape(-1, 3 * H).sum(axis=0)
    dseq = dpre @ Wx.T
    return dseq, {"Wx": dWx, "Uh": dUh, "b": db}


def birecurrent_forward(seq, fwd, bwd):
    """Run a gated recurrent cell both ways along axis -2 of ``seq``.

    ``seq`` is ``[N, D]`` or ``[B, N, D]``; ``fwd``/``bwd`` are parameter
    dicts (``Wx``, ``Uh``, ``b``). Output position ``t`` is the forward state
    after ``seq[:t+1]`` concatenated with the backward state after
    ``seq[t:]``.
    """
    single = seq.ndim == 2
    s = seq[None] if single else seq
    _check(s.ndim == 3 and s.shape[1] >= 1, f"birecurrent: seq {seq.shape}")
    for p in (fwd, bwd):
        _check(p["Wx"].shape[0] == s.shape[2], f"birecurrent: seq {seq.shape} vs Wx {p['Wx'].shape}")
    of, cf = _gru_run(s, fwd["Wx"], fwd["Uh"], fwd["b"])
    rev = s[:, ::-1]
    ob, cb = _gru_run(rev, bwd["Wx"], bwd["Uh"], bwd["b"])
    out = np.concatenate([of, ob[:, ::-1]], axis=-1)
    cache = (s, rev, cf, cb, single)
    return (out[0] if single else out), cache


def birecurrent_backward(dout, cache, fwd, bwd):
    s, rev, cf, cb, single = cache
    d = dout[None] if single else dout
    H = fwd["Uh"].shape[0]
    dsf, gf = _gru_back(d[..., :H], s, fwd["Wx"], fwd["Uh"], cf)
    dsb, gb = _gru_back(d[:, ::-1, H:], rev, bwd["Wx"], bwd["Uh"], cb)
    dseq = dsf + dsb[:, ::-1]
    return (dseq[0] if single else dseq), gf, gb


# scaled dot-product attention --------------------------------------------------

def scaled_attention(q, keys, values):
    """Softmax attention of one query over ``z`` keys (leading dims batch).

    ``q`` ``[..., dk]``, ``keys`` ``[..., z, dk]``, ``values`` ``[..., z, dv]``;
    returns ``(weights [..., z], mix [..., dv])``.
    """
    _check(keys.ndim >= 2 and keys.shape[-2] >= 1, f"attention: keys {keys.shape}")
    _check(q.shape[-1] == keys.shape[-1], f"attention: q {q.shape} vs keys {keys.shape}")
    _check(values.shape[:-1] == keys.shape[:-1], f"attention: keys {keys.shape} vs values {values.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.einsum("...d,...zd->...z", q, keys) * scale
    w = softmax(scores)
    mix = np.einsum("...z,...zd->...d", w, values)
    return w, mix


def scaled_attention_backward(dmix, q, keys, values, weights, dweights=None):
    scale = 1.0 / math.sqrt(q.shape[-1])
    dw = np.einsum("...d,...zd->...z", dmix, values)
    if dweights is not None:
        dw = dw + dweights
    dvalues = weights[..., None] * dmix[..., None, :]
    dscores = softmax_backward(dw, weights) * scale
    dq = np.einsum("...z,...zd->...d", dscores, keys)
    dkeys = dscores[..., None] * q[..., None, :]
    return dq, dkeys, dvalues


# parameters, optimiser, checkpoints ---------------------------------------------

@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class ParamStore:
    """Ordered name -> parameter map with Adam moments."""

    entries: dict = field(default_factory=dict)

    def add(self, name, value):
        if name in self.entries:
            raise NameMismatch(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=DTYPE)
        z = np.zeros_like(value)
        self.entries[name] = Param(value, z.copy(), z.copy(), z)
        return value

    def __getitem__(self, name):
        return self.entries[name].value

    def __contains__(self, name):
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    def names(self, prefix=""):
        return [k for k in self.entries if k.startswith(prefix)]

    def grad(self, name):
        return self.entries[name].grad

    def accumulate(self, name, g):
        p = self.entries[name]
        if g.shape != p.grad.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs {p.grad.shape}")
        p.grad += g

    def zero_grad(self):
        for p in self.entries.values():
            p.grad[...] = 0

    def values(self):
        return {k: p.value for k, p in self.entries.items()}

    def set_values(self, values: dict):
        if list(values) != list(self.entries):
            raise NameMismatch("parameter names differ")
        for k, v in values.items():
            p = self.entries[k]
            if p.value.shape != v.shape:
                raise ShapeMismatch(f"{k}: {v.shape} vs {p.value.shape}")
            p.value[...] = v

    def copy(self):
        out = ParamStore()
        for k, p in self.entries.items():
            out.entries[k] = Param(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy(), p.t)
        return out

    def reset_moments(self):
        for p in self.entries.values():
            p.m[...] = 0
            p.v[...] = 0
            p.t = 0

    def size(self):
        return sum(p.value.size for p in self.entries.values())


def clip_grad_norm(store: ParamStore, max_norm: float, names=None) -> tuple[float, bool]:
    names = list(store.entries) if names is None else names
    total = math.sqrt(sum(float(np.sum(store.grad(n).astype(np.float64) ** 2)) for n in names))
    if not math.isfinite(total):
        return total, False
    if total > max_norm:
        s = DTYPE(max_norm / (total + 1e-6))
        for n in names:
            store.grad(n)[...] *= s
        return total, True
    return total, False


def adam_step(store: ParamStore, lr, beta1=0.9, beta2=0.999, eps=1e-8, names=None):
    """One bias-corrected adaptive-moment update, in place."""
    for name in (store.entries if names is None else names):
        p = store.entries[name]
        p.t += 1
        g = p.grad
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * g * g
        mhat = p.m / (1 - beta1 ** p.t)
        vhat = p.v / (1 - beta2 ** p.t)
        p.value -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype)


MANIFEST_MAGIC = "abmapper-checkpoint 1"


def save_checkpoint(path, stores: dict, meta: dict | None = None) -> Path:
    """Write ``<path>`` (text manifest) and ``<path>.bin`` (little-endian float32).

    ``stores`` maps a prefix to a :class:`ParamStore`; parameter names in the
    manifest are ``prefix/name``.
    """
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    lines = [MANIFEST_MAGIC, f"blob {blob_path.name}"]
    for k, v in (meta or {}).items():
        v = str(v)
        if "\n" in v or "=" in str(k):
            raise ValueError(f"meta entry {k!r} not representable")
        lines.append(f"meta {k}={v}")
    chunks = []
    offset = 0
    for prefix, store in stores.items():
        for name, p in store.entries.items():
            data = np.ascontiguousarray(p.value, dtype="<f4").tobytes()
            shape = ",".join(str(d) for d in p.value.shape) or "-"
            lines.append(f"param {prefix}/{name} {shape} {offset} {len(data)}")
            chunks.append(data)
            offset += len(data)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_checkpoint`: ``(stores, meta)``."""
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise CorruptManifest(f"{path}: bad header")
    meta: dict = {}
    stores: dict = {}
    blob = None
    for ln, line in enumerate(lines[1:], start=2):
        kind, _, rest = line.partition(" ")
        if kind == "blob":
            bp = path.with_name(rest)
            if not bp.exists():
                raise MissingCheckpoint(str(bp))
            blob = bp.read_bytes()
        elif kind == "meta":
            k, sep, v = rest.partition("=")
            if not sep:
                raise CorruptManifest(f"{path}:{ln}: bad meta line")
            meta[k] = v
        elif kind == "param":
            try:
                full, shape_s, off_s, len_s = rest.split(" ")
                shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
                off, length = int(off_s), int(len_s)
            except ValueError as exc:
                raise CorruptManifest(f"{path}:{ln}: bad param line") from exc
            if blob is None or off + length > len(blob) or length != 4 * int(np.prod(shape)):
                raise CorruptManifest(f"{path}:{ln}: {full} out of range")
            prefix, _, name = full.partition("/")
            arr = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=off).reshape(shape)
            stores.setdefault(prefix, ParamStore()).add(name, arr.astype(DTYPE))
        else:
            raise CorruptManifest(f"{path}:{ln}: unknown record {kind!r}")
    return stores, meta


# finite-difference gradient checking ---------------------------------------------

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    errors: dict
    passed: bool
    skipped: int = 0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.skipped} kink-straddling coords skipped)" if self.skipped else ""
        return f"{status} {self.name}: max rel err {self.max_rel_error:.2e}{extra}"


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-6)
    return float(np.linalg.norm(a - n) / denom)


def grad_check(fn, arrays: dict, eps=1e-3, tol=1e-3, name="block", max_coords=None, rng=None,
               dtype=np.float64, analytic_dtype=None) -> GradCheckReport:
    """Compare the analytic gradients of a scalar function with central
    differences.

    ``fn(arrays)`` returns ``(loss, grads)`` or ``(loss, grads, signature)``
    where ``grads`` has an entry for every key of ``arrays``. A signature
    (e.g. the bytes of every ReLU mask) marks the piecewise-smooth region;
    coordinates whose ``+eps`` and ``-eps`` evaluations land in different
    regions are not differentiable across the stencil and are skipped.
    Differences are taken in ``dtype``. With ``analytic_dtype`` (e.g.
    float32) the analytic gradients come from a pass in that precision, at
    the same point rounded to it. With ``max_coords`` only that many
    randomly chosen coordinates per array are perturbed. The error per array
    is ``|a - n| / (|a| + |n|)`` in the 2-norm over the checked coordinates.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if analytic_dtype is not None:
        low = {k: np.array(v, dtype=analytic_dtype) for k, v in arrays.items()}
        grads = fn(low)[1]
        arrays = {k: v.astype(dtype) for k, v in low.items()}
    else:
        arrays = {k: np.array(v, dtype=dtype) for k, v in arrays.items()}

    def call():
        out = fn(arrays)
        return (out[0], out[1], out[2] if len(out) > 2 else None)

    if analytic_dtype is None:
        grads = call()[1]
    errors = {}
    skipped = 0
    for key, arr in arrays.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        keep, numeric = [], []
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp, _, sp = call()
            flat[i] = old - eps
            lm, _, sm = call()
            flat[i] = old
            if sp is not None and sp != sm:
                skipped += 1
                continue
            keep.append(i)
            numeric.append((float(lp) - float(lm)) / (2 * eps))
        if not keep:
            continue
        analytic = np.asarray(grads[key]).reshape(-1)[keep]
        errors[key] = rel_error(analytic, numeric)
    worst = max(errors.values()) if errors else 0.0
    return GradCheckReport(name, worst, errors, bool(worst < tol), skipped)
