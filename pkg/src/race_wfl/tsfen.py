"""Temporal sequence feature extraction network with exact backprop.

Architecture: per-device linear embedding -> multi-head self-attention
across the device axis (shared over sub-periods) -> per-device linear
squeeze -> flatten devices -> bidirectional LSTM over the sub-period axis
-> fully connected head.  The actor head emits one logit per device and
turns them into selection probabilities through a masked softmax; the
critic reuses the same trunk with a scalar head.

Everything is float64 numpy with hand-written reverse-mode gradients:
each layer's ``forward`` returns an output plus a cache, and ``backward``
consumes the cache and the upstream gradient.  The masked softmax maps a
zero mask entry to exactly zero probability (additive log-mask), and
probabilities of maskable entries are floored at ``prob_floor`` and
renormalized for numerical stability.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .accel import USE_NUMBA, maybe_jit
from .errors import CheckpointError, RaceError

_MAGIC = b"TSFCKPT1"


@maybe_jit
def _attn_softmax_nb(scores):
    """Row-softmax over the last axis of a 4-D score tensor, in place."""
    b, h, n, m = scores.shape
    for i in range(b):
        for j in range(h):
            for r in range(n):
                row = scores[i, j, r]
                mx = row[0]
                for c in range(1, m):
                    if row[c] > mx:
                        mx = row[c]
                total = 0.0
                for c in range(m):
                    row[c] = math.exp(row[c] - mx)
                    total += row[c]
                inv = 1.0 / total
                for c in range(m):
                    row[c] *= inv
    return scores


def _attn_softmax_np(scores):
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


@maybe_jit
def _attn_softmax_backward_nb(attn, dattn, inv_scale):
    """Softmax backward over the last axis; overwrites ``dattn`` with the
    score gradient scaled by ``inv_scale``."""
    b, h, n, m = attn.shape
    for i in range(b):
        for j in range(h):
            for r in range(n):
                arow = attn[i, j, r]
                drow = dattn[i, j, r]
                dot = 0.0
                for c in range(m):
                    dot += arow[c] * drow[c]
                for c in range(m):
                    drow[c] = arow[c] * (drow[c] - dot) * inv_scale
    return dattn


def _attn_softmax_backward_np(attn, dattn, inv_scale):
    dot = (dattn * attn).sum(axis=-1, keepdims=True)
    dattn -= dot
    dattn *= attn
    dattn *= inv_scale
    return dattn


if USE_NUMBA:
    attn_softmax = _attn_softmax_nb
    attn_softmax_backward = _attn_softmax_backward_nb
else:
    attn_softmax = _attn_softmax_np
    attn_softmax_backward = _attn_softmax_backward_np


@dataclass(frozen=True)
class TsfenConfig:
    n_devices: int
    history: int = 5
    feature_dim: int = 3
    d_model: int = 64
    n_heads: int = 8
    squeeze_dim: int = 8
    lstm_hidden: int = 128
    fc_hidden: int = 128
    output_dim: int | None = None     # defaults to n_devices
    prob_floor: float = 1e-7
    # fixed per-feature preprocessing: optional log10 then affine
    feature_log: tuple = (False, True, False)
    feature_center: tuple = (0.1, 13.0, 0.5)
    feature_scale: tuple = (0.2, 3.0, 1.0)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.history < 1 or self.n_devices < 1:
            raise ValueError("need at least one sub-period and one device")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def out_dim(self) -> int:
        return self.n_devices if self.output_dim is None else self.output_dim


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseLayer:
    """Affine map on the last axis."""

    def __init__(self, n_in, n_out, rng, prefix):
        self.prefix = prefix
        self.params = {
            f"{prefix}.W": _uniform_init(rng, n_in, (n_in, n_out)),
            f"{prefix}.b": _uniform_init(rng, n_in, (n_out,)),
        }

    def forward(self, x, params):
        w = params[f"{self.prefix}.W"]
        b = params[f"{self.prefix}.b"]
        return x @ w + b, x

    def backward(self, cache, dout, params, grads):
        x = cache
        w = params[f"{self.prefix}.W"]
        x2 = x.reshape(-1, x.shape[-1])
        d2 = dout.reshape(-1, dout.shape[-1])
        grads[f"{self.prefix}.W"] = x2.T @ d2
        grads[f"{self.prefix}.b"] = d2.sum(axis=0)
        return dout @ w.T


class MhsaLayer:
    """Scaled dot-product multi-head self-attention over the device axis.

    Input (B, M, N, D); attention runs independently per (batch,
    sub-period) pair with parameters shared across sub-periods.  The
    query/key/value projections live in one fused (D, 3D) matrix whose
    column blocks are the per-head projections.
    """

    def __init__(self, d_model, n_heads, rng, prefix):
        self.prefix = prefix
        self.d = d_model
        self.h = n_heads
        self.dh = d_model // n_heads
        self.params = {
            f"{prefix}.Wqkv": _uniform_init(rng, d_model,
                                            (d_model, 3 * d_model)),
            f"{prefix}.Wo": _uniform_init(rng, d_model, (d_model, d_model)),
        }

    def _split(self, x):
        # (B*, N, D) -> (B*, H, N, Dh)
        bs, n, d = x.shape
        return np.ascontiguousarray(
            x.reshape(bs, n, self.h, self.dh).transpose(0, 2, 1, 3))

    def _merge(self, x):
        bs, h, n, dh = x.shape
        return np.ascontiguousarray(
            x.transpose(0, 2, 1, 3)).reshape(bs, n, h * dh)

    def forward(self, x, params):
        p = self.prefix
        b, m, n, d = x.shape
        xf = x.reshape(b * m, n, d)
        qkv = xf @ params[f"{p}.Wqkv"]
        q = self._split(qkv[..., :d])
        k = self._split(qkv[..., d:2 * d])
        v = self._split(qkv[..., 2 * d:])
        scores = q @ k.transpose(0, 1, 3, 2)
        scores *= 1.0 / np.sqrt(self.dh)
        attn = attn_softmax(scores)
        ctx = self._merge(attn @ v)
        out = (ctx @ params[f"{p}.Wo"]).reshape(b, m, n, d)
        return out, (x, xf, q, k, v, attn, ctx)

    def backward(self, cache, dout, params, grads):
        p = self.prefix
        x, xf, q, k, v, attn, ctx = cache
        b, m, n, d = x.shape
        dflat = dout.reshape(b * m, n, d)
        grads[f"{p}.Wo"] = ctx.reshape(-1, d).T @ dflat.reshape(-1, d)
        dctx = dflat @ params[f"{p}.Wo"].T
        dheads = self._split(dctx)
        dattn = dheads @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dheads
        # softmax backward along the key axis (fused kernel)
        dscores = attn_softmax_backward(attn, dattn,
                                        1.0 / np.sqrt(self.dh))
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate(
            [self._merge(dq), self._merge(dk), self._merge(dv)], axis=-1)
        grads[f"{p}.Wqkv"] = (xf.reshape(-1, d).T
                              @ dqkv.reshape(-1, 3 * d))
        dxf = dqkv @ params[f"{p}.Wqkv"].T
        return dxf.reshape(b, m, n, d)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LstmLayer:
    """Single-direction LSTM over the middle axis; returns the final
    hidden state only."""

    def __init__(self, n_in, n_hidden, rng, prefix):
        self.prefix = prefix
        self.nh = n_hidden
        self.params = {
            f"{prefix}.W": _uniform_init(rng, n_in + n_hidden,
                                         (n_in + n_hidden, 4 * n_hidden)),
            f"{prefix}.b": _uniform_init(rng, n_in + n_hidden,
                                         (4 * n_hidden,)),
        }

    def forward(self, x, params):
        # x: (B, M, n_in)
        w = params[f"{self.prefix}.W"]
        bias = params[f"{self.prefix}.b"]
        b, m, _ = x.shape
        nh = self.nh
        h = np.zeros((b, nh))
        c = np.zeros((b, nh))
        steps = []
        for t in range(m):
            xt = x[:, t, :]
            zin = np.concatenate([xt, h], axis=1)
            z = zin @ w + bias
            i = _sigmoid(z[:, :nh])
            f = _sigmoid(z[:, nh:2 * nh])
            g = np.tanh(z[:, 2 * nh:3 * nh])
            o = _sigmoid(z[:, 3 * nh:])
            c_prev = c
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            steps.append((zin, i, f, g, o, c_prev, c, tc))
        return h, (x.shape, steps)

    def backward(self, cache, dh_final, params, grads):
        p = self.prefix
        w = params[f"{p}.W"]
        (b, m, n_in), steps = cache
        nh = self.nh
        dw = np.zeros_like(w)
        db = np.zeros_like(params[f"{p}.b"])
        dx = np.zeros((b, m, n_in))
        dh = dh_final.copy()
        dc = np.zeros_like(dh)
        for t in range(m - 1, -1, -1):
            zin, i, f, g, o, c_prev, c, tc = steps[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dz = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            dw += zin.T @ dz
            db += dz.sum(axis=0)
            dzin = dz @ w.T
            dx[:, t, :] = dzin[:, :n_in]
            dh = dzin[:, n_in:]
            dc = dc * f
        grads[f"{p}.W"] = dw
        grads[f"{p}.b"] = db
        return dx


def masked_softmax(logits: np.ndarray, mask: np.ndarray,
                   floor: float = 1e-7):
    """Selection probabilities with hard-zero support outside the mask.

    Fractional mask entries scale the exponentiated scores (additive log
    mask); zero entries get exactly zero probability.  Probabilities of
    in-support entries are clipped to at least ``floor`` and renormalized.
    Returns (probs, cache).
    """
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape != mask.shape:
        raise RaceError("logits and mask shapes differ")
    if (mask < 0).any() or (mask > 1).any():
        raise RaceError("mask entries must lie in [0, 1]")
    support = mask > 0.0
    if not support.any(axis=-1).all():
        raise RaceError("all-zero mask row: no selectable device")
    with np.errstate(divide="ignore"):
        z = np.where(support, logits + np.log(mask, where=support,
                                              out=np.zeros_like(mask)),
                     -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    raw = np.where(support, np.exp(z, where=np.isfinite(z),
                                   out=np.zeros_like(z)), 0.0)
    raw = raw / raw.sum(axis=-1, keepdims=True)
    floored = np.where(support, np.maximum(raw, floor), 0.0)
    denom = floored.sum(axis=-1, keepdims=True)
    probs = floored / denom
    cache = (raw, floored, denom, support)
    return probs, cache


def masked_softmax_backward(cache, dprobs):
    """Gradient of the masked softmax with respect to the logits."""
    raw, floored, denom, support = cache
    dfloored = (dprobs - (dprobs * floored).sum(axis=-1, keepdims=True)
                / denom) / denom
    draw = np.where(support & (raw >= floored), dfloored, 0.0)
    dz = raw * (draw - (draw * raw).sum(axis=-1, keepdims=True))
    return dz


class TsfenNetwork:
    """Trunk plus head; see the module docstring for the layout."""

    def __init__(self, config: TsfenConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.embed = DenseLayer(c.feature_dim, c.d_model, rng, "embed")
        self.mhsa = MhsaLayer(c.d_model, c.n_heads, rng, "mhsa")
        self.squeeze = DenseLayer(c.d_model, c.squeeze_dim, rng, "squeeze")
        lstm_in = c.n_devices * c.squeeze_dim
        self.lstm_fwd = LstmLayer(lstm_in, c.lstm_hidden, rng, "lstm_fwd")
        self.lstm_bwd = LstmLayer(lstm_in, c.lstm_hidden, rng, "lstm_bwd")
        self.fc1 = DenseLayer(2 * c.lstm_hidden, c.fc_hidden, rng, "fc1")
        self.fc2 = DenseLayer(c.fc_hidden, c.out_dim, rng, "fc2")
        self.params = {}
        for layer in (self.embed, self.mhsa, self.squeeze, self.lstm_fwd,
                      self.lstm_bwd, self.fc1, self.fc2):
            self.params.update(layer.params)

    def preprocess(self, states: np.ndarray) -> np.ndarray:
        """Fixed feature conditioning: optional log10 then affine."""
        c = self.config
        out = np.array(states, dtype=np.float64)
        for j in range(c.feature_dim):
            col = out[..., j]
            if c.feature_log[j]:
                col = np.log10(np.maximum(col, 1e-300))
            out[..., j] = (col - c.feature_center[j]) / c.feature_scale[j]
        return out

    def forward(self, states: np.ndarray):
        """states (B, M, N, F) -> logits (B, out_dim) plus cache."""
        x = self.preprocess(states)
        p = self.params
        e, c_embed = self.embed.forward(x, p)
        a, c_mhsa = self.mhsa.forward(e, p)
        s, c_squeeze = self.squeeze.forward(a, p)
        b, m, n, dsq = s.shape
        seq = s.reshape(b, m, n * dsq)
        h_fwd, c_fwd = self.lstm_fwd.forward(seq, p)
        h_bwd, c_bwd = self.lstm_bwd.forward(seq[:, ::-1, :], p)
        h = np.concatenate([h_fwd, h_bwd], axis=1)
        f1, c_fc1 = self.fc1.forward(h, p)
        relu = np.maximum(f1, 0.0)
        logits, c_fc2 = self.fc2.forward(relu, p)
        cache = (c_embed, c_mhsa, c_squeeze, (b, m, n, dsq), c_fwd, c_bwd,
                 c_fc1, f1, c_fc2)
        return logits, cache

    def backward(self, cache, dlogits):
        """Gradients of a scalar loss with logit-gradient ``dlogits``."""
        (c_embed, c_mhsa, c_squeeze, shape, c_fwd, c_bwd, c_fc1, f1,
         c_fc2) = cache
        b, m, n, dsq = shape
        p = self.params
        grads = {}
        drelu = self.fc2.backward(c_fc2, dlogits, p, grads)
        df1 = drelu * (f1 > 0.0)
        dh = self.fc1.backward(c_fc1, df1, p, grads)
        nh = self.config.lstm_hidden
        dseq = self.lstm_fwd.backward(c_fwd, dh[:, :nh], p, grads)
        dseq_b = self.lstm_bwd.backward(c_bwd, dh[:, nh:], p, grads)
        dseq = dseq + dseq_b[:, ::-1, :]
        ds = dseq.reshape(b, m, n, dsq)
        da = self.squeeze.backward(c_squeeze, ds, p, grads)
        de = self.mhsa.backward(c_mhsa, da, p, grads)
        self.embed.backward(c_embed, de, p, grads)
        return grads

    def policy(self, states: np.ndarray, mask: np.ndarray):
        """Masked selection probabilities (B, N) plus caches."""
        logits, cache = self.forward(states)
        probs, sm_cache = masked_softmax(logits, mask,
                                         self.config.prob_floor)
        return probs, (cache, sm_cache)

    def policy_backward(self, caches, dprobs):
        cache, sm_cache = caches
        dlogits = masked_softmax_backward(sm_cache, dprobs)
        return self.backward(cache, dlogits)

    def value(self, states: np.ndarray):
        """Scalar state values (B,) plus cache (critic head)."""
        logits, cache = self.forward(states)
        return logits[:, 0], cache


# --- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected adaptive-moment descent step, in place."""
    state.step += 1
    t = state.step
    scale = lr / (1.0 - beta1 ** t)
    inv_sqrt_bc2 = 1.0 / np.sqrt(1.0 - beta2 ** t)
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v)
        denom *= inv_sqrt_bc2
        denom += eps
        np.divide(m, denom, out=denom)
        denom *= scale
        params[k] -= denom


# --- checkpoints -----------------------------------------------------------

def save_params(path, params: dict, meta: dict | None = None) -> None:
    """Versioned flat binary checkpoint.

    Layout: magic ``TSFCKPT1``, little-endian uint32 header length, UTF-8
    JSON header (names, shapes, dtype, metadata), then each array's raw
    bytes as little-endian float64 in header order.
    """
    names = sorted(params)
    header = {
        "format_version": 1,
        "byte_order": "little",
        "dtype": "float64",
        "names": names,
        "shapes": {k: list(params[k].shape) for k in names},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_params(path):
    """Load a checkpoint; returns (params, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != 1:
            raise CheckpointError("unsupported checkpoint version")
        params = {}
        for k in header["names"]:
            shape = tuple(header["shapes"][k])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError("truncated checkpoint payload")
            params[k] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return params, header.get("meta", {})
