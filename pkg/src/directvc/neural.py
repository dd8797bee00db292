"""Frame-synchronous CBHG network with hand-written reverse-mode gradients.

Stack: prenet (dense+ReLU+dropout) x N -> conv bank (widths 1..K, BN, ReLU)
-> max-pool (width 2, stride 1) -> two conv projections (BN) -> residual add
-> highway x L -> bidirectional GRU -> dense output head.

All tensors are float64 and shaped (batch, time, channels). A frame mask
(batch, time) marks valid frames; padded frames are zeroed before every
convolution, excluded from batch-norm statistics and frozen out of the GRU
recurrence, so a padded batch computes exactly what the unpadded utterances
would.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GRU_CONVENTION = "gru:sigmoid-r,sigmoid-z,tanh-n;n=tanh(Wx+bx+r*(Uh+bh));h=(1-z)*n+z*h_prev"
BN_CONVENTION = f"batchnorm:eps={BN_EPS};ema-momentum={BN_MOMENTUM};infer=running"
MAGIC = b"PVC1"
FORMAT_VERSION = 1


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    output_dim: int
    head_kind: str = "softmax"
    prenet_layers: int = 3
    prenet_units: int | None = None
    dropout_rate: float = 0.2
    cbhg_units: int = 512
    conv_bank_k: int = 8
    bank_channels: int | None = None
    highway_layers: int = 8
    gru_units: int = 512
    mixtures: int = 5
    isotropic: bool = False

    def __post_init__(self):
        if self.prenet_units is None:
            object.__setattr__(self, "prenet_units", max(1, self.cbhg_units // 2))
        if self.bank_channels is None:
            object.__setattr__(self, "bank_channels", max(1, self.cbhg_units // 4))
        for name in ("input_dim", "output_dim", "prenet_layers", "prenet_units", "cbhg_units",
                     "conv_bank_k", "bank_channels", "highway_layers", "gru_units", "mixtures"):
            if int(getattr(self, name)) <= 0:
                raise NetworkError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise NetworkError("dropout_rate must be in [0, 1)")
        if self.head_kind not in ("softmax", "mdn"):
            raise NetworkError(f"unknown head_kind {self.head_kind!r}")

    @property
    def head_dim(self) -> int:
        if self.head_kind == "softmax":
            return self.output_dim
        m, d = self.mixtures, self.output_dim
        return m + m * d + (m if self.isotropic else m * d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls(**json.loads(text))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def _dropout_mask(seed: int, layer: int, shape, rate: float) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, layer]))
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


@dataclass
class _Ctx:
    mask: np.ndarray  # (B, T)
    train: bool
    seed: int
    update_stats: bool


# ---------------------------------------------------------------- layers


class Dense:
    def __init__(self, name, n_in, n_out, act=None, dropout=0.0, index=0):
        self.name, self.n_in, self.n_out, self.act = name, n_in, n_out, act
        self.dropout, self.index = dropout, index

    def init(self, rng, params, buffers):
        params[f"{self.name}.w"] = glorot(rng, (self.n_in, self.n_out), self.n_in, self.n_out)
        params[f"{self.name}.b"] = np.zeros(self.n_out)

    def forward(self, p, buf, x, ctx):
        if x.shape[-1] != self.n_in:
            raise NetworkError(f"layer {self.name}: expected {self.n_in} input channels, got {x.shape[-1]}")
        a = x @ p[f"{self.name}.w"] + p[f"{self.name}.b"]
        y = np.maximum(a, 0.0) if self.act == "relu" else a
        drop = None
        if ctx.train and self.dropout > 0.0:
            drop = _dropout_mask(ctx.seed, self.index, y.shape, self.dropout)
            y = y * drop
        return y, (x, a, drop)

    def backward(self, p, cache, dy, g):
        x, a, drop = cache
        if drop is not None:
            dy = dy * drop
        if self.act == "relu":
            dy = dy * (a > 0)
        g[f"{self.name}.w"] += np.einsum("bti,bto->io", x, dy)
        g[f"{self.name}.b"] += dy.sum(axis=(0, 1))
        return dy @ p[f"{self.name}.w"].T


class ConvBN:
    """1-D 'same' convolution (no bias) followed by masked batch norm and optional ReLU."""

    def __init__(self, name, n_in, n_out, width, act=None):
        self.name, self.n_in, self.n_out, self.width, self.act = name, n_in, n_out, width, act
        self.pad_l = (width - 1) // 2
        self.pad_r = width // 2

    def init(self, rng, params, buffers):
        n = self.name
        params[f"{n}.w"] = glorot(rng, (self.width, self.n_in, self.n_out), self.width * self.n_in, self.n_out)
        params[f"{n}.gamma"] = np.ones(self.n_out)
        params[f"{n}.beta"] = np.zeros(self.n_out)
        buffers[f"{n}.mean"] = np.zeros(self.n_out)
        buffers[f"{n}.var"] = np.ones(self.n_out)

    def forward(self, p, buf, x, ctx):
        n = self.name
        if x.shape[-1] != self.n_in:
            raise NetworkError(f"layer {n}: expected {self.n_in} input channels, got {x.shape[-1]}")
        m = ctx.mask[..., None]
        xm = x * m
        t = x.shape[1]
        xp = np.pad(xm, ((0, 0), (self.pad_l, self.pad_r), (0, 0)))
        cols = np.stack([xp[:, j : j + t] for j in range(self.width)], axis=2)  # (B,T,k,C)
        a = np.einsum("btkc,kco->bto", cols, p[f"{n}.w"])
        if ctx.train:
            cnt = m.sum()
            mean = (a * m).sum(axis=(0, 1)) / cnt
            var = (((a - mean) ** 2) * m).sum(axis=(0, 1)) / cnt
            if ctx.update_stats:
                buf[f"{n}.mean"] = (1 - BN_MOMENTUM) * buf[f"{n}.mean"] + BN_MOMENTUM * mean
                buf[f"{n}.var"] = (1 - BN_MOMENTUM) * buf[f"{n}.var"] + BN_MOMENTUM * var
        else:
            mean, var = buf[f"{n}.mean"], buf[f"{n}.var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (a - mean) * inv
        z = p[f"{n}.gamma"] * xhat + p[f"{n}.beta"]
        y = np.maximum(z, 0.0) if self.act == "relu" else z
        return y, (cols, xhat, inv, z, m)

    def backward(self, p, cache, dy, g):
        n = self.name
        cols, xhat, inv, z, m = cache
        if self.act == "relu":
            dy = dy * (z > 0)
        dy = dy * m
        cnt = m.sum()
        g[f"{n}.gamma"] += (dy * xhat).sum(axis=(0, 1))
        g[f"{n}.beta"] += dy.sum(axis=(0, 1))
        dxhat = dy * p[f"{n}.gamma"]
        mean_d = dxhat.sum(axis=(0, 1)) / cnt
        mean_dx = (dxhat * xhat * m).sum(axis=(0, 1)) / cnt
        da = inv * (dxhat - mean_d - xhat * mean_dx) * m
        g[f"{n}.w"] += np.einsum("btkc,bto->kco", cols, da)
        t = da.shape[1]
        dxp = np.zeros((da.shape[0], t + self.width - 1, self.n_in))
        w = p[f"{n}.w"]
        for j in range(self.width):
            dxp[:, j : j + t] += da @ w[j].T
        return dxp[:, self.pad_l : self.pad_l + t] * m


class ConvBank:
    def __init__(self, name, n_in, channels, k):
        self.name = name
        self.convs = [ConvBN(f"{name}.{w}", n_in, channels, w, act="relu") for w in range(1, k + 1)]

    def init(self, rng, params, buffers):
        for c in self.convs:
            c.init(rng, params, buffers)

    def forward(self, p, buf, x, ctx):
        outs, caches = [], []
        for c in self.convs:
            y, cache = c.forward(p, buf, x, ctx)
            outs.append(y)
            caches.append(cache)
        return np.concatenate(outs, axis=-1), caches

    def backward(self, p, caches, dy, g):
        dx = 0.0
        splits = np.split(dy, len(self.convs), axis=-1)
        for c, cache, d in zip(self.convs, caches, splits):
            dx = dx + c.backward(p, cache, d, g)
        return dx


class MaxPool2:
    """Width-2, stride-1 max pool over (t-1, t); frame 0 passes through."""

    name = "pool"

    def init(self, rng, params, buffers):
        pass

    def forward(self, p, buf, x, ctx):
        prev = np.concatenate([x[:, :1], x[:, :-1]], axis=1)
        take_prev = prev > x
        return np.where(take_prev, prev, x), take_prev

    def backward(self, p, take_prev, dy, g):
        dx = np.where(take_prev, 0.0, dy)
        shifted = np.where(take_prev, dy, 0.0)
        dx[:, :-1] += shifted[:, 1:]
        return dx


class Highway:
    def __init__(self, name, width):
        self.name, self.width = name, width

    def init(self, rng, params, buffers):
        n, w = self.name, self.width
        params[f"{n}.wh"] = glorot(rng, (w, w), w, w)
        params[f"{n}.bh"] = np.zeros(w)
        params[f"{n}.wt"] = glorot(rng, (w, w), w, w)
        params[f"{n}.bt"] = np.full(w, -1.0)

    def forward(self, p, buf, x, ctx):
        n = self.name
        ah = x @ p[f"{n}.wh"] + p[f"{n}.bh"]
        h = np.maximum(ah, 0.0)
        tg = sigmoid(x @ p[f"{n}.wt"] + p[f"{n}.bt"])
        return h * tg + x * (1.0 - tg), (x, ah, h, tg)

    def backward(self, p, cache, dy, g):
        n = self.name
        x, ah, h, tg = cache
        dh = dy * tg * (ah > 0)
        dt = dy * (h - x) * tg * (1.0 - tg)
        g[f"{n}.wh"] += np.einsum("bti,bto->io", x, dh)
        g[f"{n}.bh"] += dh.sum(axis=(0, 1))
        g[f"{n}.wt"] += np.einsum("bti,bto->io", x, dt)
        g[f"{n}.bt"] += dt.sum(axis=(0, 1))
        return dy * (1.0 - tg) + dh @ p[f"{n}.wh"].T + dt @ p[f"{n}.wt"].T


class GRU:
    """Single-direction GRU; gate blocks ordered (r, z, n) along the last axis."""

    def __init__(self, name, n_in, units, reverse=False):
        self.name, self.n_in, self.units, self.reverse = name, n_in, units, reverse

    def init(self, rng, params, buffers):
        n, h = self.name, self.units
        params[f"{n}.wx"] = glorot(rng, (self.n_in, 3 * h), self.n_in, h)
        params[f"{n}.wh"] = glorot(rng, (h, 3 * h), h, h)
        params[f"{n}.bx"] = np.zeros(3 * h)
        params[f"{n}.bh"] = np.zeros(3 * h)

    def forward(self, p, buf, x, ctx):
        n, hu = self.name, self.units
        mask = ctx.mask
        if self.reverse:
            x, mask = x[:, ::-1], mask[:, ::-1]
        b, t, _ = x.shape
        xg = x @ p[f"{n}.wx"] + p[f"{n}.bx"]
        wh, bh = p[f"{n}.wh"], p[f"{n}.bh"]
        h = np.zeros((b, hu))
        out = np.empty((b, t, hu))
        keep = ctx.train
        hs, rs, zs, ns, hgn = [], [], [], [], []
        for i in range(t):
            hg = h @ wh + bh
            r = sigmoid(xg[:, i, :hu] + hg[:, :hu])
            z = sigmoid(xg[:, i, hu : 2 * hu] + hg[:, hu : 2 * hu])
            nn_ = np.tanh(xg[:, i, 2 * hu :] + r * hg[:, 2 * hu :])
            hnew = (1.0 - z) * nn_ + z * h
            m = mask[:, i, None]
            if keep:
                hs.append(h)
                rs.append(r)
                zs.append(z)
                ns.append(nn_)
                hgn.append(hg[:, 2 * hu :])
            h = m * hnew + (1.0 - m) * h
            out[:, i] = h
        if self.reverse:
            out = out[:, ::-1]
        return out, (x, mask, hs, rs, zs, ns, hgn)

    def backward(self, p, cache, dy, g):
        n, hu = self.name, self.units
        x, mask, hs, rs, zs, ns, hgn = cache
        if self.reverse:
            dy = dy[:, ::-1]
        b, t, _ = x.shape
        wh = p[f"{n}.wh"]
        dxg = np.empty((b, t, 3 * hu))
        dwh = np.zeros_like(wh)
        dbh = np.zeros(3 * hu)
        dh = np.zeros((b, hu))
        for i in range(t - 1, -1, -1):
            dh = dh + dy[:, i]
            m = mask[:, i, None]
            dhnew = m * dh
            dprev = (1.0 - m) * dh
            h, r, z, nn_ = hs[i], rs[i], zs[i], ns[i]
            dn = dhnew * (1.0 - z)
            dz = dhnew * (h - nn_)
            dprev = dprev + dhnew * z
            dan = dn * (1.0 - nn_ * nn_)
            dr = dan * hgn[i]
            dar = dr * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dxg[:, i, :hu] = dar
            dxg[:, i, hu : 2 * hu] = daz
            dxg[:, i, 2 * hu :] = dan
            dhg = np.concatenate([dar, daz, dan * r], axis=1)
            dwh += h.T @ dhg
            dbh += dhg.sum(axis=0)
            dh = dprev + dhg @ wh.T
        g[f"{n}.wh"] += dwh
        g[f"{n}.bh"] += dbh
        g[f"{n}.wx"] += np.einsum("bti,bto->io", x, dxg)
        g[f"{n}.bx"] += dxg.sum(axis=(0, 1))
        dx = dxg @ p[f"{n}.wx"].T
        return dx[:, ::-1] if self.reverse else dx


class BiGRU:
    def __init__(self, name, n_in, units):
        self.name = name
        self.fw = GRU(f"{name}.fw", n_in, units)
        self.bw = GRU(f"{name}.bw", n_in, units, reverse=True)

    def init(self, rng, params, buffers):
        self.fw.init(rng, params, buffers)
        self.bw.init(rng, params, buffers)

    def forward(self, p, buf, x, ctx):
        yf, cf = self.fw.forward(p, buf, x, ctx)
        yb, cb = self.bw.forward(p, buf, x, ctx)
        return np.concatenate([yf, yb], axis=-1), (cf, cb)

    def backward(self, p, cache, dy, g):
        hu = self.fw.units
        return self.fw.backward(p, cache[0], dy[..., :hu], g) + self.bw.backward(p, cache[1], dy[..., hu:], g)


# ---------------------------------------------------------------- network


def _build_layers(cfg: NetworkConfig):
    pre = []
    n_in = cfg.input_dim
    for i in range(cfg.prenet_layers):
        pre.append(Dense(f"prenet.{i}", n_in, cfg.prenet_units, act="relu", dropout=cfg.dropout_rate, index=i))
        n_in = cfg.prenet_units
    width = cfg.prenet_units
    bank = ConvBank("bank", width, cfg.bank_channels, cfg.conv_bank_k)
    proj = [
        ConvBN("proj.0", cfg.conv_bank_k * cfg.bank_channels, cfg.cbhg_units, 3, act="relu"),
        ConvBN("proj.1", cfg.cbhg_units, width, 3),
    ]
    highways = [Highway(f"highway.{i}", width) for i in range(cfg.highway_layers)]
    gru = BiGRU("gru", width, cfg.gru_units)
    head = Dense("out", 2 * cfg.gru_units, cfg.head_dim)
    return pre, bank, proj, highways, gru, head


class Network:
    """Parameters, batch-norm buffers and the layer stack for one NetworkConfig."""

    def __init__(self, config: NetworkConfig, params=None, buffers=None):
        self.config = config
        self.pre, self.bank, self.proj, self.highways, self.gru, self.head = _build_layers(config)
        self.params: dict[str, np.ndarray] = params if params is not None else {}
        self.buffers: dict[str, np.ndarray] = buffers if buffers is not None else {}
        self.mode = "infer"
        self._tape = None

    @property
    def layers(self):
        return [*self.pre, self.bank, MaxPool2(), *self.proj, *self.highways, self.gru, self.head]

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "infer"
        self._tape = None
        return self

    def copy(self) -> "Network":
        net = Network(self.config, {k: v.copy() for k, v in self.params.items()},
                      {k: v.copy() for k, v in self.buffers.items()})
        net.mode = self.mode
        return net

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def __call__(self, x, seed=0, mask=None):
        return forward(self, x, seed=seed, mask=mask)


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    net = Network(cfg)
    rng = np.random.default_rng(seed)
    for layer in [*net.pre, net.bank, *net.proj, *net.highways, net.gru, net.head]:
        layer.init(rng, net.params, net.buffers)
    return net


def forward(net: Network, x: np.ndarray, seed: int = 0, mask=None, update_stats: bool = True,
            hidden: bool = False) -> np.ndarray:
    """Run the stack on a (T, input_dim) matrix or a (B, T, input_dim) batch.

    In train mode activations are retained for ``backward`` and dropout masks
    are derived from ``seed``; infer mode is deterministic and leaves the
    network untouched. ``hidden=True`` (infer mode only) returns the
    bidirectional GRU output that feeds the head instead of the head output.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise NetworkError(f"expected a (T, D) or (B, T, D) input, got shape {x.shape}")
    if x.shape[-1] != net.config.input_dim:
        raise NetworkError(f"input has {x.shape[-1]} columns, network expects {net.config.input_dim}")
    if not np.all(np.isfinite(x)):
        raise NetworkError("input contains non-finite values")
    mask = np.ones(x.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64).reshape(x.shape[:2])
    train = net.mode == "train"
    ctx = _Ctx(mask, train, int(seed), update_stats)
    p, buf = net.params, net.buffers
    caches = []
    h = x
    for layer in net.pre:
        h, c = layer.forward(p, buf, h, ctx)
        caches.append(c)
    residual = h
    h, c = net.bank.forward(p, buf, h, ctx)
    caches.append(c)
    pool = MaxPool2()
    h, c = pool.forward(p, buf, h, ctx)
    caches.append(c)
    for layer in net.proj:
        h, c = layer.forward(p, buf, h, ctx)
        caches.append(c)
    h = h + residual
    for layer in net.highways:
        h, c = layer.forward(p, buf, h, ctx)
        caches.append(c)
    h, c = net.gru.forward(p, buf, h, ctx)
    caches.append(c)
    if hidden:
        if train:
            raise NetworkError("hidden features are only available in infer mode")
        return h[0] if squeeze else h
    y, c = net.head.forward(p, buf, h, ctx)
    caches.append(c)
    net._tape = (caches, squeeze) if train else None
    return y[0] if squeeze else y


def backward(net: Network, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dLoss/dOutput."""
    if net._tape is None:
        raise NetworkError("backward called without a preceding train-mode forward pass")
    caches, squeeze = net._tape
    dy = np.asarray(loss_grad, dtype=np.float64)
    if squeeze:
        dy = dy[None]
    g = {k: np.zeros_like(v) for k, v in net.params.items()}
    p = net.params
    caches = list(caches)
    dy = net.head.backward(p, caches.pop(), dy, g)
    dy = net.gru.backward(p, caches.pop(), dy, g)
    for layer in reversed(net.highways):
        dy = layer.backward(p, caches.pop(), dy, g)
    d_res = dy
    for layer in reversed(net.proj):
        dy = layer.backward(p, caches.pop(), dy, g)
    dy = MaxPool2().backward(p, caches.pop(), dy, g)
    dy = net.bank.backward(p, caches.pop(), dy, g) + d_res
    for layer in reversed(net.pre):
        dy = layer.backward(p, caches.pop(), dy, g)
    return g


def param_count(net: Network) -> int:
    return int(sum(v.size for v in net.params.values()))


# ---------------------------------------------------------------- losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels, mask=None):
    """Summed frame-wise cross entropy over valid frames and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    mask = np.ones(labels.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None].astype(int), axis=-1)[..., 0]
    loss = -float((picked * mask).sum())
    grad = np.exp(logp)
    np.put_along_axis(grad, labels[..., None].astype(int), np.take_along_axis(grad, labels[..., None].astype(int), -1) - 1.0, -1)
    return loss, grad * mask[..., None]


def squared_error(output, target, mask=None):
    diff = np.asarray(output) - np.asarray(target)
    if mask is not None:
        diff = diff * np.asarray(mask)[..., None]
    return 0.5 * float(np.sum(diff**2)), diff


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(net: Network) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in net.params.items()},
                     {k: np.zeros_like(v) for k, v in net.params.items()})


def adam_step(net: Network, grads: dict, state: AdamState, lr: float) -> Network:
    for k, gk in grads.items():
        if not np.all(np.isfinite(gk)):
            raise NetworkError(f"non-finite gradient for parameter {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k in sorted(net.params):
        gk = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * gk
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * gk * gk
        net.params[k] = net.params[k] - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return net


def clip_gradients(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(v * v)) for v in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] *= scale
    return total


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_checked: int


def grad_check(net: Network, x, target, loss_fn, seed: int = 0, mask=None, eps: float = 1e-5,
               names=None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences, element by element.

    ``loss_fn(output, target, mask)`` returns ``(loss, dloss/doutput)``. The
    network is put in train mode; batch-norm running statistics are restored
    afterwards.
    """
    mode = net.mode
    saved_buffers = {k: v.copy() for k, v in net.buffers.items()}
    net.train()
    out = forward(net, x, seed=seed, mask=mask, update_stats=False)
    _, dout = loss_fn(out, target, mask)
    analytic = backward(net, dout)

    def loss_at():
        o = forward(net, x, seed=seed, mask=mask, update_stats=False)
        return loss_fn(o, target, mask)[0]

    worst, worst_name, n = 0.0, "", 0
    for name in names or sorted(net.params):
        arr = net.params[name]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_at()
            flat[i] = orig - eps
            lm = loss_at()
            flat[i] = orig
            numeric = (lp - lm) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / (abs(a) + 1e-8)
            n += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    net.buffers.update(saved_buffers)
    net.mode = mode
    net._tape = None
    return GradCheckReport(worst, worst_name, n)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, net: Network, stage: str = "") -> None:
    Path(path).write_bytes(checkpoint_bytes(net, stage))


def checkpoint_bytes(net: Network, stage: str = "") -> bytes:
    header = json.dumps({
        "config": json.loads(net.config.to_json()),
        "conventions": [GRU_CONVENTION, BN_CONVENTION, "mdn-head:weights,means,stddevs"],
        "stage": stage,
    }, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    tensors = net.state_dict()
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def load_checkpoint(path) -> tuple[Network, str]:
    """Read a checkpoint; returns the network (infer mode) and its stage tag."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise NetworkError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise NetworkError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    if header.get("conventions", [None])[0] != GRU_CONVENTION:
        raise NetworkError(f"{path}: GRU convention mismatch")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params, buffers = {}, {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + klen].decode("utf-8")
        off += klen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        kind, key = name.split("/", 1)
        (params if kind == "param" else buffers)[key] = arr
    cfg = NetworkConfig(**header["config"])
    reference = build_network(cfg, 0)
    for k, v in reference.params.items():
        if k not in params or params[k].shape != v.shape:
            raise NetworkError(f"{path}: parameter {k} missing or mis-shaped")
    return Network(cfg, params, buffers), header.get("stage", "")
