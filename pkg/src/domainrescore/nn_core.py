"""Small deterministic numeric core: layers with hand-written backprop.

All arrays are float64.  Layers keep their parameters as :class:`Param`
objects (value + accumulated gradient); ``forward`` returns the output and a
cache that ``backward`` consumes.  Gradients accumulate until
:func:`zero_grads` is called.

LSTM gate blocks are stored concatenated in the order input, forget,
output, candidate.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

GATES = ("input", "forget", "output", "candidate")


class NumericError(RuntimeError):
    pass


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.grad.fill(0.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def uniform_init(rng: np.random.Generator, shape, scale: float = 0.1) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


class Embedding:
    """Row lookup; an optional ``pad_id`` row is held at zero."""

    def __init__(self, name: str, n: int, dim: int, rng: np.random.Generator, pad_id: int | None = None):
        w = uniform_init(rng, (n, dim))
        if pad_id is not None:
            w[pad_id] = 0.0
        self.weight = Param(f"{name}.weight", w)
        self.pad_id = pad_id

    def params(self) -> list[Param]:
        return [self.weight]

    def forward(self, ids: np.ndarray):
        return self.weight.value[ids], ids

    def backward(self, dout: np.ndarray, ids) -> None:
        dim = self.weight.value.shape[1]
        np.add.at(self.weight.grad, np.asarray(ids).reshape(-1), dout.reshape(-1, dim))
        if self.pad_id is not None:
            self.weight.grad[self.pad_id] = 0.0


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Param(f"{name}.weight", uniform_init(rng, (n_in, n_out)))
        self.bias = Param(f"{name}.bias", np.zeros(n_out))

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray):
        return x @ self.weight.value + self.bias.value, x

    def backward(self, dout: np.ndarray, x: np.ndarray) -> np.ndarray:
        n_in = self.weight.value.shape[0]
        x2 = x.reshape(-1, n_in)
        d2 = dout.reshape(-1, dout.shape[-1])
        self.weight.grad += x2.T @ d2
        self.bias.grad += d2.sum(axis=0)
        return dout @ self.weight.value.T


@dataclass
class LstmCache:
    x: np.ndarray
    mask: np.ndarray | None
    h0: np.ndarray
    c0: np.ndarray
    gates: np.ndarray  # (B, T, 4H) post-activation
    cs: np.ndarray  # (B, T, H) candidate cell states before masking
    hs_prev: np.ndarray  # (B, T, H) hidden state entering each step
    cs_prev: np.ndarray  # (B, T, H)


class LSTM:
    """Single LSTM layer over batched sequences ``(B, T, D)``."""

    def __init__(self, name: str, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.n_in = n_in
        self.w_x = Param(f"{name}.w_x", uniform_init(rng, (n_in, 4 * hidden)))
        self.w_h = Param(f"{name}.w_h", uniform_init(rng, (hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        self.bias = Param(f"{name}.bias", b)

    def params(self) -> list[Param]:
        return [self.w_x, self.w_h, self.bias]

    def gate(self, which: str):
        """(input weights, recurrent weights, bias) views for one gate."""
        k = GATES.index(which)
        sl = slice(k * self.hidden, (k + 1) * self.hidden)
        return self.w_x.value[:, sl], self.w_h.value[:, sl], self.bias.value[sl]

    def zero_state(self, batch: int):
        return np.zeros((batch, self.hidden)), np.zeros((batch, self.hidden))

    def step(self, x: np.ndarray, h: np.ndarray, c: np.ndarray):
        """One recurrence step without caching (inference)."""
        H = self.hidden
        z = x @ self.w_x.value + h @ self.w_h.value + self.bias.value
        i = sigmoid(z[..., :H])
        f = sigmoid(z[..., H : 2 * H])
        o = sigmoid(z[..., 2 * H : 3 * H])
        g = np.tanh(z[..., 3 * H :])
        c = f * c + i * g
        return o * np.tanh(c), c

    def forward(self, x: np.ndarray, state=None, mask: np.ndarray | None = None):
        B, T, D = x.shape
        if D != self.n_in:
            raise NumericError(f"LSTM input dim {D} != {self.n_in}")
        H = self.hidden
        h, c = state if state is not None else self.zero_state(B)
        h0, c0 = h, c
        zx = x @ self.w_x.value + self.bias.value
        gates = np.empty((B, T, 4 * H))
        cs = np.empty((B, T, H))
        hs = np.empty((B, T, H))
        hs_prev = np.empty((B, T, H))
        cs_prev = np.empty((B, T, H))
        w_h = self.w_h.value
        for t in range(T):
            hs_prev[:, t] = h
            cs_prev[:, t] = c
            z = zx[:, t] + h @ w_h
            a = gates[:, t]
            a[:, : 3 * H] = sigmoid(z[:, : 3 * H])
            a[:, 3 * H :] = np.tanh(z[:, 3 * H :])
            c_new = a[:, H : 2 * H] * c + a[:, :H] * a[:, 3 * H :]
            h_new = a[:, 2 * H : 3 * H] * np.tanh(c_new)
            cs[:, t] = c_new
            if mask is not None:
                m = mask[:, t, None]
                c = m * c_new + (1.0 - m) * c
                h = m * h_new + (1.0 - m) * h
            else:
                c, h = c_new, h_new
            hs[:, t] = h
        cache = LstmCache(x, mask, h0, c0, gates, cs, hs_prev, cs_prev)
        return hs, (h, c), cache

    def backward(self, dhs: np.ndarray, cache: LstmCache, dstate=None):
        """Returns ``(dx, (dh0, dc0))`` and accumulates parameter gradients."""
        B, T, H = dhs.shape
        w_h = self.w_h.value
        if dstate is None:
            dh = np.zeros((B, H))
            dc = np.zeros((B, H))
        else:
            dh, dc = (a.copy() for a in dstate)
        dz_all = np.empty((B, T, 4 * H))
        for t in range(T - 1, -1, -1):
            dh = dh + dhs[:, t]
            if cache.mask is not None:
                m = cache.mask[:, t, None]
                dh_new, dc_new = m * dh, m * dc
                dh_carry, dc_carry = (1.0 - m) * dh, (1.0 - m) * dc
            else:
                dh_new, dc_new = dh, dc
                dh_carry = dc_carry = 0.0
            a = cache.gates[:, t]
            i, f, o, g = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
            tc = np.tanh(cache.cs[:, t])
            dc_tot = dc_new + dh_new * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc_tot * g * i * (1.0 - i)
            dz[:, H : 2 * H] = dc_tot * cache.cs_prev[:, t] * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dh_new * tc * o * (1.0 - o)
            dz[:, 3 * H :] = dc_tot * i * (1.0 - g * g)
            dh = dz @ w_h.T + dh_carry
            dc = dc_tot * f + dc_carry
        D = cache.x.shape[-1]
        dz2 = dz_all.reshape(-1, 4 * H)
        self.w_x.grad += cache.x.reshape(-1, D).T @ dz2
        self.w_h.grad += cache.hs_prev.reshape(-1, H).T @ dz2
        self.bias.grad += dz2.sum(axis=0)
        dx = dz_all @ self.w_x.value.T
        return dx, (dh, dc)


def lstm_forward(layer: LSTM, inputs: np.ndarray, state=None):
    """Unbatched convenience: ``inputs`` is ``(T, D)``; returns (hidden, state, cache)."""
    x = np.asarray(inputs, dtype=np.float64).reshape(1, -1, layer.n_in)
    if state is not None:
        state = tuple(np.asarray(s, dtype=np.float64).reshape(1, -1) for s in state)
    hs, (h, c), cache = layer.forward(x, state)
    return hs[0], (h[0], c[0]), cache


# -- losses -----------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _weights(n: int, weights) -> tuple[np.ndarray, float]:
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise NumericError("loss over zero weighted items")
    return w, total


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray, weights=None):
    """Mean (weighted) negative log-likelihood and its gradient w.r.t. logits."""
    C = logits.shape[-1]
    lg = logits.reshape(-1, C)
    tg = np.asarray(targets).reshape(-1)
    w, total = _weights(len(tg), weights)
    lp = log_softmax(lg)
    rows = np.arange(len(tg))
    loss = -(w * lp[rows, tg]).sum() / total
    grad = np.exp(lp)
    grad[rows, tg] -= 1.0
    grad *= (w / total)[:, None]
    return float(loss), grad.reshape(logits.shape)


def nce_loss(target_scores, noise_scores, target_log_kq, noise_log_kq, weights=None):
    """Binary NCE objective with the normalizer fixed at one.

    ``target_scores`` (N,) and ``noise_scores`` (N, k) are unnormalized
    log-scores; ``*_log_kq`` are ``ln(k * q(w))`` under the noise
    distribution.  Returns the mean per-sample loss and gradients w.r.t.
    both score arrays.
    """
    a = np.asarray(target_scores, dtype=np.float64) - target_log_kq
    b = np.asarray(noise_scores, dtype=np.float64) - noise_log_kq
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericError("non-finite NCE logits (zero noise probability for an observed word?)")
    w, total = _weights(a.shape[0], weights)
    per = np.logaddexp(0.0, -a) + np.logaddexp(0.0, b).sum(axis=1)
    loss = float((w * per).sum() / total)
    scale = (w / total)
    d_target = (sigmoid(a) - 1.0) * scale
    d_noise = sigmoid(b) * scale[:, None]
    return loss, d_target, d_noise


# -- optimization -----------------------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Param], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Sequence[Param], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def backward_and_step(params: Sequence[Param], loss: float, adam: Adam, clip: float = 0.0) -> float:
    """Apply one Adam update from the gradients already accumulated in ``params``.

    The caller runs the model's backward pass first; this checks the loss,
    optionally clips, steps, and clears gradients.
    """
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss!r}")
    if clip > 0:
        clip_grad_norm(params, clip)
    adam.step()
    zero_grads(params)
    return loss


@dataclass
class EarlyStopConfig:
    patience: int = 2
    min_delta: float = 0.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


class EarlyStopping:
    """Tracks the best dev loss; ``update`` returns True on improvement."""

    def __init__(self, config: EarlyStopConfig):
        self.config = config
        self.best = float("inf")
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        if value < self.best - self.config.min_delta:
            self.best = value
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.config.patience


# -- verification -----------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(
    loss_fn: Callable[[], float],
    params: Sequence[Param],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must run forward and backward (accumulating into
    ``Param.grad``) and return the loss; it has to be deterministic.  The
    relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    zero_grads(params)
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    report = GradCheckReport(0.0, tolerance)
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            zero_grads(params)
            lp = loss_fn()
            flat[k] = old - h
            zero_grads(params)
            lm = loss_fn()
            flat[k] = old
            num = (lp - lm) / (2.0 * h)
            a = ga.reshape(-1)[k]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.per_param[p.name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    zero_grads(params)
    return report


# -- serialization -----------------------------------------------------------------------

_MAGIC = b"DRTENS"
TENSOR_FORMAT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 tensors: magic, version, JSON header, raw data."""
    names = sorted(tensors)
    header = {
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", TENSOR_FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for n in names:
        buf.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(_MAGIC)] != _MAGIC:
        raise NumericError(f"{path}: not a tensor file")
    off = len(_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != TENSOR_FORMAT_VERSION:
        raise NumericError(f"{path}: unsupported tensor format version {version}")
    off += 8
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    out = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        out[spec["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return out, header["meta"]
