"""Recurrent cell architectures: forward steps and exact analytic backward steps.

Five architectures share one interface: a plain tanh RNN, LSTM (forget gates,
no peepholes), a clockwork RNN with power-of-two update periods, a tanh RNN
with direct connections to several past states (contiguous delays), and a
mixed-history cell that forms a learned convex combination of exponentially
spaced past states, gated by a reset vector, before the usual tanh update.

Parameters live in fused storage blocks (one block per matmul site) so a
step costs one GEMM per site; the individual weight matrices and biases are
exposed as numpy views into those blocks under their conventional names.
States are row-stacked batches of shape (batch, n_h).  Any state read at
time index <= 0 is the zero vector.

Backward steps are hand-derived reverse-mode partials of the corresponding
forward step: given the full derivative of the loss w.r.t. this step's
outputs they accumulate parameter-gradient contributions and return the
gradient w.r.t. every tapped earlier state, one entry per delay.  They are
validated against central finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .errors import DataError

ARCHITECTURES = ("simple", "lstm", "clockwork", "narx", "mist")

CHECKPOINT_FORMAT = "rnnlab.params.v1"


@dataclass(frozen=True)
class CellConfig:
    """Architecture choice, sizes, and the delay/partition structure.

    n_d is the number of delays for narx/mist and the number of partitions
    for clockwork; it is ignored (forced to 1) for simple and lstm.  The
    delay set defaults to {1..n_d} for narx and {1, 2, 4, ..., 2^(n_d-1)}
    for mist and can be overridden for experimentation.
    """

    arch: str
    n_x: int
    n_h: int
    n_d: int = 1
    delays: tuple = ()
    forget_bias_init: float = 1.0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.n_x < 1 or self.n_h < 1:
            raise ValueError(f"n_x and n_h must be positive, got n_x={self.n_x} n_h={self.n_h}")
        if self.n_d < 1:
            raise ValueError(f"n_d must be positive, got {self.n_d}")
        if self.arch in ("simple", "lstm", "clockwork") and self.delays not in ((), (1,)):
            raise ValueError(f"{self.arch} does not take an explicit delay set")
        if self.arch in ("simple", "lstm"):
            object.__setattr__(self, "n_d", 1)
        if self.arch in ("simple", "lstm", "clockwork"):
            delays = (1,)
        elif not self.delays:
            if self.arch == "narx":
                delays = tuple(range(1, self.n_d + 1))
            else:
                delays = tuple(2 ** i for i in range(self.n_d))
        else:
            delays = tuple(int(d) for d in self.delays)
            object.__setattr__(self, "n_d", len(delays))
        if any(d < 1 for d in delays):
            raise ValueError(f"delays must all be >= 1, got {delays}")
        if any(b <= a for a, b in zip(delays, delays[1:])):
            raise ValueError(f"delays must be strictly increasing, got {delays}")
        object.__setattr__(self, "delays", delays)
        if self.arch == "clockwork" and self.n_h % self.n_d != 0:
            raise ValueError(
                f"clockwork hidden size {self.n_h} is not divisible by {self.n_d} partitions")

    @property
    def max_delay(self):
        return self.delays[-1]

    def to_dict(self):
        return {
            "arch": self.arch,
            "n_x": self.n_x,
            "n_h": self.n_h,
            "n_d": self.n_d,
            "delays": list(self.delays),
            "forget_bias_init": self.forget_bias_init,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(arch=d["arch"], n_x=d["n_x"], n_h=d["n_h"], n_d=d["n_d"],
                   delays=tuple(d["delays"]), forget_bias_init=d["forget_bias_init"])


class Params:
    """Named tensors backed by fused storage blocks.

    Optimizers and norm computations walk the storage blocks; inspection,
    initialization, and serialization use the named views.  Writing through
    a view writes the block.
    """

    def __init__(self, blocks, named):
        self.blocks = blocks
        self.named = named

    @property
    def dtype(self):
        return next(iter(self.blocks.values())).dtype

    def names(self):
        return list(self.named)

    def __getitem__(self, name):
        return self.named[name]

    def block_list(self):
        return list(self.blocks.values())

    def copy_from(self, other):
        for name, blk in self.blocks.items():
            np.copyto(blk, other.blocks[name])


class StateHistory:
    """Ring buffer of the most recent hidden states, zero before time 1.

    Written states are h_1, h_2, ...; while computing step t (= next_t) the
    cell reads h_{t-d} via read(d).  Reads at time indices <= 0 return a
    shared zero vector, matching zero initial states.  For LSTM the single
    previous cell state is kept alongside.
    """

    def __init__(self, capacity, batch, n_h, dtype=np.float64, with_cell_state=False):
        if capacity < 1:
            raise ValueError("history capacity must be >= 1")
        self.capacity = capacity
        self._buf = np.zeros((capacity, batch, n_h), dtype=dtype)
        self._zero = np.zeros((batch, n_h), dtype=dtype)
        self._zero.setflags(write=False)
        self._cell = np.zeros((batch, n_h), dtype=dtype) if with_cell_state else None
        self.t = 0  # index of the most recently pushed state

    @property
    def next_t(self):
        return self.t + 1

    def read(self, d):
        if d > self.capacity:
            raise ValueError(f"history too small: delay {d} exceeds capacity {self.capacity}")
        s = self.next_t - d
        if s <= 0:
            return self._zero
        return self._buf[s % self.capacity]

    def read_cell(self):
        if self._cell is None:
            raise ValueError("history has no cell-state slot")
        return self._cell

    def push(self, h, c=None):
        self.t += 1
        self._buf[self.t % self.capacity] = h
        if c is not None:
            if self._cell is None:
                raise ValueError("history has no cell-state slot")
            self._cell = c


# ---------------------------------------------------------------------------
# step traces

@dataclass
class SimpleTrace:
    h: np.ndarray  # post-activation state, for tanh'


@dataclass
class LstmTrace:
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    cbar: np.ndarray
    c: np.ndarray


@dataclass
class ClockworkTrace:
    h: np.ndarray


@dataclass
class MistTrace:
    a: np.ndarray    # (batch, n_d) convex-combination coefficients
    r: np.ndarray    # (batch, n_h) reset gate
    mix: np.ndarray  # (batch, n_h) combined history before the reset gate
    h: np.ndarray


def _concat(parts):
    return np.concatenate(parts, axis=1)


def _dtanh_from_h(h):
    return 1.0 - h * h


class Cell:
    """Shared surface for all architectures; subclasses fill in the math."""

    arch = None
    has_cell_state = False

    def __init__(self, config):
        if config.arch != self.arch:
            raise ValueError(f"config is for {config.arch!r}, cell is {self.arch!r}")
        self.config = config
        self.n_x = config.n_x
        self.n_h = config.n_h
        self.delays = config.delays

    # -- parameter plumbing -------------------------------------------------

    def block_shapes(self):
        raise NotImplementedError

    def named_views(self, blocks):
        raise NotImplementedError

    def zeros_params(self, dtype=np.float64):
        blocks = {name: np.zeros(shape, dtype=dtype) for name, shape in self.block_shapes().items()}
        return Params(blocks, self.named_views(blocks))

    def init_params(self, rng, dtype=np.float64):
        """Draw every weight matrix ~ N(0, 1/n_h); biases 0 (forget bias aside).

        Matrices are drawn in named order, one init_normal call each, so a
        fixed seed reproduces the same parameters.
        """
        params = self.zeros_params(dtype)
        std = 1.0 / np.sqrt(self.n_h)
        for name, view in params.named.items():
            if view.ndim == 2:
                view[...] = nk.init_normal(rng, view.shape[0], view.shape[1], std, dtype)
        self._init_biases(params)
        return params

    def _init_biases(self, params):
        pass

    def learnable_count(self):
        return sum(v.size for v in self.zeros_params().named.values())

    # -- compute ------------------------------------------------------------

    def prepare(self, params):
        """Per-sequence precomputation (derived arrays); default passthrough."""
        return params

    def step(self, prep, x_t, history):
        raise NotImplementedError

    def backward_step(self, prep, t, x_t, reads, trace, dh, dc, grads):
        """Reverse one step: accumulate into grads, return (dstates, dc_prev, dx)."""
        raise NotImplementedError


class SimpleRNNCell(Cell):
    """h_t = tanh(W_h h_{t-1} + W_x x_t + b)."""

    arch = "simple"

    def block_shapes(self):
        n_h, n_x = self.n_h, self.n_x
        return {"W": (n_h, n_h + n_x), "b": (n_h,)}

    def named_views(self, blocks):
        n_h = self.n_h
        W, b = blocks["W"], blocks["b"]
        return {"W_h": W[:, :n_h], "W_x": W[:, n_h:], "b": b}

    def step(self, prep, x_t, history):
        u = _concat([history.read(1), x_t])
        h = np.tanh(u @ prep.blocks["W"].T + prep.blocks["b"])
        return h, SimpleTrace(h=h)

    def backward_step(self, prep, t, x_t, reads, trace, dh, dc, grads):
        n_h = self.n_h
        dz = dh * _dtanh_from_h(trace.h)
        u = _concat([reads.h(1), x_t])
        grads.blocks["W"] += dz.T @ u
        grads.blocks["b"] += dz.sum(axis=0)
        du = dz @ prep.blocks["W"]
        return {1: du[:, :n_h]}, None, du[:, n_h:]


class LstmCell(Cell):
    """Forget/input/output gates and candidate; c_t = f*c_{t-1} + i*cbar."""

    arch = "lstm"
    has_cell_state = True

    def block_shapes(self):
        n_h, n_x = self.n_h, self.n_x
        return {"W": (4 * n_h, n_h + n_x), "b": (4 * n_h,)}

    def named_views(self, blocks):
        n_h = self.n_h
        W, b = blocks["W"], blocks["b"]
        views = {}
        for k, g in enumerate("fioc"):
            rows = slice(k * n_h, (k + 1) * n_h)
            views[f"W_{g}h"] = W[rows, :n_h]
            views[f"W_{g}x"] = W[rows, n_h:]
            views[f"b_{g}"] = b[rows]
        return views

    def _init_biases(self, params):
        params["b_f"][...] = self.config.forget_bias_init

    def step(self, prep, x_t, history):
        n_h = self.n_h
        u = _concat([history.read(1), x_t])
        z = u @ prep.blocks["W"].T + prep.blocks["b"]
        f = nk.sigmoid(z[:, :n_h])
        i = nk.sigmoid(z[:, n_h:2 * n_h])
        o = nk.sigmoid(z[:, 2 * n_h:3 * n_h])
        cbar = np.tanh(z[:, 3 * n_h:])
        c = f * history.read_cell() + i * cbar
        h = o * np.tanh(c)
        return (h, c), LstmTrace(f=f, i=i, o=o, cbar=cbar, c=c)

    def backward_step(self, prep, t, x_t, reads, trace, dh, dc, grads):
        n_h = self.n_h
        f, i, o, cbar, c = trace.f, trace.i, trace.o, trace.cbar, trace.c
        tc = np.tanh(c)
        dcc = dh * o * (1.0 - tc * tc)
        if dc is not None:
            dcc = dcc + dc
        c_prev = reads.c_prev()
        dzf = (dcc * c_prev) * f * (1.0 - f)
        dzi = (dcc * cbar) * i * (1.0 - i)
        dzo = (dh * tc) * o * (1.0 - o)
        dzc = (dcc * i) * (1.0 - cbar * cbar)
        dz = _concat([dzf, dzi, dzo, dzc])
        u = _concat([reads.h(1), x_t])
        grads.blocks["W"] += dz.T @ u
        grads.blocks["b"] += dz.sum(axis=0)
        du = dz @ prep.blocks["W"]
        return {1: du[:, :n_h]}, dcc * f, du[:, n_h:]


class ClockworkCell(Cell):
    """Partitioned units with periods 2^i; slower-or-equal partitions feed faster.

    Partition i (period 2^i) recomputes only when t mod 2^i == 0 and copies
    its previous value otherwise.  Recurrent weights from a faster partition
    into a slower one are structurally zero (mask applied to W_h); input
    weights are not masked, every partition reads x_t on its ticks.
    """

    arch = "clockwork"

    def __init__(self, config):
        super().__init__(config)
        n_p = config.n_d
        n_b = config.n_h // n_p
        self.n_partitions = n_p
        self.block_size = n_b
        self.periods = np.array([2 ** i for i in range(n_p)], dtype=np.int64)
        self.unit_periods = np.repeat(self.periods, n_b)
        # mask[target, source] = 1 iff period(source) >= period(target)
        blk = np.repeat(np.arange(n_p), n_b)
        self.recurrent_mask = (blk[None, :] >= blk[:, None]).astype(np.float64)

    def block_shapes(self):
        n_h, n_x = self.n_h, self.n_x
        return {"W": (n_h, n_h + n_x), "b": (n_h,)}

    def named_views(self, blocks):
        n_h = self.n_h
        W, b = blocks["W"], blocks["b"]
        return {"W_h": W[:, :n_h], "W_x": W[:, n_h:], "b": b}

    def init_params(self, rng, dtype=np.float64):
        params = super().init_params(rng, dtype)
        wh = params["W_h"]
        wh *= self.recurrent_mask.astype(dtype)
        return params

    def learnable_count(self):
        masked_out = self.n_h * self.n_h - int(self.recurrent_mask.sum())
        return super().learnable_count() - masked_out

    def active_units(self, t):
        return (t % self.unit_periods) == 0

    def prepare(self, params):
        Wm = params.blocks["W"].copy()
        Wm[:, :self.n_h] *= self.recurrent_mask.astype(Wm.dtype)
        return params, Wm

    def step(self, prep, x_t, history):
        params, Wm = prep
        h_prev = history.read(1)
        u = _concat([h_prev, x_t])
        z = u @ Wm.T + params.blocks["b"]
        active = self.active_units(history.next_t)
        h = np.where(active, np.tanh(z), h_prev)
        return h, ClockworkTrace(h=h)

    def backward_step(self, prep, t, x_t, reads, trace, dh, dc, grads):
        params, Wm = prep
        n_h = self.n_h
        active = self.active_units(t)
        dz = np.where(active, dh * _dtanh_from_h(trace.h), 0.0)
        u = _concat([reads.h(1), x_t])
        dW = dz.T @ u
        dW[:, :n_h] *= self.recurrent_mask.astype(dW.dtype)
        grads.blocks["W"] += dW
        grads.blocks["b"] += dz.sum(axis=0)
        du = dz @ Wm
        # inactive units pass their gradient straight through the copy edge
        dh_prev = du[:, :n_h] + np.where(active, 0.0, dh)
        return {1: dh_prev}, None, du[:, n_h:]


class NarxCell(Cell):
    """h_t = tanh(sum_d W_d h_{t-d} + W_x x_t + b) over contiguous delays."""

    arch = "narx"

    def block_shapes(self):
        n_h, n_x, n_d = self.n_h, self.n_x, self.config.n_d
        return {"W": (n_h, n_d * n_h + n_x), "b": (n_h,)}

    def named_views(self, blocks):
        n_h, n_d = self.n_h, self.config.n_d
        W, b = blocks["W"], blocks["b"]
        views = {}
        for k, d in enumerate(self.delays):
            views[f"W_{d}"] = W[:, k * n_h:(k + 1) * n_h]
        views["W_x"] = W[:, n_d * n_h:]
        views["b"] = b
        return views

    def step(self, prep, x_t, history):
        u = _concat([history.read(d) for d in self.delays] + [x_t])
        h = np.tanh(u @ prep.blocks["W"].T + prep.blocks["b"])
        return h, SimpleTrace(h=h)

    def backward_step(self, prep, t, x_t, reads, trace, dh, dc, grads):
        n_h, n_d = self.n_h, self.config.n_d
        dz = dh * _dtanh_from_h(trace.h)
        u = _concat([reads.h(d) for d in self.delays] + [x_t])
        grads.blocks["W"] += dz.T @ u
        grads.blocks["b"] += dz.sum(axis=0)
        du = dz @ prep.blocks["W"]
        dstates = {d: du[:, k * n_h:(k + 1) * n_h] for k, d in enumerate(self.delays)}
        return dstates, None, du[:, n_d * n_h:]


class MistCell(Cell):
    """Attention over exponentially delayed states, reset gate, tanh update.

    a_t = softmax(W_ah h_{t-1} + W_ax x_t + b_a)          (n_d coefficients)
    r_t = sigmoid(W_rh h_{t-1} + W_rx x_t + b_r)
    h_t = tanh(W_h [r_t * sum_i a_ti h_{t-2^i}] + W_x x_t + b)
    """

    arch = "mist"

    def block_shapes(self):
        n_h, n_x, n_d = self.n_h, self.n_x, self.config.n_d
        return {
            "Wg": (n_d + n_h, n_h + n_x),
            "bg": (n_d + n_h,),
            "W": (n_h, n_h + n_x),
            "b": (n_h,),
        }

    def named_views(self, blocks):
        n_h, n_d = self.n_h, self.config.n_d
        Wg, bg, W, b = blocks["Wg"], blocks["bg"], blocks["W"], blocks["b"]
        return {
            "W_ah": Wg[:n_d, :n_h], "W_ax": Wg[:n_d, n_h:], "b_a": bg[:n_d],
            "W_rh": Wg[n_d:, :n_h], "W_rx": Wg[n_d:, n_h:], "b_r": bg[n_d:],
            "W_h": W[:, :n_h], "W_x": W[:, n_h:], "b": b,
        }

    def step(self, prep, x_t, history):
        n_d = self.config.n_d
        u = _concat([history.read(1), x_t])
        zg = u @ prep.blocks["Wg"].T + prep.blocks["bg"]
        a = nk.softmax(zg[:, :n_d], axis=1)
        r = nk.sigmoid(zg[:, n_d:])
        stack = np.stack([history.read(d) for d in self.delays], axis=1)
        mix = np.einsum("bd,bdh->bh", a, stack)
        v = _concat([r * mix, x_t])
        h = np.tanh(v @ prep.blocks["W"].T + prep.blocks["b"])
        return h, MistTrace(a=a, r=r, mix=mix, h=h)

    def backward_step(self, prep, t, x_t, reads, trace, dh, dc, grads):
        n_h, n_d = self.n_h, self.config.n_d
        a, r, mix = trace.a, trace.r, trace.mix
        dz = dh * _dtanh_from_h(trace.h)
        v = _concat([r * mix, x_t])
        grads.blocks["W"] += dz.T @ v
        grads.blocks["b"] += dz.sum(axis=0)
        dv = dz @ prep.blocks["W"]
        dgated = dv[:, :n_h]
        dx = dv[:, n_h:].copy()

        dr = dgated * mix
        dmix = dgated * r
        stack = np.stack([reads.h(d) for d in self.delays], axis=1)
        da = np.einsum("bh,bdh->bd", dmix, stack)
        # softmax jacobian, row-wise
        dza = a * (da - np.sum(da * a, axis=1, keepdims=True))
        dzr = dr * r * (1.0 - r)
        dzg = _concat([dza, dzr])
        u = _concat([reads.h(1), x_t])
        grads.blocks["Wg"] += dzg.T @ u
        grads.blocks["bg"] += dzg.sum(axis=0)
        du = dzg @ prep.blocks["Wg"]
        dx += du[:, n_h:]

        dstates = {}
        for k, d in enumerate(self.delays):
            dstates[d] = a[:, k:k + 1] * dmix
        dstates[1] = dstates.get(1, 0.0) + du[:, :n_h]
        return dstates, None, dx


_CELL_CLASSES = {cls.arch: cls for cls in (SimpleRNNCell, LstmCell, ClockworkCell, NarxCell, MistCell)}


def make_cell(config):
    return _CELL_CLASSES[config.arch](config)


def param_count(config, n_out):
    """Exact learnable-scalar count, linear output layer included."""
    if n_out < 1:
        raise ValueError(f"n_out must be positive, got {n_out}")
    return make_cell(config).learnable_count() + n_out * config.n_h + n_out


# ---------------------------------------------------------------------------
# checkpoint serialization: named tensors with shapes, row-major, versioned

def save_params(path, config, params, extras=None):
    """Write a versioned checkpoint of named tensors (plus optional extras)."""
    payload = {
        "format": np.array(CHECKPOINT_FORMAT),
        "config": np.array(json.dumps(config.to_dict())),
    }
    for name, view in params.named.items():
        payload[f"param::{name}"] = np.ascontiguousarray(view)
    for name, arr in (extras or {}).items():
        payload[f"extra::{name}"] = np.ascontiguousarray(arr)
    np.savez(path, **payload)


def load_params(path):
    """Read a checkpoint into (config, named tensor dict, extras dict).

    Raises DataError on unreadable files or unknown format versions.  Use
    restore_params to copy the tensors into an allocated parameter set.
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            contents = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    fmt = str(contents.get("format", ""))
    if fmt != CHECKPOINT_FORMAT:
        raise DataError(f"checkpoint {path} has format {fmt!r}, expected {CHECKPOINT_FORMAT!r}")
    try:
        config = CellConfig.from_dict(json.loads(str(contents["config"])))
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint {path} has a malformed config record: {exc}") from exc
    named = {k[len("param::"):]: v for k, v in contents.items() if k.startswith("param::")}
    extras = {k[len("extra::"):]: v for k, v in contents.items() if k.startswith("extra::")}
    return config, named, extras


def restore_params(params, named):
    """Copy stored named tensors into params; DataError on any mismatch."""
    surplus = set(named) - set(params.named)
    if surplus:
        raise DataError(f"checkpoint carries unknown tensors {sorted(surplus)}")
    for name, view in params.named.items():
        if name not in named:
            raise DataError(f"checkpoint is missing tensor {name!r}")
        stored = named[name]
        if stored.shape != view.shape:
            raise DataError(
                f"checkpoint tensor {name!r} has shape {stored.shape}, expected {view.shape}")
        view[...] = stored
    return params


def load_cell_params(path, dtype=np.float64):
    """Convenience loader for cell-only checkpoints: (config, params, extras)."""
    config, named, extras = load_params(path)
    params = restore_params(make_cell(config).zeros_params(dtype), named)
    return config, params, extras
