"""Unrolled-sequence training: loss head, exact BPTT, optimizer, trial harness.

A Model couples a recurrent cell with a linear softmax-cross-entropy head.
forward_sequence unrolls a whole batch and keeps the tape (states and step
traces); backward_sequence replays it in reverse, pushing gradient into
every delayed predecessor a cell architecture taps, so the result is the
exact gradient of the masked loss.  The same reverse sweep can attribute
gradient to individual unroll steps (decomposition) or record the norm of
the accumulated state gradient at every distance, which the diagnostics
module turns into gradient-decay profiles.

Training is plain SGD with classical momentum and global-norm gradient
clipping.  run_trial wraps one randomized trial: learning rate drawn
log-uniformly, normal initialization, per-epoch validation records, and a
failed-not-crashed policy for divergence.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .cells import Params, make_cell, param_count, save_params, load_params, restore_params
from .errors import DataError, NumericError, UsageError


@dataclass
class LossHead:
    """Linear output layer plus the loss placement convention.

    W_out and b_out alias the model parameter set, so optimizer updates are
    visible here without copying.  mode records where the loss attaches:
    every step (per_step) or only the last one (final_step); step_mask gives
    the matching canonical 0/1 per-step weights.
    """

    W_out: np.ndarray
    b_out: np.ndarray
    mode: str = "per_step"

    def __post_init__(self):
        if self.mode not in ("per_step", "final_step"):
            raise UsageError(f"unknown loss mode {self.mode!r}")
        if self.W_out.shape[0] != self.b_out.shape[0]:
            raise UsageError("output weight/bias row mismatch")

    @property
    def n_out(self):
        return self.b_out.shape[0]

    def step_mask(self, T):
        m = np.zeros(T)
        if self.mode == "per_step":
            m[:] = 1.0
        else:
            m[-1] = 1.0
        return m


class Model:
    """Recurrent cell plus output head, sharing one parameter set."""

    def __init__(self, config, n_out):
        if n_out < 1:
            raise UsageError(f"n_out must be positive, got {n_out}")
        self.config = config
        self.cell = make_cell(config)
        self.n_out = n_out

    def zeros_params(self, dtype=np.float64):
        base = self.cell.zeros_params(dtype)
        blocks = dict(base.blocks)
        blocks["Wy"] = np.zeros((self.n_out, self.config.n_h), dtype=dtype)
        blocks["by"] = np.zeros((self.n_out,), dtype=dtype)
        named = dict(base.named)
        named["W_y"] = blocks["Wy"]
        named["b_y"] = blocks["by"]
        return Params(blocks, named)

    def init_params(self, rng, dtype=np.float64):
        if isinstance(rng, (int, np.integer)):
            rng = nk.make_rng(int(rng))
        cell_params = self.cell.init_params(rng, dtype)
        params = self.zeros_params(dtype)
        for name, arr in cell_params.named.items():
            params.named[name][...] = arr
        params["W_y"][...] = nk.init_normal(
            rng, self.n_out, self.config.n_h, 1.0 / math.sqrt(self.config.n_h), dtype)
        return params

    def loss_head(self, params, mode="per_step"):
        return LossHead(W_out=params["W_y"], b_out=params["b_y"], mode=mode)

    def param_count(self):
        return param_count(self.config, self.n_out)

    def save_checkpoint(self, path, params, extras=None):
        extras = dict(extras or {})
        extras["n_out"] = np.array(self.n_out)
        save_params(path, self.config, params, extras)


def load_checkpoint(path, dtype=np.float64):
    """Restore a trained model checkpoint: (model, params, extras)."""
    config, named, extras = load_params(path)
    if "n_out" not in extras:
        raise DataError(f"checkpoint {path} lacks the output size record")
    model = Model(config, int(np.asarray(extras.pop("n_out")).reshape(())[()]))
    params = restore_params(model.zeros_params(dtype), named)
    return model, params, extras


class Gradients(Params):
    """Parameter gradients plus the gradient w.r.t. the input sequence."""

    def __init__(self, blocks, named, inputs):
        super().__init__(blocks, named)
        self.inputs = inputs


@dataclass
class UnrolledTape:
    """Everything the reverse sweep needs from one forward unroll."""

    inputs: np.ndarray       # (T, B, n_x), cast to the parameter dtype
    states: np.ndarray       # (T+1, B, n_h); row 0 is the zero initial state
    cell_states: object      # (T+1, B, n_h) for LSTM, else None
    traces: list             # per-step traces, index by t; [0] unused
    logits: np.ndarray       # (T, B, n_out); rows only at loss steps
    mask: np.ndarray         # (T, B) loss weights
    loss_steps: tuple        # t values with any nonzero mask
    prep: object             # cell.prepare output used by this unroll

    @property
    def T(self):
        return self.inputs.shape[0]

    def __post_init__(self):
        T = self.inputs.shape[0]
        if self.states.shape[0] != T + 1 or len(self.traces) != T + 1:
            raise UsageError("tape length mismatch between inputs, states, and traces")
        if self.logits.shape[0] != T or self.mask.shape[0] != T:
            raise UsageError("tape length mismatch between inputs and loss arrays")


class _TapeView:
    """Delayed-state reads for one step over the stored state arrays."""

    __slots__ = ("_hs", "_cs", "t")

    def __init__(self, hs, cs, t):
        self._hs = hs
        self._cs = cs
        self.t = t

    @property
    def next_t(self):
        return self.t

    def read(self, d):
        s = self.t - d
        return self._hs[s] if s > 0 else self._hs[0]

    h = read

    def read_cell(self):
        return self._cs[self.t - 1]

    c_prev = read_cell


def _as_batch_arrays(batch, dtype):
    x = np.asarray(batch.inputs)
    if x.ndim != 3:
        raise UsageError(f"inputs must be (T, batch, n_x), got shape {x.shape}")
    T, B, _ = x.shape
    if T == 0 or B == 0:
        raise UsageError("empty batch")
    targets = np.asarray(batch.targets)
    mask = np.asarray(batch.mask, dtype=np.float64)
    if targets.shape != (T, B) or mask.shape != (T, B):
        raise UsageError(
            f"targets/mask must be shaped (T, batch) = {(T, B)}, "
            f"got {targets.shape} and {mask.shape}")
    return x.astype(dtype, copy=False), targets, mask


def forward_sequence(model, params, loss_head, batch):
    """Unroll one batch; returns (loss, error_rate, tape).

    loss = sum over steps and examples of mask-weighted cross-entropy,
    divided by the batch size; error_rate = mask-weighted fraction of
    argmax misclassifications over the masked steps.
    """
    cell = model.cell
    dtype = params.dtype
    x, targets, mask = _as_batch_arrays(batch, dtype)
    T, B, n_x = x.shape
    if n_x != cell.n_x:
        raise UsageError(f"batch input dimension {n_x}, model expects {cell.n_x}")
    n_h = cell.n_h

    hs = np.zeros((T + 1, B, n_h), dtype=dtype)
    cs = np.zeros((T + 1, B, n_h), dtype=dtype) if cell.has_cell_state else None
    traces = [None] * (T + 1)
    prep = cell.prepare(params)
    for t in range(1, T + 1):
        out, trace = cell.step(prep, x[t - 1], _TapeView(hs, cs, t))
        if cell.has_cell_state:
            hs[t], cs[t] = out
        else:
            hs[t] = out
        traces[t] = trace

    Wy, by = loss_head.W_out, loss_head.b_out
    n_out = loss_head.n_out
    logits = np.zeros((T, B, n_out), dtype=dtype)
    loss_steps = tuple(int(t) + 1 for t in np.flatnonzero(np.any(mask != 0, axis=1)))
    rows = np.arange(B)
    # accumulate in the parameter dtype so higher-precision runs stay exact
    ce_sum = np.zeros((), dtype=dtype)[()]
    wrong_sum = 0.0
    for t in loss_steps:
        z = hs[t] @ Wy.T + by
        logits[t - 1] = z
        m = mask[t - 1]
        tt = targets[t - 1]
        if tt.min() < 0 or tt.max() >= n_out:
            raise UsageError(f"targets at step {t} outside [0, {n_out})")
        zmax = z.max(axis=1)
        lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
        ce_sum = ce_sum + (m * (lse - z[rows, tt])).sum()
        wrong_sum += float((m * (z.argmax(axis=1) != tt)).sum())
    loss = ce_sum / B
    mask_total = float(mask.sum())
    if mask_total > 0:
        err = wrong_sum / mask_total
    else:
        warnings.warn("loss mask selects no steps; error rate reported as 0", RuntimeWarning)
        err = 0.0
    tape = UnrolledTape(inputs=x, states=hs, cell_states=cs, traces=traces,
                        logits=logits, mask=mask, loss_steps=loss_steps, prep=prep)
    return loss, err, tape


def error_with_mask(tape, targets, mask):
    """Error rate under an alternative mask covering a subset of loss steps."""
    mask = np.asarray(mask, dtype=np.float64)
    targets = np.asarray(targets)
    steps = tuple(int(t) + 1 for t in np.flatnonzero(np.any(mask != 0, axis=1)))
    missing = set(steps) - set(tape.loss_steps)
    if missing:
        raise UsageError(f"mask covers steps {sorted(missing)} with no computed output")
    total = float(mask.sum())
    if total == 0:
        return 0.0
    wrong = 0.0
    for t in steps:
        pred = tape.logits[t - 1].argmax(axis=1)
        wrong += float((mask[t - 1] * (pred != targets[t - 1])).sum())
    return wrong / total


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _backward(model, tape, loss_head, targets, per_step, record_norms):
    cell = model.cell
    hs, cs = tape.states, tape.cell_states
    x, mask = tape.inputs, tape.mask
    T = tape.T
    B = hs.shape[1]
    dtype = hs.dtype
    targets = np.asarray(targets)
    if targets.shape != (T, B):
        raise UsageError(f"tape/targets length mismatch: tape T={T}, targets {targets.shape}")

    def fresh():
        return model.zeros_params(dtype)

    total = None if per_step else fresh()
    by_step = [None] * (T + 1) if per_step else None

    def grads_at(t):
        if not per_step:
            return total
        if by_step[t] is None:
            by_step[t] = fresh()
        return by_step[t]

    dH = np.zeros((T + 1, B, cell.n_h), dtype=dtype)
    dX = np.zeros_like(x)
    Wy = loss_head.W_out
    rows = np.arange(B)
    for t in tape.loss_steps:
        p = _softmax_rows(tape.logits[t - 1])
        p[rows, targets[t - 1]] -= 1.0
        dY = p * (mask[t - 1][:, None] / B).astype(dtype)
        g = grads_at(t)
        g.blocks["Wy"] += dY.T @ hs[t]
        g.blocks["by"] += dY.sum(axis=0)
        dH[t] += dY @ Wy

    norms = np.zeros(T + 1) if record_norms else None
    dc = None
    for t in range(T, 0, -1):
        if record_norms:
            norms[t] = float(np.linalg.norm(dH[t], axis=1).mean())
        view = _TapeView(hs, cs, t)
        dstates, dc_prev, dx = cell.backward_step(
            tape.prep, t, x[t - 1], view, tape.traces[t], dH[t], dc, grads_at(t))
        for d, g in dstates.items():
            s = t - d
            if s >= 1:
                dH[s] += g
        dc = dc_prev
        dX[t - 1] = dx
    return total, by_step, dX, norms


def backward_sequence(model, tape, loss_head, targets):
    """Exact gradient of the masked loss w.r.t. all parameters and inputs."""
    total, _, dX, _ = _backward(model, tape, loss_head, targets, False, False)
    return Gradients(total.blocks, total.named, dX)


def backward_decomposed(model, tape, loss_head, targets):
    """Per-unroll-step parameter-gradient contributions, indexed by step t.

    Entry t holds exactly the gradient mass accumulated while processing
    step t (head terms included at their own step); entries sum to the
    backward_sequence total.  Index 0 is unused.
    """
    _, by_step, _, _ = _backward(model, tape, loss_head, targets, True, False)
    for t in range(1, len(by_step)):
        if by_step[t] is None:
            by_step[t] = model.zeros_params(tape.states.dtype)
    return by_step


def backward_with_state_norms(model, tape, loss_head, targets):
    """Backward pass that also records mean per-example ||dloss/dh_s||.

    Returns (Gradients, norms) where norms[s] is the Euclidean norm of the
    fully accumulated gradient w.r.t. h_s, averaged over the batch; index 0
    is unused.
    """
    total, _, dX, norms = _backward(model, tape, loss_head, targets, False, True)
    return Gradients(total.blocks, total.named, dX), norms


# ---------------------------------------------------------------------------
# optimization

def global_norm(arrays):
    return math.sqrt(sum(float((np.asarray(a) ** 2).sum()) for a in arrays))


@dataclass
class OptimizerState:
    """Momentum SGD state: velocity buffers mirror the parameter blocks."""

    lr: float
    momentum: float = 0.9
    clip_norm: float = 1.0
    velocity: dict = field(default_factory=dict)
    last_grad_norm: float = 0.0

    @classmethod
    def for_params(cls, params, lr, momentum=0.9, clip_norm=1.0):
        vel = {name: np.zeros_like(blk) for name, blk in params.blocks.items()}
        return cls(lr=lr, momentum=momentum, clip_norm=clip_norm, velocity=vel)


def clip_and_update(opt, params, grads):
    """Global-norm clip, then v <- m*v - lr*g and theta <- theta + v."""
    gn = global_norm([grads.blocks[name] for name in params.blocks])
    if not math.isfinite(gn):
        raise NumericError(f"non-finite gradient norm {gn}")
    opt.last_grad_norm = gn
    scale = 1.0
    if opt.clip_norm is not None and gn > opt.clip_norm:
        scale = opt.clip_norm / gn
    step = opt.lr * scale
    for name, blk in params.blocks.items():
        v = opt.velocity[name]
        v *= opt.momentum
        v -= step * grads.blocks[name]
        blk += v
    return params


# ---------------------------------------------------------------------------
# evaluation and trials

@dataclass
class EvalResult:
    loss: float
    err: float
    extra_errs: dict = field(default_factory=dict)


def evaluate(model, params, loss_head, batches):
    """Aggregate loss/error over batches, plus any auxiliary-mask errors."""
    batches = list(batches)
    if not batches:
        raise UsageError("no evaluation batches")
    ce_total = 0.0
    n_total = 0
    mask_total = 0.0
    wrong_total = 0.0
    aux_wrong = {}
    aux_total = {}
    for batch in batches:
        loss, _, tape = forward_sequence(model, params, loss_head, batch)
        B = tape.states.shape[1]
        ce_total += loss * B
        n_total += B
        msum = float(tape.mask.sum())
        mask_total += msum
        wrong_total += error_with_mask(tape, batch.targets, tape.mask) * msum
        for name, am in getattr(batch, "aux_masks", {}).items():
            asum = float(np.asarray(am).sum())
            aux_wrong[name] = aux_wrong.get(name, 0.0) + error_with_mask(tape, batch.targets, am) * asum
            aux_total[name] = aux_total.get(name, 0.0) + asum
    err = wrong_total / mask_total if mask_total > 0 else 0.0
    extra = {name: (aux_wrong[name] / aux_total[name] if aux_total[name] > 0 else 0.0)
             for name in aux_wrong}
    return EvalResult(loss=ce_total / n_total, err=err, extra_errs=extra)


@dataclass
class TrainSettings:
    """Knobs for one trial; lr=None samples log10(lr) ~ U[lr_log10_range]."""

    lr: float = None
    lr_log10_range: tuple = (-4.0, 1.0)
    momentum: float = 0.9
    clip_norm: float = 1.0
    batch_size: int = 100
    max_epochs: int = 50
    max_updates: int = None
    eval_batch_size: int = 500
    precision: str = "float64"
    stop_below: float = None
    plateau_patience: int = None


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_err: float
    extra_errs: dict = field(default_factory=dict)


@dataclass
class TrialRecord:
    """One randomized trial: sampled learning rate, per-epoch metrics, outcome.

    best_val is the validation ranking metric (the task's rank_key) at its
    best epoch; test_err is measured once with the best-epoch parameters.
    """

    seed: int
    log10_lr: float
    rows: list = field(default_factory=list)
    status: str = "ok"
    best_val: float = math.inf
    best_epoch: int = 0
    test_err: float = None
    test_extra: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    best_params: object = None


def _rank_metric(task, result):
    key = getattr(task, "rank_key", "err")
    if key == "err":
        return result.err
    return result.extra_errs[key]


def run_trial(config, task, trial_seed, settings=None, keep_params=False):
    """Train one randomized trial; divergence marks it failed, not crashed."""
    settings = settings or TrainSettings()
    model = Model(config, task.n_out)
    dtype = nk.resolve_dtype(settings.precision)
    if settings.lr is not None:
        log10_lr = math.log10(settings.lr)
    else:
        log10_lr = float(nk.make_rng(trial_seed, 0).uniform(*settings.lr_log10_range))
    params = model.init_params(nk.make_rng(trial_seed, 1), dtype)
    head = model.loss_head(params, mode=getattr(task, "loss_mode", "per_step"))
    opt = OptimizerState.for_params(params, 10.0 ** log10_lr,
                                    settings.momentum, settings.clip_norm)
    record = TrialRecord(seed=trial_seed, log10_lr=log10_lr)
    best_params = model.zeros_params(dtype)
    stall = 0
    updates = 0
    t0 = time.monotonic()
    try:
        for epoch in range(1, settings.max_epochs + 1):
            ep_rng = nk.make_rng(trial_seed, 2, epoch)
            train_sum = 0.0
            train_n = 0
            for batch in task.epoch_batches(settings.batch_size, ep_rng):
                loss, _, tape = forward_sequence(model, params, head, batch)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite training loss at update {updates + 1}")
                grads = backward_sequence(model, tape, head, batch.targets)
                clip_and_update(opt, params, grads)
                train_sum += loss
                train_n += 1
                updates += 1
                if settings.max_updates is not None and updates >= settings.max_updates:
                    break
            val = evaluate(model, params, head, task.val_batches(settings.eval_batch_size))
            metric = _rank_metric(task, val)
            record.rows.append(EpochRow(epoch, train_sum / max(train_n, 1),
                                        val.loss, val.err, dict(val.extra_errs)))
            if metric < record.best_val:
                record.best_val = metric
                record.best_epoch = epoch
                best_params.copy_from(params)
                stall = 0
            else:
                stall += 1
            if settings.stop_below is not None and metric < settings.stop_below:
                break
            if settings.plateau_patience is not None and stall >= settings.plateau_patience:
                break
            if settings.max_updates is not None and updates >= settings.max_updates:
                break
    except NumericError:
        record.status = "failed"
        record.best_val = math.inf
    if record.status == "ok" and record.best_epoch > 0:
        test = list(task.test_batches(settings.eval_batch_size))
        if test:
            res = evaluate(model, best_params, head, test)
            record.test_err = res.err
            record.test_extra = dict(res.extra_errs)
        if keep_params:
            record.best_params = best_params
    record.wall_time_s = time.monotonic() - t0
    return record


def train_updates(config, task, n_updates, *, lr, trial_seed=0, settings=None):
    """Run exactly n_updates optimizer steps; returns (model, params).

    Used to produce early-training checkpoints for the gradient probes.
    """
    settings = settings or TrainSettings()
    model = Model(config, task.n_out)
    dtype = nk.resolve_dtype(settings.precision)
    params = model.init_params(nk.make_rng(trial_seed, 1), dtype)
    head = model.loss_head(params, mode=getattr(task, "loss_mode", "per_step"))
    opt = OptimizerState.for_params(params, lr, settings.momentum, settings.clip_norm)
    updates = 0
    epoch = 0
    while updates < n_updates:
        epoch += 1
        for batch in task.epoch_batches(settings.batch_size, nk.make_rng(trial_seed, 2, epoch)):
            loss, _, tape = forward_sequence(model, params, head, batch)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at update {updates + 1}")
            grads = backward_sequence(model, tape, head, batch.targets)
            clip_and_update(opt, params, grads)
            updates += 1
            if updates >= n_updates:
                break
    return model, params


def select_top_trials(records, k, ddof=1):
    """Rank trials by validation metric (ties by seed); summarize test error.

    Returns (top_records, mean_test_err, std_test_err).  The std convention
    is selectable; reporting defaults to the sample convention (ddof=1).
    Mean/std are None when the selected trials carry no test error.
    """
    records = list(records)
    if not records:
        raise UsageError("no trial records to select from")
    if k < 1 or k > len(records):
        raise UsageError(f"k={k} must be in [1, {len(records)}]")
    ranked = sorted(records, key=lambda r: (r.best_val, r.seed))
    top = ranked[:k]
    tests = [r.test_err for r in top if r.test_err is not None]
    if not tests:
        return top, None, None
    mean = float(np.mean(tests))
    std = float(np.std(tests, ddof=ddof)) if len(tests) > ddof else 0.0
    return top, mean, std
