"""Analysis instruments for gradient propagation over delayed connections.

Two kinds of evidence about how far learning signal travels:

* analytic: shortest paths in the unrolled delay graph (minimum number of
  edges whose delays sum to a distance tau) and the lambda^edges decay
  bound they induce;
* empirical: the gradient-norm profile ||dloss_T / dh_{T-tau}|| measured by
  an exact backward sweep at a training checkpoint, averaged per example
  over a batch.

The per-step gradient decomposition check ties the two views together: the
sum of per-step contributions must reproduce the total gradient exactly.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import engine
from .errors import UsageError


@dataclass(frozen=True)
class DelayGraph:
    """Uniform-in-time delay edges: every state t receives h_{t-d} per delay d."""

    delays: tuple

    def __post_init__(self):
        delays = tuple(int(d) for d in self.delays)
        if not delays:
            raise UsageError("delay set must be nonempty")
        if any(d < 1 for d in delays):
            raise UsageError(f"delays must all be >= 1, got {delays}")
        if list(delays) != sorted(set(delays)):
            raise UsageError(f"delays must be strictly increasing, got {delays}")
        object.__setattr__(self, "delays", delays)


UNREACHABLE = -1


def shortest_path_lengths(graph, tau_max):
    """Minimum edge counts to span each distance tau = 0..tau_max, by BFS.

    lengths[tau] is the minimum number of delays (with repetition) summing
    to tau, or UNREACHABLE (-1) when no combination exists (possible only
    without a delay of 1).
    """
    if tau_max < 0:
        raise UsageError(f"tau_max must be nonnegative, got {tau_max}")
    lengths = np.full(tau_max + 1, UNREACHABLE, dtype=np.int64)
    lengths[0] = 0
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for d in graph.delays:
            w = v + d
            if w <= tau_max and lengths[w] == UNREACHABLE:
                lengths[w] = lengths[v] + 1
                queue.append(w)
    return lengths


def base2_min_edges(tau, d_max):
    """Closed form for the delay family {1, 2, 4, ..., d_max}.

    Greedily spend d_max edges, then cover the remainder by its binary
    expansion; carrying arguments show no shorter combination exists.
    """
    q, r = divmod(int(tau), int(d_max))
    return q + int(bin(r).count("1"))


def predicted_length(delays, tau):
    """Closed-form shortest-path prediction for the structured delay families.

    Returns None for delay sets with no simple formula.
    """
    ds = tuple(int(d) for d in delays)
    if ds == tuple(2 ** i for i in range(len(ds))):
        return base2_min_edges(tau, ds[-1])
    if ds == tuple(range(1, len(ds) + 1)):
        return -(-int(tau) // ds[-1])
    return None


def decay_bound(lam, lengths):
    """Single-path decay bound lambda^length per distance; NaN if unreachable."""
    if lam <= 0:
        raise UsageError(f"decay factor must be positive, got {lam}")
    lengths = np.asarray(lengths)
    out = np.where(lengths >= 0, float(lam) ** np.maximum(lengths, 0), np.nan)
    return out


@dataclass
class GradientProfile:
    """Mean gradient norm into h_{T-tau} for tau = 1..T-1 at one checkpoint."""

    arch: str
    taus: np.ndarray
    norms: np.ndarray
    checkpoint: str = ""

    def __post_init__(self):
        if self.taus.shape != self.norms.shape:
            raise UsageError("profile tau/norm length mismatch")
        if np.any(self.norms < 0):
            raise UsageError("profile norms must be nonnegative")


def probe_gradient_norms(model, params, batch, checkpoint=""):
    """Measure ||dloss_T / dh_{T-tau}|| for tau = 1..T-1 on one batch.

    The loss attaches at the final step only; the recorded quantity is the
    fully accumulated gradient flowing into each hidden state (gradient
    w.r.t. h, not the LSTM cell state), as a per-example Euclidean norm
    averaged over the batch.
    """
    mask = np.asarray(batch.mask)
    if np.any(mask[:-1] != 0) or not np.any(mask[-1] != 0):
        raise UsageError("gradient probe requires the loss mask on the final step only")
    head = model.loss_head(params, mode="final_step")
    _, _, tape = engine.forward_sequence(model, params, head, batch)
    _, norms = engine.backward_with_state_norms(model, tape, head, batch.targets)
    T = tape.T
    taus = np.arange(1, T)
    return GradientProfile(arch=model.config.arch, taus=taus,
                           norms=norms[T - taus], checkpoint=checkpoint)


def decomposition_check(model, params, head, batch):
    """Compare summed per-step gradient contributions with the direct total.

    Returns the worst per-block relative error ||sum - total|| / ||total||
    (blocks with zero total must have zero sum).
    """
    _, _, tape = engine.forward_sequence(model, params, head, batch)
    total = engine.backward_sequence(model, tape, head, batch.targets)
    by_step = engine.backward_decomposed(model, tape, head, batch.targets)
    worst = 0.0
    for name, ref in total.blocks.items():
        summed = np.zeros_like(ref)
        for g in by_step[1:]:
            summed += g.blocks[name]
        diff = float(np.linalg.norm(summed - ref))
        denom = float(np.linalg.norm(ref))
        if denom == 0.0:
            worst = max(worst, np.inf if diff > 0 else 0.0)
        else:
            worst = max(worst, diff / denom)
    return worst
