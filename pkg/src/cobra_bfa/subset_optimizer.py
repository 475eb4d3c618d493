"""Randomized exclusionary reduction of a flip set, plus an exhaustive oracle.

Each iteration tries up to ``patterns_per_iteration`` random exclusions of
1..floor(|I|/2) locations and accepts the first one whose remaining set keeps
the loss within ``epsilon`` of the initial set's loss. The search stops after
an iteration with no accepted exclusion, or after ``max_iterations``.

Random draws come from a Philox stream keyed by ``(seed, t, i)``, so a given
attempt sees the same randomness regardless of evaluation order.
"""

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, OracleTooLargeError
from .fault_injector import FlipSet
from .sensitivity import LossEvaluator

ORACLE_CAP = 15


@dataclass
class ReductionConfig:
    epsilon: float = 1.0
    max_iterations: int = 100
    patterns_per_iteration: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise InputError("epsilon must be >= 0")
        if self.max_iterations < 1 or self.patterns_per_iteration < 1:
            raise InputError("iteration counts must be >= 1")


@dataclass
class ReductionResult:
    reduced: FlipSet
    trace: list                 # (t, subset_size, loss) per iteration
    loss_orig: float
    final_loss: float           # re-measured after the loop
    feasible: bool
    evaluations: int = 0
    attempts: list = field(default_factory=list, repr=False)


def attempt_rng(seed, t, i):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(t), int(i)])))


def draw_exclusion(size, seed, t, i):
    """Indices (into the current ordered set) to drop for attempt ``(t, i)``."""
    rng = attempt_rng(seed, t, i)
    if size <= 1:
        return list(range(size))
    n_exc = int(rng.integers(1, size // 2 + 1))
    return sorted(int(j) for j in rng.choice(size, size=n_exc, replace=False))


def exclusionary_reduce(loss_fn, i_init, cfg):
    """Core of the reduction; ``loss_fn(FlipSet)`` returns an object with ``.loss``."""
    current = FlipSet(i_init)
    if len(current) == 0:
        raise InputError("initial flip set is empty")
    loss_orig = loss_fn(current).loss
    floor = loss_orig - cfg.epsilon
    current_loss = loss_orig
    trace = []
    t = 0
    improved = True
    while improved and t < cfg.max_iterations and len(current) > 0:
        improved = False
        t += 1
        locs = current.locations
        for i in range(cfg.patterns_per_iteration):
            drop = draw_exclusion(len(locs), cfg.rng_seed, t, i)
            test = FlipSet(l for j, l in enumerate(locs) if j not in drop)
            l_test = loss_fn(test).loss
            if l_test >= floor:
                current, current_loss, improved = test, l_test, True
                break
        trace.append((t, len(current), current_loss))
    final = loss_fn(current).loss
    return ReductionResult(current, trace, loss_orig, final, final >= floor)


def reduce_subset(model, i_init, cfg, batch=None, evaluator=None):
    """Shrink ``i_init`` while keeping its BFlipLoss within ``cfg.epsilon``."""
    evaluator = evaluator or LossEvaluator(model, batch)
    before = getattr(evaluator, "calls", 0)
    res = exclusionary_reduce(evaluator, i_init, cfg)
    res.evaluations = getattr(evaluator, "calls", 0) - before
    return res


def brute_force_min_subset(model, i_init, epsilon, batch=None, loss_orig=None):
    """All minimum-cardinality subsets ``I`` of ``i_init`` with ``L(I) >= L(i_init) - epsilon``.

    ``model`` is an encoded model (measured on ``batch``) or any callable
    returning an object with ``.loss``. Subsets are enumerated by increasing size.
    """
    loss_fn = model if callable(model) else LossEvaluator(model, batch)
    full = FlipSet(i_init)
    if len(full) > ORACLE_CAP:
        raise OracleTooLargeError(f"|I_init| = {len(full)} exceeds the oracle cap of {ORACLE_CAP}")
    if loss_orig is None:
        loss_orig = loss_fn(full).loss
    floor = loss_orig - epsilon
    for size in range(len(full) + 1):
        hits = [FlipSet(c) for c in itertools.combinations(full.locations, size) if loss_fn(FlipSet(c)).loss >= floor]
        if hits:
            return hits
    return [full]  # unreachable: the full set always qualifies


def trace_csv(trace):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "subset_size", "loss"])
    for t, size, loss in trace:
        w.writerow([t, size, repr(float(loss))])
    return buf.getvalue()
