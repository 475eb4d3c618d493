"""Hybrid sensitivity scoring, per-layer ranking, and initial flip-set selection.

A *layer* here is one named tensor (``blocks.1.A_log``, ``lm_head``, ...). For
every visible, attackable layer the top-k weights by hybrid score get their
attack bit flipped together and the resulting loss ranks the layer.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import numeric_formats as nf
from .errors import ConfigError, SelectionError
from .fault_injector import BitLocation, FlipSet, at_bit, bflip_eval, flip_efficiency
from .ssm_model import block_index, layer_type

DEFAULT_ATTACKABLE = ("embedding", "W_in", "W_proj", "W_delta", "A_log", "D", "W_out", "conv", "lm_head")


@dataclass
class SensitivityConfig:
    alpha: float = 0.5
    rate_r: float = 0.1
    top_n_layers: int = 1
    loss_threshold: float = 10.0
    # "all", an int k (last k blocks), or an explicit list of tensor names
    visible_layers: object = "all"
    attackable_types: tuple = DEFAULT_ATTACKABLE
    # how many score-ordered weights of the top layer the cutoff search may use
    max_candidates: int = 32

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.rate_r > 0:
            raise ConfigError(f"rate_r must be positive, got {self.rate_r}")
        if self.top_n_layers < 1 or self.max_candidates < 1:
            raise ConfigError("top_n_layers and max_candidates must be >= 1")
        self.attackable_types = tuple(self.attackable_types)


@dataclass
class LayerSensitivityRecord:
    layer_id: str
    layer_type: str
    k_used: int
    loss_after_flips: float
    efficiency: float
    selected_indices: list
    nonfinite: bool = False
    # score-ordered weight indices available to the initial-subset cutoff
    candidates: list = field(default_factory=list, repr=False)


class LossEvaluator:
    """Memoizing BFlipLoss over a fixed encoded model and calibration batch."""

    def __init__(self, model, batch):
        self.model = model
        self.batch = batch
        self.calls = 0
        self._memo = {}

    def __call__(self, flips):
        flips = flips if isinstance(flips, FlipSet) else FlipSet(flips)
        hit = self._memo.get(flips)
        if hit is None:
            self.calls += 1
            hit = self._memo[flips] = bflip_eval(self.model, flips, self.batch)
        return hit


def hybrid_score(W, gradW, alpha):
    """``alpha*|grad| + (1-alpha)*|W|``; ``gradW`` may be ``None`` only when alpha is 0."""
    W = np.asarray(W, dtype=np.float64)
    if gradW is None:
        if alpha != 0:
            raise ConfigError("gradient-free scoring requires alpha = 0")
        return np.abs(W)
    gradW = np.asarray(gradW, dtype=np.float64)
    if gradW.shape != W.shape:
        raise ConfigError(f"gradient shape {gradW.shape} differs from weight shape {W.shape}")
    if alpha == 0:
        return np.abs(W)
    return alpha * np.abs(gradW) + (1.0 - alpha) * np.abs(W)


def topk_count(cardinality, rate_r):
    """``floor(cardinality * r / 100)``, never below 1."""
    if not rate_r > 0:
        raise ConfigError("rate must be positive")
    # exact decimal arithmetic: 0.57 * 100 must not floor to 56
    k = math.floor(Fraction(int(cardinality)) * Fraction(repr(float(rate_r))) / 100)
    return max(1, k)


def select_topk(scores, k):
    """Flat indices of the k largest scores, descending; ties by ascending index."""
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise SelectionError("cannot select from an empty tensor")
    if k < 1:
        raise SelectionError("k must be >= 1")
    keyed = np.where(np.isnan(flat), -np.inf, flat)
    order = np.argsort(-keyed, kind="stable")
    return [int(i) for i in order[:k]]


def visible_tensors(names, cfg, num_blocks):
    """Tensor names that pass the visibility filter and the attackable-type filter."""
    vis = cfg.visible_layers
    if vis == "all" or vis is None:
        keep = list(names)
    elif isinstance(vis, (int, np.integer)) and not isinstance(vis, bool):
        if vis < 1:
            raise ConfigError("gray-box block count must be >= 1")
        first = num_blocks - int(vis)
        keep = [n for n in names if block_index(n) is not None and block_index(n) >= first]
    else:
        wanted = set(vis)
        unknown = wanted - set(names)
        if unknown:
            raise ConfigError(f"unknown visible layers: {sorted(unknown)}")
        keep = [n for n in names if n in wanted]
    return [n for n in keep if layer_type(n) in cfg.attackable_types]


def attack_bit(model, override=None):
    return nf.msb_position(model.kind) if override is None else int(override)


def rank_layers(model, grads, cfg, batch=None, bit=None, evaluator=None):
    """Score, flip and rank every visible layer.

    Returns ``(records, I_init)`` where records are sorted by loss descending
    (ties by layer id) and ``I_init`` is the flip set drawn from the top
    ``cfg.top_n_layers`` records.
    """
    evaluator = evaluator or LossEvaluator(model, batch)
    params = model.decoded()
    names = visible_tensors(list(params.named_tensors()), cfg, params.config.num_blocks)
    if not names:
        raise ConfigError("no visible attackable layers")
    if cfg.alpha > 0 and grads is None:
        raise ConfigError("alpha > 0 needs gradients; use alpha = 0 for gradient-free mode")
    bit = attack_bit(model, bit)
    baseline = evaluator(FlipSet()).loss

    records = []
    for name in names:
        W = params.named_tensors()[name]
        S = hybrid_score(W, None if grads is None or cfg.alpha == 0 else grads[name], cfg.alpha)
        k = topk_count(W.size, cfg.rate_r)
        chosen = select_topk(S, k)
        ev = evaluator(at_bit(((name, i) for i in chosen), bit))
        records.append(LayerSensitivityRecord(
            layer_id=name,
            layer_type=layer_type(name),
            k_used=len(chosen),
            loss_after_flips=ev.loss,
            efficiency=flip_efficiency(ev.loss, baseline, len(chosen)),
            selected_indices=chosen,
            nonfinite=ev.nonfinite,
            candidates=select_topk(S, max(cfg.max_candidates, len(chosen))),
        ))
    records = sort_records(records)
    i_init = FlipSet(BitLocation(r.layer_id, i, bit) for r in records[:cfg.top_n_layers] for i in r.selected_indices)
    return records, i_init


def sort_records(records):
    return sorted(records, key=lambda r: (-r.loss_after_flips, r.layer_id))


@dataclass
class InitialSubset:
    locations: list          # ordered by descending score
    prefix_losses: list      # loss after each evaluated prefix length (1-based)
    crossing: int            # prefix length first reaching the threshold (None if never)
    operating_point: int
    loss: float
    reached: bool

    @property
    def flips(self):
        return FlipSet(self.locations)


def select_initial_subset(record, cfg, batch=None, model=None, bit=None, evaluator=None):
    """Grow a prefix of the layer's score-ordered weights until the loss crosses the threshold.

    From the first prefix with loss >= threshold, extend to the smallest prefix
    with loss >= 2*threshold, looking at most 3 flips further. If no prefix in
    that window reaches 2*threshold, keep the longest one that still clears the
    threshold. When no prefix reaches the threshold, return the best prefix with
    ``reached=False``.
    """
    evaluator = evaluator or LossEvaluator(model, batch)
    if bit is None:
        bit = attack_bit(model) if model is not None else attack_bit(evaluator.model)
    cands = list(record.candidates or record.selected_indices)[:max(cfg.max_candidates, 1)]
    locs = [BitLocation(record.layer_id, int(i), int(bit)) for i in cands]
    thr = cfg.loss_threshold

    losses = []
    crossing = None
    for p in range(1, len(locs) + 1):
        losses.append(evaluator(locs[:p]).loss)
        if losses[-1] >= thr:
            crossing = p
            break

    if crossing is None:
        best = int(np.argmax(losses)) + 1
        return InitialSubset(locs[:best], losses, None, best, losses[best - 1], False)

    stop = min(crossing + 3, len(locs))
    op = None
    for p in range(crossing, stop + 1):
        if p > len(losses):
            losses.append(evaluator(locs[:p]).loss)
        if losses[p - 1] >= 2 * thr:
            op = p
            break
    if op is None:
        op = max(p for p in range(crossing, stop + 1) if losses[p - 1] >= thr)
    return InitialSubset(locs[:op], losses, crossing, op, losses[op - 1], True)


def records_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_id", "type", "k", "loss", "efficiency", "nonfinite"])
    for r in records:
        w.writerow([r.layer_id, r.layer_type, r.k_used, repr(float(r.loss_after_flips)),
                    repr(float(r.efficiency)), int(r.nonfinite)])
    return buf.getvalue()
