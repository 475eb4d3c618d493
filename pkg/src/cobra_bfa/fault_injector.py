"""Bit addresses, flip sets, and the BFlipLoss primitive.

Flips are applied through an overlay: only the words of touched tensors are
copied and re-decoded, the shared base model is never written. Losses from
non-finite logits are mapped to :data:`SATURATED_LOSS` so that search code has
a total order to compare against; the raw non-finite flag is kept alongside.
"""

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numeric_formats as nf
from .errors import AddressError, InputError, UndefinedEfficiencyError
from .ssm_model import ModelParams, cross_entropy, forward_logits

SATURATED_LOSS = 1e9
# largest finite loss kept distinct from (and below) the saturated value
_FINITE_CAP = float(np.nextafter(SATURATED_LOSS, 0.0))


class BitLocation(NamedTuple):
    layer_id: str
    weight_index: int
    bit: int

    def to_json(self):
        return {"tensor": self.layer_id, "index": int(self.weight_index), "bit": int(self.bit)}

    @classmethod
    def from_json(cls, d):
        return cls(str(d["tensor"]), int(d["index"]), int(d["bit"]))


class FlipSet:
    """Duplicate-free set of bit locations kept in canonical (sorted) order."""

    __slots__ = ("locations",)

    def __init__(self, locations=()):
        locs = [BitLocation(str(l[0]), int(l[1]), int(l[2])) for l in locations]
        if len(set(locs)) != len(locs):
            raise InputError("flip set contains duplicate locations")
        self.locations = tuple(sorted(locs))

    def __iter__(self):
        return iter(self.locations)

    def __len__(self):
        return len(self.locations)

    def __contains__(self, loc):
        return loc in self.locations

    def __eq__(self, other):
        return isinstance(other, FlipSet) and self.locations == other.locations

    def __hash__(self):
        return hash(self.locations)

    def __repr__(self):
        return f"FlipSet({list(self.locations)!r})"

    def union(self, other):
        return FlipSet(set(self.locations) | set(other))

    def difference(self, other):
        drop = set(other)
        return FlipSet(l for l in self.locations if l not in drop)

    def by_tensor(self):
        out = {}
        for loc in self.locations:
            out.setdefault(loc.layer_id, []).append(loc)
        return out

    def to_json(self):
        return json.dumps([l.to_json() for l in self.locations], indent=1)

    @classmethod
    def from_json(cls, text):
        return cls(BitLocation.from_json(d) for d in json.loads(text))


def at_bit(pairs, bit):
    """Turn ``(tensor, index)`` pairs into a FlipSet at one bit position."""
    return FlipSet(BitLocation(t, int(i), int(bit)) for t, i in pairs)


def validate(model, flips):
    for loc in flips:
        t = model.tensors.get(loc.layer_id)
        if t is None:
            raise AddressError(f"unknown tensor {loc.layer_id!r}")
        if not 0 <= loc.weight_index < t.size:
            raise AddressError(f"{loc.layer_id}[{loc.weight_index}] outside [0, {t.size})")
        if not 0 <= loc.bit < t.fmt.width:
            raise AddressError(f"bit {loc.bit} outside [0, {t.fmt.width}) for {loc.layer_id}")


def _flipped_words(tensor, locs):
    words = tensor.words.copy()
    for loc in locs:
        words[loc.weight_index] = nf.flip_bit_in_word(words[loc.weight_index], loc.bit, tensor.fmt)
    return words


class FlipOverlay:
    """Read-through view of an encoded model with a pending flip set applied."""

    def __init__(self, base, flips):
        flips = flips if isinstance(flips, FlipSet) else FlipSet(flips)
        validate(base, flips)
        self.base = base
        self.pending = flips

    def words(self, name):
        locs = self.pending.by_tensor().get(name)
        if not locs:
            return self.base.tensors[name].words
        return _flipped_words(self.base.tensors[name], locs)

    def params(self):
        base = self.base.decoded()
        touched = self.pending.by_tensor()
        if not touched:
            return base
        tensors = dict(base.named_tensors())
        for name, locs in touched.items():
            tensors[name] = self.base.decode_tensor(name, _flipped_words(self.base.tensors[name], locs))
        return ModelParams.from_named(base.config, tensors)


@dataclass(frozen=True)
class FlipEvaluation:
    loss: float           # saturated, always finite
    raw_loss: float       # as computed; may be inf
    nonfinite: bool


def saturate(loss):
    loss = float(loss)
    if not np.isfinite(loss):
        return SATURATED_LOSS
    return min(loss, _FINITE_CAP)


def evaluate_params(params, batch):
    raw = cross_entropy(forward_logits(params, batch), batch.targets)
    return FlipEvaluation(saturate(raw), raw, not np.isfinite(raw))


def bflip_eval(model, flips, batch):
    return evaluate_params(FlipOverlay(model, flips).params(), batch)


def bflip_loss(model, flips, batch):
    """Saturated cross-entropy of ``model`` with ``flips`` applied; ``model`` is untouched."""
    return bflip_eval(model, flips, batch).loss


def flip_efficiency(loss_after, loss_before, n_flips):
    """Loss increase per flipped bit, on the saturated scale."""
    if n_flips < 1:
        raise UndefinedEfficiencyError("efficiency needs at least one flip")
    return (saturate(loss_after) - saturate(loss_before)) / n_flips


def apply_flips_destructive(model, flips):
    """XOR ``flips`` into ``model``'s words; applying the same set twice restores it."""
    flips = flips if isinstance(flips, FlipSet) else FlipSet(flips)
    validate(model, flips)
    for name, locs in flips.by_tensor().items():
        model.replace_words(name, _flipped_words(model.tensors[name], locs))
    return model
