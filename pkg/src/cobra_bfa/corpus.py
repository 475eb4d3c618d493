"""Synthetic order-2 Markov corpus used as the victim's training target.

The transition law is a dense order-2 table built from a sparse skeleton: the
previous token ``b`` owns ``branching`` successor slots, and the token before
it (``a``) picks which slot via a fixed random bucket map. With probability
``1 - noise`` the chain follows that successor, otherwise it moves uniformly.
Order-1 statistics alone therefore leave ``log(branching)`` nats of ambiguity
that only the two-token context resolves.
"""

from dataclasses import dataclass

import numpy as np

from .ssm_model import TokenBatch


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 32
    transition_seed: int = 1234
    num_sequences: int = 64
    seq_len: int = 32
    branching: int = 2
    noise: float = 0.05
    sample_seed: int = 1
    calibration_seed: int = 2
    calibration_sequences: int = 32
    heldout_seed: int = 3
    heldout_sequences: int = 64


def transition_table(spec):
    """Dense (V, V, V) table P[a, b, next]."""
    V = spec.vocab_size
    rng = np.random.default_rng(np.random.SeedSequence([spec.transition_seed, 0]))
    successors = np.stack([rng.choice(V, size=spec.branching, replace=False) for _ in range(V)])
    bucket = rng.integers(0, spec.branching, size=V)
    P = np.full((V, V, V), spec.noise / V)
    for a in range(V):
        for b in range(V):
            P[a, b, successors[b, bucket[a]]] += 1.0 - spec.noise
    return P


def sample_streams(spec, num_sequences, seed):
    """Draw ``num_sequences`` token streams of length ``seq_len + 1``."""
    P = transition_table(spec)
    cdf = np.cumsum(P, axis=-1)
    cdf[..., -1] = 1.0
    rng = np.random.default_rng(np.random.SeedSequence([spec.transition_seed, 1, seed]))
    L = spec.seq_len + 1
    out = np.empty((num_sequences, L), dtype=np.int64)
    out[:, :2] = rng.integers(0, spec.vocab_size, size=(num_sequences, 2))
    for t in range(2, L):
        u = rng.random(num_sequences)
        rows = cdf[out[:, t - 2], out[:, t - 1]]
        out[:, t] = np.minimum((rows < u[:, None]).sum(axis=1), spec.vocab_size - 1)
    return out


def training_batch(spec):
    return TokenBatch.from_streams(sample_streams(spec, spec.num_sequences, spec.sample_seed))


def calibration_batch(spec):
    """Fixed batch every BFlipLoss call is measured on."""
    return TokenBatch.from_streams(sample_streams(spec, spec.calibration_sequences, spec.calibration_seed))


def heldout_batch(spec):
    """Evaluation batch; rows that also occur in the calibration batch are dropped."""
    held = sample_streams(spec, spec.heldout_sequences, spec.heldout_seed)
    calib = {tuple(r) for r in sample_streams(spec, spec.calibration_sequences, spec.calibration_seed)}
    keep = np.array([tuple(r) not in calib for r in held])
    return TokenBatch.from_streams(held[keep])


def entropy_rate(spec):
    """Conditional entropy (nats) of the next token given the full order-2 context."""
    P = transition_table(spec)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(P > 0, P * np.log(P), 0.0), axis=-1)
    return float(h.mean())
