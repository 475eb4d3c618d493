"""Toy Mamba-style language model: parameters, forward pass, loss and metrics.

Each block computes

    xn  = rmsnorm(x) * norm_scale
    u   = xn @ W_in                       (optional depthwise causal conv on u)
    p   = u @ W_proj  ->  (B_raw | C_raw | delta_low)   widths (n, n, r)
    dt  = softplus(delta_low @ W_delta)
    y   = scan(u, dt, A=-exp(A_log), B_raw, C_raw, D)
    x   = x + y @ W_out

and the head is ``rmsnorm(x) * final_norm_scale @ lm_head``. The scan uses the
Euler update ``h <- (1 + dt*A) * h + dt*B*u`` with A diagonal per channel, and
reads out with the *updated* state: ``y = C.h + D*u``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, EvaluationError, InputError, MalformedParameterError

RMS_EPS = 1e-6
A_INIT_LOW, A_INIT_HIGH = 1.0, 2.0

LAYER_TYPES = ("embedding", "W_in", "W_proj", "W_delta", "A_log", "D", "W_out", "conv", "norm", "lm_head")

# block attribute -> layer-type tag
_BLOCK_TAGS = {
    "norm_scale": "norm",
    "W_in": "W_in",
    "conv_kernel": "conv",
    "W_proj": "W_proj",
    "W_delta": "W_delta",
    "A_log": "A_log",
    "D": "D",
    "W_out": "W_out",
}
_BLOCK_ORDER = ("norm_scale", "W_in", "conv_kernel", "W_proj", "W_delta", "A_log", "D", "W_out")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    embed_dim: int = 16
    inner_dim: int = 16
    state_dim: int = 8
    lowrank_dim: int = 4
    num_blocks: int = 2
    conv_enabled: bool = False
    conv_width: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "inner_dim", "state_dim", "lowrank_dim", "num_blocks", "conv_width"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed!r}")

    @property
    def proj_width(self):
        return 2 * self.state_dim + self.lowrank_dim


@dataclass
class MambaBlockParams:
    norm_scale: np.ndarray
    W_in: np.ndarray
    W_proj: np.ndarray
    W_delta: np.ndarray
    A_log: np.ndarray
    D: np.ndarray
    W_out: np.ndarray
    conv_kernel: np.ndarray = None


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: np.ndarray
    blocks: list
    final_norm_scale: np.ndarray
    lm_head: np.ndarray

    def named_tensors(self):
        """Ordered ``{name: array}`` over every tensor in the model."""
        out = {"embedding": self.embedding}
        for i, blk in enumerate(self.blocks):
            for attr in _BLOCK_ORDER:
                arr = getattr(blk, attr)
                if arr is not None:
                    out[f"blocks.{i}.{attr}"] = arr
        out["final_norm_scale"] = self.final_norm_scale
        out["lm_head"] = self.lm_head
        return out

    @classmethod
    def from_named(cls, config, tensors):
        blocks = []
        for i in range(config.num_blocks):
            kw = {attr: tensors.get(f"blocks.{i}.{attr}") for attr in _BLOCK_ORDER}
            blocks.append(MambaBlockParams(**kw))
        params = cls(config, tensors["embedding"], blocks, tensors["final_norm_scale"], tensors["lm_head"])
        check_shapes(params)
        return params

    def map(self, fn):
        return ModelParams.from_named(self.config, {k: fn(v) for k, v in self.named_tensors().items()})

    def astype(self, dtype):
        return self.map(lambda a: np.asarray(a, dtype=dtype))

    def copy(self):
        return self.map(np.array)

    @property
    def num_parameters(self):
        return sum(a.size for a in self.named_tensors().values())


def layer_type(name):
    """Layer-type tag for a tensor name produced by :meth:`ModelParams.named_tensors`."""
    if name == "embedding":
        return "embedding"
    if name == "lm_head":
        return "lm_head"
    if name == "final_norm_scale":
        return "norm"
    parts = name.split(".")
    if len(parts) == 3 and parts[0] == "blocks" and parts[2] in _BLOCK_TAGS:
        return _BLOCK_TAGS[parts[2]]
    raise KeyError(f"unknown tensor name {name!r}")


def block_index(name):
    """Block number for block tensors, ``None`` for embedding/head tensors."""
    parts = name.split(".")
    if parts[0] == "blocks":
        return int(parts[1])
    return None


def expected_shapes(cfg):
    V, m, c, n, r = cfg.vocab_size, cfg.embed_dim, cfg.inner_dim, cfg.state_dim, cfg.lowrank_dim
    shapes = {"embedding": (V, m)}
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}."
        shapes[p + "norm_scale"] = (m,)
        shapes[p + "W_in"] = (m, c)
        if cfg.conv_enabled:
            shapes[p + "conv_kernel"] = (c, cfg.conv_width)
        shapes[p + "W_proj"] = (c, 2 * n + r)
        shapes[p + "W_delta"] = (r, c)
        shapes[p + "A_log"] = (c, n)
        shapes[p + "D"] = (c,)
        shapes[p + "W_out"] = (c, m)
    shapes["final_norm_scale"] = (m,)
    shapes["lm_head"] = (m, V)
    return shapes


def check_shapes(params):
    want = expected_shapes(params.config)
    have = {k: tuple(np.shape(v)) for k, v in params.named_tensors().items()}
    if set(want) != set(have):
        raise DimensionError(f"tensor set mismatch: missing {sorted(set(want) - set(have))}, "
                             f"extra {sorted(set(have) - set(want))}")
    for k, shape in want.items():
        if have[k] != shape:
            raise DimensionError(f"{k}: expected shape {shape}, got {have[k]}")


def init_params(cfg):
    """Deterministic initialization from ``cfg.seed``.

    Matrices draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = number of
    rows; A_log = log U(1, 2); D = 1; norm scales = 1.

    The A range keeps the Euler factor ``1 + dt*A`` inside (-1, 1) at the
    initial step size softplus(0) = ln 2; wider ranges make the scan explode.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed)))

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    shapes = expected_shapes(cfg)
    tensors = {"embedding": uniform(shapes["embedding"], cfg.vocab_size)}
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}."
        tensors[p + "norm_scale"] = np.ones(cfg.embed_dim)
        tensors[p + "W_in"] = uniform(shapes[p + "W_in"], cfg.embed_dim)
        if cfg.conv_enabled:
            tensors[p + "conv_kernel"] = uniform(shapes[p + "conv_kernel"], cfg.conv_width)
        tensors[p + "W_proj"] = uniform(shapes[p + "W_proj"], cfg.inner_dim)
        tensors[p + "W_delta"] = uniform(shapes[p + "W_delta"], cfg.lowrank_dim)
        tensors[p + "A_log"] = np.log(rng.uniform(A_INIT_LOW, A_INIT_HIGH, size=shapes[p + "A_log"]))
        tensors[p + "D"] = np.ones(cfg.inner_dim)
        tensors[p + "W_out"] = uniform(shapes[p + "W_out"], cfg.inner_dim)
    tensors["final_norm_scale"] = np.ones(cfg.embed_dim)
    tensors["lm_head"] = uniform(shapes["lm_head"], cfg.embed_dim)
    return ModelParams.from_named(cfg, tensors)


@dataclass
class TokenBatch:
    sequences: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.sequences.ndim != 2 or self.sequences.shape != self.targets.shape:
            raise InputError(f"sequences {self.sequences.shape} and targets {self.targets.shape} must be equal B x T")
        if min(self.sequences.shape) < 1:
            raise InputError("batch must have B, T >= 1")

    @classmethod
    def from_streams(cls, streams):
        """Build a next-token batch from (B, T+1) token streams."""
        streams = np.asarray(streams, dtype=np.int64)
        return cls(streams[:, :-1], streams[:, 1:])

    def check_vocab(self, vocab_size):
        for arr in (self.sequences, self.targets):
            if arr.min() < 0 or arr.max() >= vocab_size:
                raise InputError(f"token id outside [0, {vocab_size})")

    @property
    def shape(self):
        return self.sequences.shape


# ---------------------------------------------------------------------------
# elementwise pieces
# ---------------------------------------------------------------------------

def materialize_A(A_log):
    """Transition entries ``-exp(A_log)``; rejects non-finite input.

    Entries whose exponential underflows are held at the smallest subnormal so
    the result stays strictly negative.
    """
    A_log = np.asarray(A_log, dtype=float)
    if not np.all(np.isfinite(A_log)):
        raise MalformedParameterError("A_log contains non-finite entries")
    with np.errstate(over="ignore", under="ignore"):
        return -np.maximum(np.exp(A_log), np.nextafter(0.0, 1.0))


def softplus(x):
    with np.errstate(over="ignore", invalid="ignore"):
        return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def sigmoid(x):
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def project_inputs(u_t, block):
    """Split ``W_proj^T u_t`` into (B_raw, C_raw, delta_low) of widths (n, n, r)."""
    u_t = np.asarray(u_t)
    W = block.W_proj
    if u_t.shape[-1] != W.shape[0]:
        raise DimensionError(f"u_t has width {u_t.shape[-1]}, W_proj expects {W.shape[0]}")
    n = block.A_log.shape[1]
    r = W.shape[1] - 2 * n
    if r < 1 or block.W_delta.shape[0] != r:
        raise DimensionError(f"W_proj width {W.shape[1]} inconsistent with state dim {n}")
    p = u_t @ W
    return p[..., :n], p[..., n:2 * n], p[..., 2 * n:]


def softplus_delta(delta_low, W_delta):
    """Per-channel step sizes ``softplus(W_delta^T delta_low)``."""
    delta_low = np.asarray(delta_low)
    if delta_low.shape[-1] != W_delta.shape[0]:
        raise DimensionError(f"delta_low width {delta_low.shape[-1]} vs W_delta rows {W_delta.shape[0]}")
    return softplus(delta_low @ W_delta)


def ssm_scan(x, A, B, C, delta, D):
    """Selective scan over one sequence or a batch.

    ``x`` and ``delta`` are (T, c) or (batch, T, c); ``B`` and ``C`` are (T, n) or
    (batch, T, n). Returns y with the shape of ``x``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    arrs = [np.asarray(a, dtype=float) for a in (x, delta, B, C)]
    if single:
        arrs = [a[None] for a in arrs]
    x, delta, B, C = (np.ascontiguousarray(a) for a in arrs)
    A = np.ascontiguousarray(np.asarray(A, dtype=float))
    D = np.ascontiguousarray(np.asarray(D, dtype=float))
    c, n = A.shape
    if x.shape[-1] != c or delta.shape != x.shape or B.shape[-1] != n or C.shape != B.shape or D.shape != (c,):
        raise DimensionError("inconsistent scan operand shapes")
    y, _ = kernels.scan_forward(x, delta, A, B, C, D)
    return y[0] if single else y


def rmsnorm(x, scale):
    with np.errstate(over="ignore", invalid="ignore"):
        rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
        return x / rms * scale, rms


def causal_conv(u, kernel):
    """Depthwise causal convolution along time; ``kernel`` is (c, width)."""
    w = kernel.shape[1]
    T = u.shape[1]
    padded = np.concatenate([np.zeros(u.shape[:1] + (w - 1,) + u.shape[2:], dtype=u.dtype), u], axis=1)
    out = np.zeros_like(u)
    for k in range(w):
        out += padded[:, k:k + T] * kernel[:, k]
    return out


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class BlockCache:
    x_in: np.ndarray
    xn_hat: np.ndarray
    rms: np.ndarray
    u: np.ndarray
    uc: np.ndarray
    proj: np.ndarray
    z: np.ndarray
    delta: np.ndarray
    A: np.ndarray
    y: np.ndarray
    hs: np.ndarray


@dataclass
class ForwardCache:
    tokens: np.ndarray
    blocks: list = field(default_factory=list)
    x_final: np.ndarray = None
    xf_hat: np.ndarray = None
    rms_final: np.ndarray = None


def _forward(params, tokens, dtype, keep_cache):
    cfg = params.config
    n = cfg.state_dim
    cache = ForwardCache(tokens=tokens) if keep_cache else None
    cast = lambda a: np.ascontiguousarray(a, dtype=dtype)  # noqa: E731

    with np.errstate(all="ignore"):
        x = cast(params.embedding)[tokens]
        for blk in params.blocks:
            x_in = x
            rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
            xn_hat = x / rms
            u = (xn_hat * cast(blk.norm_scale)) @ cast(blk.W_in)
            uc = causal_conv(u, cast(blk.conv_kernel)) if blk.conv_kernel is not None else u
            proj = uc @ cast(blk.W_proj)
            Bm = np.ascontiguousarray(proj[..., :n])
            Cm = np.ascontiguousarray(proj[..., n:2 * n])
            z = proj[..., 2 * n:] @ cast(blk.W_delta)
            delta = np.ascontiguousarray(softplus(z))
            A = cast(-np.exp(cast(blk.A_log)))
            y, hs = kernels.scan_forward(np.ascontiguousarray(uc), delta, A, Bm, Cm, cast(blk.D))
            x = x_in + y @ cast(blk.W_out)
            if keep_cache:
                cache.blocks.append(BlockCache(x_in, xn_hat, rms, u, uc, proj, z, delta, A, y, hs))
        rms_f = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
        xf_hat = x / rms_f
        logits = (xf_hat * cast(params.final_norm_scale)) @ cast(params.lm_head)
    if keep_cache:
        cache.x_final, cache.xf_hat, cache.rms_final = x, xf_hat, rms_f
    return logits, cache


def forward_logits(params, batch, dtype=np.float64):
    """Logits of shape (B, T, V). ``dtype`` selects the accumulation precision."""
    tokens = batch.sequences if isinstance(batch, TokenBatch) else np.asarray(batch, dtype=np.int64)
    if tokens.min() < 0 or tokens.max() >= params.config.vocab_size:
        raise InputError(f"token id outside [0, {params.config.vocab_size})")
    logits, _ = _forward(params, tokens, dtype, keep_cache=False)
    return logits


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------

def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    with np.errstate(all="ignore"):
        mx = np.max(logits, axis=-1, keepdims=True)
        shifted = logits - mx
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def token_nll(logits, targets):
    """Per-position negative log-likelihood in nats; non-finite positions become +inf."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = log_softmax(logits)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return np.where(np.isfinite(nll), nll, np.inf)


def cross_entropy(logits, targets):
    """Mean next-token cross-entropy (nats) over every position."""
    logits = np.asarray(logits)
    if logits.shape[:-1] != np.shape(targets):
        raise DimensionError(f"logits {logits.shape} vs targets {np.shape(targets)}")
    return float(np.mean(token_nll(logits, targets)))


def perplexity(mean_nll):
    with np.errstate(over="ignore"):
        return float(np.exp(np.float64(mean_nll)))


def last_token_positions(shape):
    mask = np.zeros(shape, dtype=bool)
    mask[:, -1] = True
    return mask


def accuracy(logits, targets, eval_positions=None):
    """Argmax accuracy over the masked positions (all positions when ``None``).

    Ties resolve to the lowest class index; any position whose logits contain NaN
    counts as incorrect.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if eval_positions is None:
        eval_positions = np.ones(targets.shape, dtype=bool)
    elif isinstance(eval_positions, str):
        if eval_positions != "last":
            raise EvaluationError(f"unknown position selector {eval_positions!r}")
        eval_positions = last_token_positions(targets.shape)
    mask = np.asarray(eval_positions, dtype=bool)
    if not mask.any():
        raise EvaluationError("no evaluation positions selected")
    pred = np.argmax(np.where(np.isnan(logits), -np.inf, logits), axis=-1)
    correct = (pred == targets) & ~np.any(np.isnan(logits), axis=-1)
    return float(np.mean(correct[mask]))


def replace_tensor(params, name, value):
    """Return a copy of ``params`` with one named tensor swapped out."""
    tensors = dict(params.named_tensors())
    tensors[name] = value
    return ModelParams.from_named(params.config, tensors)

