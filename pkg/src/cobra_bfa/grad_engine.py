"""Reverse-mode gradients of the mean cross-entropy with respect to every tensor.

The backward pass is written by hand against the cached forward activations of
:func:`cobra_bfa.ssm_model._forward`; the scan part (backprop through time over
the hidden state) is delegated to :mod:`cobra_bfa.kernels`. Everything runs in
float64 against the dequantized weight values.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import GradientUnavailableError
from .ssm_model import ModelParams, _forward, cross_entropy, forward_logits, sigmoid


@dataclass
class GradientSet:
    grads: dict
    computed_in_double: bool = True

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads)

    def items(self):
        return self.grads.items()


def _rmsnorm_backward(dxn_hat, x_hat, rms):
    return (dxn_hat - x_hat * np.mean(dxn_hat * x_hat, axis=-1, keepdims=True)) / rms


def _conv_backward(dout, u, kernel):
    w = kernel.shape[1]
    T = u.shape[1]
    padded = np.concatenate([np.zeros(u.shape[:1] + (w - 1,) + u.shape[2:]), u], axis=1)
    dpadded = np.zeros_like(padded)
    dK = np.empty_like(kernel)
    for k in range(w):
        dK[:, k] = np.sum(dout * padded[:, k:k + T], axis=(0, 1))
        dpadded[:, k:k + T] += dout * kernel[:, k]
    return dpadded[:, w - 1:], dK


def backward(params, batch):
    """Return ``(loss, GradientSet)`` for ``params`` on ``batch``.

    The loss is produced by the same forward code and the same
    :func:`cross_entropy` as the forward-only path, so the two agree bitwise.
    Raises :class:`GradientUnavailableError` when the loss is not finite.
    """
    p64 = params.astype(np.float64)
    cfg = p64.config
    n = cfg.state_dim
    tokens = batch.sequences
    batch.check_vocab(cfg.vocab_size)
    logits, cache = _forward(p64, tokens, np.float64, keep_cache=True)
    loss = cross_entropy(logits, batch.targets)
    if not np.isfinite(loss):
        raise GradientUnavailableError(f"loss is {loss}; gradients undefined")

    Bsz, T = tokens.shape
    V = cfg.vocab_size
    grads = {}

    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    dlogits = probs
    dlogits[np.arange(Bsz)[:, None], np.arange(T)[None, :], batch.targets] -= 1.0
    dlogits /= Bsz * T

    xf = cache.xf_hat * p64.final_norm_scale
    grads["lm_head"] = xf.reshape(-1, cfg.embed_dim).T @ dlogits.reshape(-1, V)
    dxf = dlogits @ p64.lm_head.T
    grads["final_norm_scale"] = np.sum(dxf * cache.xf_hat, axis=(0, 1))
    dx = _rmsnorm_backward(dxf * p64.final_norm_scale, cache.xf_hat, cache.rms_final)

    for i in range(cfg.num_blocks - 1, -1, -1):
        blk = p64.blocks[i]
        bc = cache.blocks[i]
        pre = f"blocks.{i}."
        grads[pre + "W_out"] = bc.y.reshape(-1, bc.y.shape[-1]).T @ dx.reshape(-1, dx.shape[-1])
        dy = dx @ blk.W_out.T

        Bm = np.ascontiguousarray(bc.proj[..., :n])
        Cm = np.ascontiguousarray(bc.proj[..., n:2 * n])
        duc, ddelta, dA, dBm, dCm, dD = kernels.scan_backward(
            np.ascontiguousarray(dy), np.ascontiguousarray(bc.uc), bc.delta, bc.A, Bm, Cm, blk.D, bc.hs)
        grads[pre + "D"] = dD
        grads[pre + "A_log"] = dA * bc.A

        dz = ddelta * sigmoid(bc.z)
        dlow = bc.proj[..., 2 * n:]
        grads[pre + "W_delta"] = dlow.reshape(-1, dlow.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
        ddlow = dz @ blk.W_delta.T

        dproj = np.concatenate([dBm, dCm, ddlow], axis=-1)
        grads[pre + "W_proj"] = bc.uc.reshape(-1, bc.uc.shape[-1]).T @ dproj.reshape(-1, dproj.shape[-1])
        duc = duc + dproj @ blk.W_proj.T

        if blk.conv_kernel is not None:
            du, grads[pre + "conv_kernel"] = _conv_backward(duc, bc.u, blk.conv_kernel)
        else:
            du = duc

        xn = bc.xn_hat * blk.norm_scale
        grads[pre + "W_in"] = xn.reshape(-1, xn.shape[-1]).T @ du.reshape(-1, du.shape[-1])
        dxn = du @ blk.W_in.T
        grads[pre + "norm_scale"] = np.sum(dxn * bc.xn_hat, axis=(0, 1))
        dx = dx + _rmsnorm_backward(dxn * blk.norm_scale, bc.xn_hat, bc.rms)

    dE = np.zeros_like(p64.embedding)
    np.add.at(dE, tokens, dx)
    grads["embedding"] = dE

    ordered = {name: grads[name] for name in p64.named_tensors()}
    return loss, GradientSet(ordered, computed_in_double=True)


def loss_at(params, batch):
    return cross_entropy(forward_logits(params, batch, dtype=np.float64), batch.targets)


def fd_gradient(params, batch, tensor_name, index, h=1e-5):
    """Central finite difference of the loss in one scalar coordinate (float64)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = params.named_tensors()[tensor_name]
    index = np.unravel_index(index, base.shape) if np.isscalar(index) else tuple(index)

    def shifted(delta):
        tensors = {k: np.array(v, dtype=np.float64) for k, v in params.named_tensors().items()}
        tensors[tensor_name][index] += delta
        return loss_at(ModelParams.from_named(params.config, tensors), batch)

    return (shifted(h) - shifted(-h)) / (2 * h)

