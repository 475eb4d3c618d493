import numpy as np
import pytest

from cobra_bfa.corpus import CorpusSpec, calibration_batch
from cobra_bfa.errors import GradientUnavailableError
from cobra_bfa.grad_engine import backward, fd_gradient, loss_at
from cobra_bfa.ssm_model import (ModelConfig, TokenBatch, _forward, cross_entropy, forward_logits, init_params,
                                 layer_type, replace_tensor, sigmoid)

from conftest import TOY, toy_batch


def rel_err(a, b):
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def sample_coords(params, per_tensor, seed):
    rng = np.random.default_rng(seed)
    out = []
    for name, arr in params.named_tensors().items():
        idx = rng.choice(arr.size, size=min(per_tensor, arr.size), replace=False)
        out += [(name, int(i)) for i in idx]
    return out


def gradient_check(params, batch, per_tensor, seed):
    _, grads = backward(params, batch)
    worst, types = 0.0, set()
    coords = sample_coords(params, per_tensor, seed)
    for name, i in coords:
        g_bp = grads[name].reshape(-1)[i]
        g_fd = fd_gradient(params, batch, name, i, h=1e-5)
        worst = max(worst, rel_err(g_fd, g_bp))
        types.add(layer_type(name))
    return len(coords), worst, types


def test_gradient_check_toy_model(toy_params, batch):
    n, worst, types = gradient_check(toy_params, batch, per_tensor=12, seed=11)
    assert n >= 200
    assert types == {"embedding", "W_in", "W_proj", "W_delta", "A_log", "D", "W_out", "norm", "lm_head"}
    assert worst <= 1e-4


def test_gradient_check_with_conv():
    p = init_params(ModelConfig(conv_enabled=True, seed=3))
    n, worst, types = gradient_check(p, toy_batch(seed=5), per_tensor=5, seed=2)
    assert "conv" in types
    assert worst <= 1e-4


def test_gradient_check_on_trained_victim(victim):
    b = calibration_batch(CorpusSpec())
    b = TokenBatch(b.sequences[:4, :12], b.targets[:4, :12])
    _, worst, _ = gradient_check(victim.decoded(), b, per_tensor=3, seed=4)
    assert worst <= 1e-4


def test_loss_bitwise_equals_forward(toy_params, batch):
    loss, _ = backward(toy_params, batch)
    assert loss == cross_entropy(forward_logits(toy_params, batch), batch.targets)
    assert loss == loss_at(toy_params, batch)


def test_gradient_shapes_and_finiteness(toy_params, batch):
    _, grads = backward(toy_params, batch)
    assert grads.computed_in_double
    tensors = toy_params.named_tensors()
    assert list(grads) == list(tensors)
    for name, g in grads.items():
        assert g.shape == tensors[name].shape and g.dtype == np.float64
        assert np.all(np.isfinite(g))


def test_duplicate_sequences_mean_reduction(toy_params):
    single = toy_batch(B=1, T=9, seed=3)
    dup = TokenBatch(np.repeat(single.sequences, 3, axis=0), np.repeat(single.targets, 3, axis=0))
    l1, g1 = backward(toy_params, single)
    l3, g3 = backward(toy_params, dup)
    assert l3 == pytest.approx(l1, rel=1e-14)
    for name in g1:
        np.testing.assert_allclose(g3[name], g1[name], rtol=1e-11, atol=1e-15)


def test_uniform_logits_target_gradient(toy_params, batch):
    # zero lm_head gives uniform logits; dL/dlogit[target] = (1/V - 1)/(B*T) per position,
    # so the head gradient is xf^T (1/V - onehot) / (B*T)
    p = replace_tensor(toy_params, "lm_head", np.zeros_like(toy_params.lm_head))
    _, grads = backward(p, batch)
    _, cache = _forward(p, batch.sequences, np.float64, keep_cache=True)
    V = p.config.vocab_size
    B, T = batch.shape
    dlogits = np.full((B, T, V), 1.0 / V)
    np.put_along_axis(dlogits, batch.targets[..., None], 1.0 / V - 1.0, axis=-1)
    dlogits /= B * T
    assert dlogits[0, 0, batch.targets[0, 0]] == pytest.approx((1 / V - 1) / (B * T), rel=1e-15)
    xf = cache.xf_hat * p.final_norm_scale
    expect = np.einsum("btm,btv->mv", xf, dlogits)
    np.testing.assert_allclose(grads["lm_head"], expect, rtol=1e-12, atol=1e-15)


def test_zero_delta_preactivation_half_factor(toy_params, batch):
    # with W_delta = 0 every pre-activation is 0, where softplus' = sigmoid(0) = 0.5
    assert sigmoid(np.array(0.0)) == 0.5
    p = replace_tensor(toy_params, "blocks.1.W_delta", np.zeros_like(toy_params.blocks[1].W_delta))
    _, grads = backward(p, batch)
    for i in range(0, p.blocks[1].W_delta.size, 7):
        g_fd = fd_gradient(p, batch, "blocks.1.W_delta", i)
        assert rel_err(g_fd, grads["blocks.1.W_delta"].reshape(-1)[i]) <= 1e-4


def test_fd_unused_entry_is_zero(toy_params, batch):
    unused = sorted(set(range(32)) - set(batch.sequences.ravel().tolist()))
    assert unused
    idx = unused[0] * toy_params.config.embed_dim
    assert fd_gradient(toy_params, batch, "embedding", idx) == 0.0
    _, grads = backward(toy_params, batch)
    assert np.all(grads["embedding"][unused] == 0)


def test_fd_lm_head_near_exact(toy_params, batch):
    _, grads = backward(toy_params, batch)
    for i in (0, 17, 300, 511):
        assert rel_err(fd_gradient(toy_params, batch, "lm_head", i), grads["lm_head"].reshape(-1)[i]) <= 1e-8


def test_fd_requires_positive_step(toy_params, batch):
    with pytest.raises(ValueError):
        fd_gradient(toy_params, batch, "lm_head", 0, h=0)


def test_nonfinite_loss_raises(toy_params, batch):
    A_log = toy_params.blocks[0].A_log.copy()
    A_log[0, 0] = np.inf
    with pytest.raises(GradientUnavailableError):
        backward(replace_tensor(toy_params, "blocks.0.A_log", A_log), batch)


def test_backward_does_not_mutate(toy_params, batch):
    before = {k: v.copy() for k, v in toy_params.named_tensors().items()}
    backward(toy_params, batch)
    for k, v in toy_params.named_tensors().items():
        assert np.array_equal(v, before[k])
