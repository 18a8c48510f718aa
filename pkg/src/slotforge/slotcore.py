"""Iterative slot attention and single-head attention primitives.

Shapes follow a channels-last convention so a feature grid is ``[..., H, W, D]``
and a slot set is ``[..., K, D]``. Leading batch axes are optional everywhere.
The attention emitted by slot attention is ``[..., K, H, W]`` and sums to one
over the slot axis at every location.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class ConfigurationError(ValueError):
    """Raised when shapes or hyperparameters are mutually inconsistent."""


def init_slots(count, dim, mean, log_std, generator=None, batch_shape=()):
    """Sample ``count`` slots i.i.d. from N(mean, exp(log_std)^2).

    ``log_std`` may be ``-inf`` which yields exact copies of ``mean``.
    """
    if count < 1 or dim < 1:
        raise ConfigurationError(f"slot count and dim must be positive, got {count}, {dim}")
    mean = torch.as_tensor(mean)
    log_std = torch.as_tensor(log_std, dtype=mean.dtype)
    if mean.shape[-1] != dim or log_std.shape[-1] != dim:
        raise ConfigurationError(f"mean/log_std must have trailing dim {dim}")
    shape = (*batch_shape, count, dim)
    noise = torch.randn(shape, generator=generator, dtype=mean.dtype, device=mean.device)
    std = torch.exp(log_std)
    # std == 0 must not turn 0 * noise into nan
    return mean + torch.where(std > 0, std * noise, torch.zeros_like(noise))


class SlotAttention(nn.Module):
    """Slot attention with a GRU update and a residual MLP.

    Parameters also include the learned Gaussian used to draw initial slots,
    so that syncing two modules by moving average moves the init as well.
    """

    def __init__(self, dim, in_dim=None, hidden=None, iterations=3, eps=1e-8):
        super().__init__()
        in_dim = dim if in_dim is None else in_dim
        hidden = 2 * dim if hidden is None else hidden
        if iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        self.dim = dim
        self.in_dim = in_dim
        self.iterations = iterations
        self.eps = eps

        self.slots_mu = nn.Parameter(torch.randn(dim) * dim ** -0.5)
        self.slots_log_std = nn.Parameter(torch.full((dim,), math.log(dim ** -0.5)))

        self.norm_input = nn.LayerNorm(in_dim)
        self.norm_slots = nn.LayerNorm(dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(in_dim, dim, bias=False)
        self.to_v = nn.Linear(in_dim, dim, bias=False)
        self.gru = nn.GRUCell(dim, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def init(self, count, batch_shape=(), generator=None):
        return init_slots(count, self.dim, self.slots_mu, self.slots_log_std,
                          generator=generator, batch_shape=batch_shape)

    def forward(self, features, slots, iterations=None):
        return run_slot_attention(features, slots, self,
                                  self.iterations if iterations is None else iterations)


def _check_inputs(features, slots, params):
    if features.ndim < 3:
        raise ConfigurationError(f"features must be [..., H, W, D], got {tuple(features.shape)}")
    if features.shape[-1] != params.in_dim:
        raise ConfigurationError(
            f"feature dim {features.shape[-1]} != slot attention input dim {params.in_dim}")
    if slots.shape[-1] != params.dim:
        raise ConfigurationError(f"slot dim {slots.shape[-1]} != {params.dim}")
    if slots.shape[-2] < 1:
        raise ConfigurationError("need at least one slot")


def _project_inputs(features, params):
    x = params.norm_input(features.flatten(-3, -2))
    return params.to_k(x), params.to_v(x)


def _step(keys, values, slots, params):
    q = params.to_q(params.norm_slots(slots))
    logits = torch.einsum("...nd,...kd->...kn", keys, q) / math.sqrt(params.dim)
    attn = logits.softmax(dim=-2)
    weights = attn / (attn.sum(dim=-1, keepdim=True) + params.eps)
    updates = torch.einsum("...kn,...nd->...kd", weights, values)

    flat = params.gru(updates.reshape(-1, params.dim), slots.reshape(-1, params.dim))
    new = flat.reshape(slots.shape)
    new = new + params.mlp(params.norm_mlp(new))
    return new, attn


def slot_attention_step(features, slots, params):
    """One refinement round. Returns ``(slots, attention)``; attention is ``[..., K, H, W]``."""
    _check_inputs(features, slots, params)
    h, w = features.shape[-3:-1]
    keys, values = _project_inputs(features, params)
    new, attn = _step(keys, values, slots, params)
    return new, attn.unflatten(-1, (h, w))


def run_slot_attention(features, init, params, iterations=3):
    """Apply ``iterations`` rounds of slot attention starting from ``init``."""
    if iterations < 1:
        raise ConfigurationError("iterations must be >= 1")
    _check_inputs(features, init, params)
    h, w = features.shape[-3:-1]
    keys, values = _project_inputs(features, params)
    slots = init
    for _ in range(iterations):
        slots, attn = _step(keys, values, slots, params)
    return slots, attn.unflatten(-1, (h, w))


class Attention(nn.Module):
    """Single-head scaled dot-product attention with a residual on the query.

    ``out = q + W_o softmax(W_q q . (W_k kv)^T / sqrt(D)) W_v kv``. With
    ``zero_init`` the output projection starts at zero, making the block an
    exact identity on its queries.
    """

    def __init__(self, dim, kv_dim=None, zero_init=True):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim = dim
        self.kv_dim = kv_dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        if zero_init:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, queries, keys_values):
        out, _ = attend(queries, keys_values, self)
        return out


def attend(queries, keys_values, params):
    """Return ``(output, weights)`` where weights are ``[..., M, N]`` softmaxed over N."""
    if queries.shape[-1] != params.dim or keys_values.shape[-1] != params.kv_dim:
        raise ConfigurationError(
            f"attention expects query dim {params.dim} and key dim {params.kv_dim}, got "
            f"{queries.shape[-1]} and {keys_values.shape[-1]}")
    if queries.shape[-2] < 1 or keys_values.shape[-2] < 1:
        raise ConfigurationError("attention needs at least one query and one key")
    q = params.to_q(queries)
    k = params.to_k(keys_values)
    v = params.to_v(keys_values)
    weights = (q @ k.transpose(-1, -2) / math.sqrt(params.dim)).softmax(dim=-1)
    return queries + params.to_out(weights @ v), weights


def cross_attention(queries, keys_values, params):
    return attend(queries, keys_values, params)[0]


def self_attention(tokens, params):
    return attend(tokens, tokens, params)[0]


def attention_masks_ok(attn, atol=1e-6):
    """True when ``attn`` is nonnegative and sums to one over the slot axis."""
    return bool((attn >= 0).all()) and bool(
        torch.allclose(attn.sum(dim=-3), torch.ones_like(attn[..., 0, :, :]), atol=atol))
