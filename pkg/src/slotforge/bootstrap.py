"""Bootstrap branch: a per-channel affine adapter on frozen encoder features.

The branch runs its own copy of the slot-attention module, kept in sync with
the fusion model by a weighted moving average, and learns only the adapter
from a Hungarian-matched segmentation loss against the fusion model's masks.
At test time the adapter is composed with the fusion model itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .contextfusion import _as_images, _masks, decode, eval_generator, labels_from_alphas, train_contextfusion
from .indicator import StateError, TrainingError, ema_update, kmeans_like_
from .matching import hungarian, matching_cost
from .scenegen import encode
from .slotcore import ConfigurationError, SlotAttention, run_slot_attention

log = logging.getLogger(__name__)


class AdaptiveLayer(nn.Module):
    """``z -> alpha * z + beta`` per channel, starting at the identity."""

    def __init__(self, dim):
        super().__init__()
        self.alpha = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, features):
        return adapt_features(features, self)


def adapt_features(features, layer):
    if features.shape[-1] != layer.alpha.shape[-1]:
        raise ConfigurationError(f"feature dim {features.shape[-1]} != adapter dim {layer.alpha.shape[-1]}")
    return layer.alpha.to(features.dtype) * features + layer.beta.to(features.dtype)


@dataclass
class BootstrapConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    wma: float = 0.99
    # "sequential" trains after the fusion stage; "simultaneous" interleaves with it
    schedule: str = "sequential"
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class BootstrapState(nn.Module):
    """Adapter plus the branch's own slot-attention parameters."""

    def __init__(self, fusion_model, config=None):
        super().__init__()
        config = config or BootstrapConfig()
        self.config = config
        src = fusion_model.slot_attention
        with torch.random.fork_rng():
            torch.manual_seed(config.seed + 7919)
            self.adaptive = AdaptiveLayer(fusion_model.encoder.dim)
            # fresh module of the same structure; the moving average pulls it toward the fusion model
            self.branch = SlotAttention(src.dim, in_dim=src.in_dim, iterations=src.iterations, eps=src.eps)
            if fusion_model.config.kmeans_init:
                kmeans_like_(self.branch, fusion_model.config.sharpness)
        self.branch.requires_grad_(False)
        self.trained = False


def wma_sync(state, fusion_slot_attention, momentum):
    """Move the branch slot parameters toward the fusion model's; same arithmetic as the EMA teacher."""
    ema_update(state.branch, fusion_slot_attention, momentum)
    return state


def _branch_forward(features, state, fusion_model, generator):
    adapted = adapt_features(features, state.adaptive)
    init = state.branch.init(fusion_model.slots, features.shape[:-3], generator)
    slots, _ = run_slot_attention(fusion_model.position(adapted), init, state.branch, state.branch.iterations)
    return decode(slots, fusion_model.decoder)


@torch.no_grad()
def branch_predict(images, state, fusion_model, generator=None, full_resolution=True):
    """Hard labels and alphas from the branch: encode, adapt, branch slot attention, shared decoder."""
    if not fusion_model.trained:
        raise StateError("fusion model is not trained")
    images = _as_images(images)
    generator = eval_generator(fusion_model) if generator is None else generator
    _, alphas, _ = _branch_forward(encode(images, fusion_model.encoder), state, fusion_model, generator)
    size = images.shape[1:3] if full_resolution else None
    return labels_from_alphas(alphas, size).numpy(), alphas


def seg_loss(logits, targets, match):
    """Cross-entropy of softmax over channels against relabeled targets, averaged over matched locations.

    ``logits`` is ``[K, H, W]``, ``targets`` ``[H, W]`` integer labels and
    ``match.assignment`` maps target label -> prediction channel. Locations
    whose label has no partner are left out.
    """
    if tuple(logits.shape[-2:]) != tuple(targets.shape[-2:]):
        raise ValueError(f"logit grid {tuple(logits.shape[-2:])} != target grid {tuple(targets.shape[-2:])}")
    targets = torch.as_tensor(targets).long()
    lookup = torch.full((int(targets.max()) + 1,), -1, dtype=torch.long)
    for t, p in match.assignment.items():
        if t < len(lookup):
            lookup[t] = p
    channel = lookup[targets]
    valid = channel >= 0
    if not valid.any():
        return logits.sum() * 0.0
    logp = logits.log_softmax(dim=-3)
    picked = logp.gather(-3, channel.clamp_min(0)[None]).squeeze(-3)
    return -(picked[valid]).mean()


def matched_seg_loss(logits, alphas, targets):
    """Batch mean of :func:`seg_loss` with a Dice-cost Hungarian match per image."""
    losses = []
    n = logits.shape[-3]
    for b in range(logits.shape[0]):
        cost = matching_cost(alphas[b].detach(), targets[b], n_targets=max(n, int(targets[b].max()) + 1))
        match = hungarian(cost.numpy())
        losses.append(seg_loss(logits[b], targets[b], match))
    return torch.stack(losses).mean()


def _param_digest(module):
    return [p.detach().clone() for p in module.parameters()]


def train_bootstrap_step(images, state, fusion_model, optimizer, generator):
    """One step: targets from the fusion model, WMA sync, matched seg loss, update of alpha and beta only."""
    labels, _ = _masks(_as_images(images), fusion_model, eval_generator(fusion_model), full_resolution=False)
    targets = torch.from_numpy(labels)
    wma_sync(state, fusion_model.slot_attention, state.config.wma)
    before = _param_digest(state.branch)
    feats = encode(_as_images(images), fusion_model.encoder)
    _, alphas, logits = _branch_forward(feats, state, fusion_model, generator)
    loss = matched_seg_loss(logits, alphas, targets)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite segmentation loss {float(loss)}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if any(not torch.equal(a, b) for a, b in zip(before, state.branch.parameters())):
        raise TrainingError("branch slot parameters moved during the gradient step")
    return state, float(loss.detach())


def make_optimizer(state):
    return torch.optim.Adam(state.adaptive.parameters(), lr=state.config.lr)


def train_bootstrap(images, fusion_model, config=None, steps=None):
    """Sequential schedule: train the adapter against an already trained fusion model."""
    config = config or BootstrapConfig()
    if not fusion_model.trained:
        raise StateError("bootstrap training needs a trained fusion model")
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("empty dataset")
    state = BootstrapState(fusion_model, config)
    optimizer = make_optimizer(state)
    rng = np.random.default_rng([config.seed, 3])
    gen = torch.Generator().manual_seed(config.seed + 3)
    history = []
    for step in range(config.steps if steps is None else steps):
        idx = rng.choice(len(images), size=min(config.batch_size, len(images)), replace=False)
        _, loss = train_bootstrap_step(images[idx], state, fusion_model, optimizer, gen)
        history.append(dict(step=step, seg=loss))
    state.trained = True
    return state, history


def train_simultaneous(images, encoder, indicator, fusion_config, config=None, base=None):
    """Train the fusion model and interleave one bootstrap step after each of its steps.

    Returns ``(fusion_model, state, history)``.
    """
    config = config or BootstrapConfig()
    images = np.asarray(images, dtype=np.float32)
    rng = np.random.default_rng([config.seed, 3])
    gen = torch.Generator().manual_seed(config.seed + 3)
    holder = {}
    history = []

    def step_hook(step, model):
        if "state" not in holder:
            holder["state"] = BootstrapState(model, config)
            holder["opt"] = make_optimizer(holder["state"])
        idx = rng.choice(len(images), size=min(config.batch_size, len(images)), replace=False)
        _, loss = train_bootstrap_step(images[idx], holder["state"], model, holder["opt"], gen)
        history.append(dict(step=step, seg=loss))

    fusion, _ = train_contextfusion(images, encoder, indicator, fusion_config, base=base, callback=step_hook)
    state = holder.get("state") or BootstrapState(fusion, config)
    state.trained = True
    return fusion, state, history


@torch.no_grad()
def inference_combined(images, adaptive, fusion_model, generator=None, full_resolution=True):
    """Adapter composed with the fusion model's slot attention, fusion layer and decoder."""
    if adaptive is None:
        raise StateError("missing adaptive layer")
    if not fusion_model.trained:
        raise StateError("fusion model is not trained")
    images = _as_images(images)
    generator = eval_generator(fusion_model) if generator is None else generator
    feats = adapt_features(encode(images, fusion_model.encoder), adaptive)
    out = fusion_model(feats, fusion_model.context(images), generator)
    size = images.shape[1:3] if full_resolution else None
    return labels_from_alphas(out["alphas"], size).numpy(), out["alphas"]
