"""Slot attention with fg/bg context fusion and a spatial-broadcast feature decoder.

The fusion pathway lets every slot attend to the two indicator vectors
(cross-attention) and then to the other slots (self-attention). Both blocks
start as exact identities, so an untrained fusion model is the plain
slot-attention autoencoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .indicator import StateError, TrainingError, kmeans_like_, predict_fg_bg
from .scenegen import encode, sinusoidal_position_codes
from .slotcore import Attention, ConfigurationError, SlotAttention, run_slot_attention

log = logging.getLogger(__name__)


class FusionLayer(nn.Module):
    """Cross-attention from slots onto the fg/bg pair, then self-attention among slots."""

    def __init__(self, dim, context_dim):
        super().__init__()
        self.cross = Attention(dim, context_dim, zero_init=True)
        self.self_attn = Attention(dim, zero_init=True)

    def forward(self, slots, fgbg):
        return fuse_slots(slots, fgbg, self)


def fuse_slots(slots, fgbg, fusion):
    """``[..., K, D]`` slots and ``[..., 2, C]`` indicator vectors -> fused ``[..., K, D]``."""
    if fgbg.shape[-2] != 2:
        raise ConfigurationError(f"expected a fg/bg pair, got {fgbg.shape[-2]} context vectors")
    fused = fusion.cross(slots, fgbg)
    return fusion.self_attn(fused, fused)


def position_grid(h, w):
    """``[h, w, 4]`` ramps (y, x, 1 - y, 1 - x) over cell centers."""
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([yy, xx, 1 - yy, 1 - xx], dim=-1)


class SoftPositionEmbedding(nn.Module):
    """Learned linear map of the coordinate ramps, added to features before slot attention."""

    def __init__(self, dim, grid, init_scale=0.1):
        super().__init__()
        self.register_buffer("ramps", position_grid(*grid))
        self.proj = nn.Linear(4, dim)
        with torch.no_grad():
            self.proj.weight.mul_(init_scale)
            self.proj.bias.zero_()

    def forward(self, features):
        return features + self.proj(self.ramps).to(features.dtype)


class BroadcastDecoder(nn.Module):
    """Per-slot MLP on a broadcast grid; emits a feature vector and an alpha logit per location."""

    def __init__(self, slot_dim, out_dim, grid, hidden=128):
        super().__init__()
        self.grid = tuple(grid)
        self.out_dim = out_dim
        self.register_buffer("codes", sinusoidal_position_codes(*self.grid, slot_dim))
        self.pos = nn.Linear(slot_dim, slot_dim)
        self.mlp = nn.Sequential(
            nn.Linear(slot_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, out_dim + 1),
        )

    def forward(self, slots):
        return decode(slots, self)


def decode(slots, decoder):
    """Returns ``(reconstruction [..., H, W, out], alphas [..., K, H, W], alpha_logits)``."""
    h, w = decoder.grid
    x = slots[..., :, None, None, :] + decoder.pos(decoder.codes)  # [..., K, H, W, D]
    out = decoder.mlp(x)
    feats, logits = out[..., :-1], out[..., -1]
    alphas = logits.softmax(dim=-3)
    recon = (alphas[..., None] * feats).sum(dim=-4)
    return recon, alphas, logits


def reconstruction_loss(reconstruction, target):
    if reconstruction.shape != target.shape:
        raise ValueError(f"reconstruction {tuple(reconstruction.shape)} vs target {tuple(target.shape)}")
    return ((reconstruction - target) ** 2).mean()


@dataclass
class FusionConfig:
    slots: int = 5
    dim: int = 64
    decoder_hidden: int = 64
    iterations: int = 3
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 100
    use_fusion: bool = True
    # start slot attention as soft k-means over the encoder features
    kmeans_init: bool = True
    sharpness: float = 20.0
    # the fusion model trains from scratch unless init_from_base, in which case it
    # starts from the trained base model and runs finetune_steps
    init_from_base: bool = False
    finetune_steps: int = 500
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class FusionModel(nn.Module):
    """Slot attention + optional fusion + decoder over a frozen encoder (and frozen indicator)."""

    def __init__(self, encoder, grid, config=None, indicator=None):
        super().__init__()
        config = config or FusionConfig()
        self.config = config
        self.slots = config.slots
        context_dim = indicator.student.slots.shape[-1] if indicator is not None else config.dim
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.slot_attention = SlotAttention(config.dim, in_dim=encoder.dim, iterations=config.iterations)
            if config.kmeans_init:
                kmeans_like_(self.slot_attention, config.sharpness)
            self.position = SoftPositionEmbedding(encoder.dim, grid)
            self.decoder = BroadcastDecoder(config.dim, encoder.dim, grid, config.decoder_hidden)
            self.fusion = FusionLayer(config.dim, context_dim) if config.use_fusion else None
        # kept outside the module tree so they are never optimized or saved with the model
        self.__dict__["encoder"] = encoder
        self.__dict__["indicator"] = indicator
        self.trained = False

    @property
    def uses_fusion(self):
        return self.fusion is not None

    def context(self, images):
        """Frozen indicator fg/bg vectors for raw images, or None for the base model."""
        if not self.uses_fusion:
            return None
        if self.indicator is None:
            raise StateError("fusion model has no indicator")
        _, fgbg = predict_fg_bg(images, self.indicator)
        return fgbg

    def forward(self, features, fgbg=None, generator=None, init=None):
        """Run the model on encoded features. Returns a dict of intermediate tensors."""
        batch = features.shape[:-3]
        if init is None:
            init = self.slot_attention.init(self.slots, batch, generator)
        slots, attn = run_slot_attention(self.position(features), init, self.slot_attention, self.slot_attention.iterations)
        fused = slots
        if self.uses_fusion:
            if fgbg is None:
                raise ConfigurationError("fusion model needs indicator vectors")
            fused = fuse_slots(slots, fgbg.to(slots.dtype), self.fusion)
        recon, alphas, logits = decode(fused, self.decoder)
        return dict(init=init, slots=slots, attn=attn, fused=fused, recon=recon, alphas=alphas, logits=logits)


def _as_images(images):
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    return images[None] if images.ndim == 3 else images


def labels_from_alphas(alphas, size=None):
    """Argmax over the slot axis, optionally after bilinear upsampling to ``size``."""
    if size is not None and tuple(alphas.shape[-2:]) != tuple(size):
        lead = alphas.shape[:-3]
        flat = alphas.reshape(-1, *alphas.shape[-3:])
        flat = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
        alphas = flat.reshape(*lead, *flat.shape[-3:])
    return alphas.argmax(dim=-3)


def eval_generator(model):
    return torch.Generator().manual_seed(10_000 + model.config.seed)


@torch.no_grad()
def predict_masks(images, model, generator=None, full_resolution=True):
    """Hard labels and alpha masks for raw images ``[..., H, W, 3]``."""
    if not model.trained:
        raise StateError("fusion model is not trained")
    images = _as_images(images)
    return _masks(images, model, eval_generator(model) if generator is None else generator, full_resolution)


@torch.no_grad()
def _masks(images, model, generator, full_resolution):
    out = model(encode(images, model.encoder), model.context(images), generator)
    size = images.shape[1:3] if full_resolution else None
    return labels_from_alphas(out["alphas"], size).numpy(), out["alphas"]


def _schedule(warmup):
    return lambda step: min(1.0, (step + 1) / warmup) if warmup else 1.0


def train_contextfusion(images, encoder, indicator=None, config=None, steps=None, base=None, callback=None):
    """Train the slot-attention autoencoder, with fusion when ``config.use_fusion``.

    With ``base`` (a trained model without fusion) the slot attention, position
    embedding and decoder are copied from it and only ``config.finetune_steps``
    steps are run. ``callback(step, model)`` runs after every optimizer step.
    Returns ``(model, history)``.
    """
    config = config or FusionConfig()
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if config.use_fusion and (indicator is None or not indicator.trained):
        raise StateError("training the fusion stage needs a trained indicator")
    grid = tuple(encode(torch.from_numpy(images[:1]), encoder).shape[1:3])
    model = FusionModel(encoder, grid, config, indicator if config.use_fusion else None)
    if base is not None:
        model.slot_attention.load_state_dict(base.slot_attention.state_dict())
        model.position.load_state_dict(base.position.state_dict())
        model.decoder.load_state_dict(base.decoder.state_dict())
        default_steps = config.finetune_steps
    else:
        default_steps = config.steps
    steps = default_steps if steps is None else steps

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _schedule(0 if base is not None else config.warmup))
    rng = np.random.default_rng([config.seed, 2])
    gen = torch.Generator().manual_seed(config.seed)
    # indicator vectors do not change during training, so compute them once
    context = None
    if model.uses_fusion:
        context = torch.cat([model.context(images[i:i + 64]) for i in range(0, len(images), 64)])
    history = []
    for step in range(steps):
        idx = rng.choice(len(images), size=min(config.batch_size, len(images)), replace=False)
        feats = encode(torch.from_numpy(images[idx]), encoder)
        out = model(feats, None if context is None else context[idx], gen)
        loss = reconstruction_loss(out["recon"], feats)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite reconstruction loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(dict(step=step, loss=float(loss.detach())))
        if callback is not None:
            callback(step, model)
    model.trained = True
    return model, history


def copy_model(model):
    """Deep copy that keeps sharing the frozen encoder and indicator."""
    new = FusionModel(model.encoder, model.decoder.grid, model.config, model.indicator)
    new.load_state_dict(model.state_dict())
    new.trained = model.trained
    return new
