"""Teacher-student foreground/background indicator.

Two slots with fixed roles (index 0 foreground, index 1 background) are
refined by slot attention over projected encoder features. The student is
trained on one augmented view against an EMA teacher on another; the two
assignment grids are brought into a shared frame before comparison.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import nn

from .scenegen import PatchEncoder, encode
from .slotcore import ConfigurationError, SlotAttention, run_slot_attention

log = logging.getLogger(__name__)

FOREGROUND, BACKGROUND = 0, 1


class AlignmentError(ValueError):
    """The two views share no source pixels."""


class TrainingError(RuntimeError):
    pass


class StateError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationRecord:
    crop_box: tuple  # (top, left, height, width) in source pixels
    flip: bool
    photometric: tuple = ()
    source_shape: tuple = ()


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple = (0.4, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    min_crop: int = 8
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter: tuple = (0.4, 0.4, 0.2)  # brightness, contrast, saturation
    gray_p: float = 0.2
    invert_p: float = 0.2
    blur_p: float = 1.0
    blur_sigma: tuple = (0.1, 1.0)

    def for_branch(self, branch):
        """Branch 1 always blurs, branch 2 blurs 10% of the time."""
        return self if branch == 1 else _replace(self, blur_p=0.1)


def _replace(cfg, **kw):
    d = dict(cfg.__dict__)
    d.update(kw)
    return type(cfg)(**d)


def _sample_crop(H, W, cfg, rng):
    area = H * W
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        log_r = rng.uniform(math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
        ratio = math.exp(log_r)
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if cfg.min_crop <= h <= H and cfg.min_crop <= w <= W:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    return 0, 0, H, W


def _resize(image, size):
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    out = F.interpolate(t.float(), size=size, mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def _grayscale(image):
    lum = image @ np.array([0.299, 0.587, 0.114], dtype=image.dtype)
    return np.repeat(lum[..., None], 3, axis=-1)


def augment(image, rng, config=AugmentConfig(), out_size=None):
    """Return ``(view, record)``; the view has the source resolution unless ``out_size`` is given."""
    image = np.asarray(image, dtype=np.float32)
    H, W = image.shape[:2]
    if H < config.min_crop or W < config.min_crop:
        raise ValueError(f"image {H}x{W} smaller than minimum crop {config.min_crop}")
    out_size = (H, W) if out_size is None else tuple(out_size)

    top, left, h, w = _sample_crop(H, W, config, rng)
    view = image[top:top + h, left:left + w]
    if (h, w) != out_size:
        view = _resize(view, out_size)
    flip = bool(rng.uniform() < config.flip_p)
    if flip:
        view = view[:, ::-1]

    ops = []
    if rng.uniform() < config.jitter_p:
        b, c, s = (float(1 + rng.uniform(-j, j)) for j in config.jitter)
        view = view * b
        mean = view.mean()
        view = (view - mean) * c + mean
        gray = _grayscale(view)
        view = gray + (view - gray) * s
        view = np.clip(view, 0, 1)
        ops.append(("jitter", (b, c, s)))
    if rng.uniform() < config.gray_p:
        view = _grayscale(view)
        ops.append(("grayscale", ()))
    if rng.uniform() < config.invert_p:
        view = 1.0 - view
        ops.append(("invert", ()))
    if rng.uniform() < config.blur_p:
        sigma = float(rng.uniform(*config.blur_sigma))
        view = gaussian_filter(view, sigma=(sigma, sigma, 0), mode="reflect")
        ops.append(("blur", (sigma,)))
    record = AugmentationRecord((top, left, h, w), flip, tuple(ops), (H, W))
    return np.ascontiguousarray(view, dtype=np.float32), record


def unflip(grid, record, axis=-2):
    """Undo the horizontal flip of ``record`` on a ``[..., h, w, C]`` grid."""
    return grid.flip(axis) if record.flip else grid


# ---------------------------------------------------------------------------
# assignment and alignment
# ---------------------------------------------------------------------------

def compute_assignment(features, slots):
    """``scores[..., i, j, k] = <features[..., i, j], slots[..., k]>``."""
    if features.shape[-1] != slots.shape[-1]:
        raise ConfigurationError(f"feature dim {features.shape[-1]} != slot dim {slots.shape[-1]}")
    return torch.einsum("...hwd,...kd->...hwk", features, slots)


def alignment_coords(rec_a, shape_a, rec_b, shape_b):
    """Common grid shape and fractional cell coordinates of its centers in each view's grid.

    Coordinates use the cell-center convention (cell ``i`` is centered at ``i``)
    and refer to the un-flipped grids.
    """
    ta, la, ha, wa = rec_a.crop_box
    tb, lb, hb, wb = rec_b.crop_box
    top, left = max(ta, tb), max(la, lb)
    bottom, right = min(ta + ha, tb + hb), min(la + wa, lb + wb)
    if bottom <= top or right <= left:
        raise AlignmentError(f"crops {rec_a.crop_box} and {rec_b.crop_box} do not overlap")
    cell_y, cell_x = ha / shape_a[0], wa / shape_a[1]
    gh = max(1, int(round((bottom - top) / cell_y)))
    gw = max(1, int(round((right - left) / cell_x)))
    ys = top + (np.arange(gh) + 0.5) * (bottom - top) / gh
    xs = left + (np.arange(gw) + 0.5) * (right - left) / gw

    def to_view(rec, shape):
        t, l, h, w = rec.crop_box
        return (ys - t) / (h / shape[0]) - 0.5, (xs - l) / (w / shape[1]) - 0.5

    return (gh, gw), to_view(rec_a, shape_a), to_view(rec_b, shape_b)


def bilinear_sample(grid, ys, xs):
    """Sample ``grid[h, w, C]`` at separable coordinates with edge clamping -> ``[len(ys), len(xs), C]``."""
    h, w = grid.shape[:2]

    def weights(coords, n):
        c = np.clip(coords, 0, n - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        frac = torch.as_tensor(c - lo, dtype=grid.dtype)
        return torch.as_tensor(lo), torch.as_tensor(hi), frac

    y0, y1, fy = weights(np.asarray(ys, float), h)
    x0, x1, fx = weights(np.asarray(xs, float), w)
    rows = grid[y0] * (1 - fy)[:, None, None] + grid[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def inverse_align(a, rec_a, b, rec_b):
    """Map two ``[h, w, K]`` score grids from their views onto the shared source region."""
    a = unflip(a, rec_a)
    b = unflip(b, rec_b)
    shape, (ya, xa), (yb, xb) = alignment_coords(rec_a, a.shape[:2], rec_b, b.shape[:2])
    return bilinear_sample(a, ya, xa), bilinear_sample(b, yb, xb)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def pixel_loss(student, teacher, tau_s=0.1, tau_t=0.07):
    """Mean over locations of CE(softmax(teacher / tau_t), softmax(student / tau_s))."""
    if student.shape != teacher.shape:
        raise ValueError(f"assignment shapes differ: {tuple(student.shape)} vs {tuple(teacher.shape)}")
    target = (teacher.detach() / tau_t).softmax(dim=-1)
    logp = (student / tau_s).log_softmax(dim=-1)
    return -(target * logp).sum(-1).mean()


class PrototypePair(NamedTuple):
    foreground: torch.Tensor
    background: torch.Tensor


def region_prototypes(features, assignment, temperature=1.0, eps=1e-8):
    """Soft region-average pooling of ``features`` under softmax(assignment / temperature)."""
    w = (assignment / temperature).softmax(dim=-1).flatten(-3, -2)  # [..., N, K]
    f = features.flatten(-3, -2)  # [..., N, D]
    mass = w.sum(-2)  # [..., K]
    pooled = torch.einsum("...nk,...nd->...kd", w, f) / mass.clamp_min(eps)[..., None]
    fallback = f.mean(-2, keepdim=True).expand_as(pooled)
    protos = torch.where((mass < eps)[..., None], fallback, pooled)
    return PrototypePair(protos[..., FOREGROUND, :], protos[..., BACKGROUND, :])


def _cosine_matrix(a, b):
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    a = torch.where(na > 0, a / na.clamp_min(1e-30), torch.zeros_like(a))
    b = torch.where(nb > 0, b / nb.clamp_min(1e-30), torch.zeros_like(b))
    return a @ b.transpose(-1, -2)


def stuff_loss(student, teacher):
    """Mean over ordered pairs i != j of cos(bg_s[i], bg_t[j]) - cos(bg_s[i], fg_t[j])."""
    B = student.background.shape[0]
    if B < 2:
        raise ValueError("stuff loss needs a batch of at least 2 images")
    bg_t = teacher.background.detach()
    fg_t = teacher.foreground.detach()
    diff = _cosine_matrix(student.background, bg_t) - _cosine_matrix(student.background, fg_t)
    off = ~torch.eye(B, dtype=torch.bool, device=diff.device)
    return diff[off].sum() / (B * (B - 1))


def marginal_entropy(scores):
    """Entropy of the slot marginal of softmax(scores) over the ``[h, w]`` grid, averaged over any batch axes."""
    m = scores.softmax(dim=-1).mean(dim=(-3, -2))
    return -(m * torch.log(m.clamp_min(1e-30))).sum(-1).mean()


def sep_loss(P, Q):
    return marginal_entropy(P) + marginal_entropy(Q)


def total_indicator_loss(pixel, stuff, sep, w_pixel=0.5, lam=0.5, gamma=0.5):
    return w_pixel * pixel - lam * stuff - gamma * sep


@torch.no_grad()
def ema_update(teacher, student, momentum):
    """In place: teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigurationError(f"momentum must lie in [0, 1], got {momentum}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys() or any(
            t_params[k].shape != s_params[k].shape for k in t_params):
        raise ConfigurationError("teacher and student parameter structures differ")
    for k, t in t_params.items():
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            t.copy_(s_params[k])
        else:
            t.mul_(momentum).add_(s_params[k], alpha=1.0 - momentum)
    return teacher


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def kmeans_like_(module, sharpness=None):
    """Initialize a SlotAttention so its first rounds behave like soft k-means in input space.

    Projections start as identities (keys and values as a shared
    semi-orthogonal map if the input width differs), the GRU passes the
    attention-weighted mean straight through (update gate closed on the old
    state) and the residual MLP starts at zero.
    """
    D = module.dim
    eye = torch.eye(D)
    if module.in_dim == D:
        proj = eye
    else:
        # keys and values share one semi-orthogonal map when the input width differs
        q, _ = torch.linalg.qr(torch.randn(max(D, module.in_dim), min(D, module.in_dim)))
        proj = q if module.in_dim < D else q.T
    with torch.no_grad():
        module.to_q.weight.copy_(eye)
        module.to_k.weight.copy_(proj)
        module.to_v.weight.copy_(proj)
        if sharpness is not None:
            # layer-normed unit vectors have norm sqrt(D), so logits = sharpness * cosine
            module.to_q.weight.mul_(sharpness / math.sqrt(D))
        gru = module.gru
        gru.weight_ih.zero_()
        gru.weight_hh.zero_()
        gru.bias_ih.zero_()
        gru.bias_hh.zero_()
        gru.weight_ih[2 * D:].copy_(eye)  # candidate state reads the update
        gru.bias_ih[D:2 * D].fill_(-4.0)  # keep-gate mostly closed
        nn.init.zeros_(module.mlp[-1].weight)
        nn.init.zeros_(module.mlp[-1].bias)
    return module


class IndicatorNet(nn.Module):
    """Projection head g, two role slots and a slot-attention module.

    Projected features are centered, L2-normalized and then shared by slot
    refinement, scoring and prototype pooling. In training the center is the
    batch mean; a running copy of it is used at inference.
    """

    CENTERINGS = ("running", "image", "none")

    def __init__(self, in_dim=64, dim=32, hidden=128, iterations=3, centering="running", sharpness=10.0):
        super().__init__()
        if centering not in self.CENTERINGS:
            raise ConfigurationError(f"centering must be one of {self.CENTERINGS}, got {centering!r}")
        self.proj = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))
        self.slot_attention = kmeans_like_(SlotAttention(dim, iterations=iterations), sharpness)
        self.slots = nn.Parameter(torch.randn(2, dim))
        self.centering = centering
        self.register_buffer("center", torch.zeros(dim))
        self.register_buffer("center_ready", torch.tensor(False))
        self.center_momentum = 0.9

    def forward(self, features):
        """Return (pooling features, normalized slots ``[.., 2, D]``, scores ``[.., h, w, 2]``)."""
        z = self.proj(features)
        if self.centering == "image":
            centered = F.normalize(z - z.mean(dim=(-3, -2), keepdim=True), dim=-1)
        elif self.centering == "running":
            if self.training:
                mean = z.reshape(-1, z.shape[-1]).mean(0)
                with torch.no_grad():
                    m = self.center_momentum if self.center_ready else 0.0
                    self.center.mul_(m).add_(mean.detach(), alpha=1 - m)
                    self.center_ready.fill_(True)
                centered = F.normalize(z - mean, dim=-1)
            else:
                centered = F.normalize(z - self.center, dim=-1)
        else:
            centered = F.normalize(z, dim=-1)
        init = self.slots.expand(*z.shape[:-3], 2, -1)
        slots, _ = run_slot_attention(centered, init, self.slot_attention, self.slot_attention.iterations)
        slots = F.normalize(slots, dim=-1)
        return centered, slots, compute_assignment(centered, slots)


@dataclass
class IndicatorConfig:
    steps: int = 600
    batch_size: int = 32
    dim: int = 32
    hidden: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    warmup: int = 50
    decay: float = 0.5  # multiplicative lr decay per `decay_every` steps after warmup
    decay_every: int = 400
    clip: float = 1.0
    ema: float = 0.996
    tau_s: float = 0.1
    tau_t: float = 0.07
    w_pixel: float = 0.5
    lam: float = 0.5
    gamma: float = 0.5
    seed: int = 0
    centering: str = "running"
    sharpness: float = 10.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "augment" in d and isinstance(d["augment"], dict):
            aug = {k: tuple(v) if isinstance(v, list) else v for k, v in d["augment"].items()}
            d["augment"] = AugmentConfig(**aug)
        return cls(**d)


class IndicatorModel:
    """Student, EMA teacher, the frozen encoder they read from, and their config."""

    def __init__(self, encoder, config, trained=False):
        self.encoder = encoder
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.student = IndicatorNet(encoder.dim, config.dim, config.hidden,
                                        centering=config.centering, sharpness=config.sharpness)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.trained = trained

    def state_arrays(self):
        out = {}
        for prefix, net in (("student", self.student), ("teacher", self.teacher)):
            for k, v in net.state_dict().items():
                out[f"{prefix}/{k}"] = v.detach().cpu().numpy()
        return out

    def load_arrays(self, arrays):
        for prefix, net in (("student", self.student), ("teacher", self.teacher)):
            sd = {k[len(prefix) + 1:]: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()
                  if k.startswith(prefix + "/")}
            net.load_state_dict(sd)
        self.trained = True


def _lr_lambda(cfg):
    def f(step):
        if step < cfg.warmup:
            return (step + 1) / cfg.warmup
        return cfg.decay ** ((step - cfg.warmup) / cfg.decay_every)
    return f


def indicator_losses(model, images, rng, cfg=None):
    """Forward both branches on a batch of ``[B, H, W, 3]`` images; returns the loss terms."""
    cfg = cfg or model.config
    v1, r1, v2, r2 = [], [], [], []
    for img in images:
        a, ra = augment(img, rng, cfg.augment.for_branch(1))
        b, rb = augment(img, rng, cfg.augment.for_branch(2))
        v1.append(a), r1.append(ra), v2.append(b), r2.append(rb)
    f1 = encode(torch.from_numpy(np.stack(v1)), model.encoder)
    f2 = encode(torch.from_numpy(np.stack(v2)), model.encoder)
    z_s, _, P = model.student(f1)
    with torch.no_grad():
        z_t, _, Q = model.teacher(f2)

    terms = []
    for b in range(len(images)):
        try:
            pa, qa = inverse_align(P[b], r1[b], Q[b], r2[b])
        except AlignmentError:
            continue
        terms.append(pixel_loss(pa, qa, cfg.tau_s, cfg.tau_t))
    pixel = torch.stack(terms).mean() if terms else P.sum() * 0.0
    stuff = stuff_loss(region_prototypes(z_s, P, cfg.tau_s), region_prototypes(z_t, Q, cfg.tau_t))
    sep = sep_loss(P / cfg.tau_s, Q / cfg.tau_t)
    total = total_indicator_loss(pixel, stuff, sep, cfg.w_pixel, cfg.lam, cfg.gamma)
    return dict(pixel=pixel, stuff=stuff, sep=sep, total=total)


def train_indicator(images, config=None, encoder=None, steps=None):
    """Train an indicator on ``images`` ``[N, H, W, 3]``. Returns ``(model, history)``."""
    config = config or IndicatorConfig()
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("empty dataset")
    encoder = encoder or PatchEncoder()
    model = IndicatorModel(encoder, config)
    steps = config.steps if steps is None else steps
    rng = np.random.default_rng([config.seed, 1])
    opt = torch.optim.SGD(model.student.parameters(), lr=config.lr, momentum=config.momentum)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(config))
    history = []
    for step in range(steps):
        idx = rng.choice(len(images), size=min(config.batch_size, len(images)), replace=len(images) < 2)
        losses = indicator_losses(model, images[idx], rng, config)
        if not torch.isfinite(losses["total"]):
            raise TrainingError(f"non-finite indicator loss at step {step}: "
                                f"{ {k: float(v) for k, v in losses.items()} }")
        opt.zero_grad()
        losses["total"].backward()
        nn.utils.clip_grad_norm_(model.student.parameters(), config.clip)
        opt.step()
        sched.step()
        ema_update(model.teacher, model.student, config.ema)
        history.append(dict(step=step, **{k: float(v.detach()) for k, v in losses.items()}))
    model.trained = True
    return model, history


@torch.no_grad()
def teacher_scores(images, model):
    feats = encode(torch.as_tensor(np.asarray(images, dtype=np.float32)), model.encoder)
    was_training = model.teacher.training
    model.teacher.eval()
    try:
        return model.teacher(feats)
    finally:
        model.teacher.train(was_training)


@torch.no_grad()
def predict_fg_bg(images, model):
    """Teacher forward on un-augmented images.

    Returns ``(mask, fgbg)``: ``mask`` is 1 where the foreground slot wins,
    upsampled to image resolution; ``fgbg`` holds the pooled foreground and
    background slot vectors ``[..., 2, D]``.
    """
    if model is None or not model.trained:
        raise StateError("indicator model is not trained")
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    single = images.ndim == 3
    if single:
        images = images[None]
    _, slots, scores = teacher_scores(images, model)
    H, W = images.shape[1:3]
    up = F.interpolate(scores.permute(0, 3, 1, 2), size=(H, W), mode="bilinear", align_corners=False)
    mask = (up.argmax(dim=1) == FOREGROUND).to(torch.uint8).numpy()
    if single:
        return mask[0], slots[0]
    return mask, slots


@torch.no_grad()
def slot_marginals(images, model, tau=None):
    """Mean soft assignment mass per slot over all images and locations."""
    tau = model.config.tau_t if tau is None else tau
    _, _, scores = teacher_scores(images, model)
    return (scores / tau).softmax(-1).reshape(-1, 2).mean(0).numpy()
