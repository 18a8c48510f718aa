"""Pipeline configuration, checkpoint archives and the stage runners behind the CLI.

Every stage reads and writes files under one output directory:

    data/train, data/val          datasets (see ``scenegen.write_dataset``)
    indicator.npz/.json           indicator checkpoint and manifest
    indicator_loss.csv            step, pixel, stuff, sep, total
    fusion_base.npz/.json         slot-attention autoencoder without fusion
    fusion.npz/.json              model with the fusion layer
    bootstrap.npz/.json           adapter and branch slot attention
    eval_<split>.csv              per-image and mean scores per variant
    viz/NNNNN.png                 image | gt | base | fusion | full
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import bootstrap as bs
from . import contextfusion as cf
from . import indicator as ind
from .metrics import aggregate, score_image, write_scores_csv
from .scenegen import GeneratorConfig, PatchEncoder, load_dataset, save_png, write_dataset

log = logging.getLogger(__name__)

VARIANTS = ("base", "fusion", "full")


class MissingArtifactError(FileNotFoundError):
    """A stage's prerequisite checkpoint or dataset is absent."""


@dataclasses.dataclass
class EncoderConfig:
    patch_size: int = 8
    dim: int = 64
    seed: int = 0
    position_scale: float = 0.0
    bias_scale: float = 0.1


@dataclasses.dataclass
class DataConfig:
    train_count: int = 200
    val_count: int = 40


@dataclasses.dataclass
class PipelineConfig:
    generator: GeneratorConfig = dataclasses.field(
        default_factory=lambda: GeneratorConfig(image_size=128, patch_size=8))
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    encoder: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    indicator: ind.IndicatorConfig = dataclasses.field(default_factory=ind.IndicatorConfig)
    fusion: cf.FusionConfig = dataclasses.field(default_factory=cf.FusionConfig)
    bootstrap: bs.BootstrapConfig = dataclasses.field(default_factory=bs.BootstrapConfig)
    slots: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.generator.patch_size != self.encoder.patch_size:
            raise ind.ConfigurationError("generator.patch_size must equal encoder.patch_size")
        if self.slots < 1:
            raise ind.ConfigurationError("slots must be >= 1")
        if self.bootstrap.schedule not in ("sequential", "simultaneous"):
            raise ind.ConfigurationError(f"unknown bootstrap schedule {self.bootstrap.schedule!r}")

    # the top-level seed and slot count are pushed into the stage configs
    def indicator_config(self):
        return dataclasses.replace(self.indicator, seed=self.seed)

    def fusion_config(self, use_fusion=True):
        return dataclasses.replace(self.fusion, seed=self.seed, slots=self.slots, use_fusion=use_fusion)

    def bootstrap_config(self):
        return dataclasses.replace(self.bootstrap, seed=self.seed)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        sections = dict(generator=GeneratorConfig, data=DataConfig, encoder=EncoderConfig,
                        indicator=ind.IndicatorConfig, fusion=cf.FusionConfig, bootstrap=bs.BootstrapConfig)
        for name, typ in sections.items():
            if name in d:
                section = d.pop(name)
                kw[name] = typ.from_dict(section) if hasattr(typ, "from_dict") else typ(**section)
        unknown = set(d) - {"slots", "seed"}
        if unknown:
            raise ind.ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw.update(d)
        if "generator" not in kw:
            kw["generator"] = cls().generator
        return cls(**kw)


def load_config(path=None, seed=None, steps=None):
    """Read a JSON config (missing keys take defaults) and apply CLI overrides."""
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"config file not found: {path}")
        cfg = PipelineConfig.from_dict(json.loads(path.read_text()))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if steps is not None:
        cfg = dataclasses.replace(
            cfg,
            indicator=dataclasses.replace(cfg.indicator, steps=steps),
            fusion=dataclasses.replace(cfg.fusion, steps=steps, finetune_steps=steps),
            bootstrap=dataclasses.replace(cfg.bootstrap, steps=steps))
    return cfg


def _jsonable(obj):
    if isinstance(obj, tuple):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def config_json(cfg):
    return json.dumps(_jsonable(cfg.to_dict()), sort_keys=True, indent=1)


def config_hash(cfg):
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    canonical = json.dumps(_jsonable(cfg.to_dict()), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, arrays, config_hash, kind, extra=None):
    """Flat ``.npz`` of named arrays plus a ``.json`` manifest of shapes and the config hash."""
    path = Path(path).with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.asarray(v) for k, v in sorted(arrays.items())}
    np.savez(path, **arrays)
    manifest = dict(kind=kind, config_hash=config_hash,
                    arrays={k: dict(shape=list(v.shape), dtype=str(v.dtype)) for k, v in arrays.items()})
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path, kind=None):
    """Returns ``(arrays, manifest)``; shapes are checked against the manifest."""
    path = Path(path).with_suffix(".npz")
    manifest_path = path.with_suffix(".json")
    if not path.exists() or not manifest_path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path} (and {manifest_path.name})")
    manifest = json.loads(manifest_path.read_text())
    if kind is not None and manifest.get("kind") != kind:
        raise ind.ConfigurationError(f"{path} holds a {manifest.get('kind')!r} checkpoint, expected {kind!r}")
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    for k, meta in manifest["arrays"].items():
        if k not in arrays or list(arrays[k].shape) != meta["shape"]:
            raise ind.ConfigurationError(f"{path}: array {k} does not match its manifest entry")
    return arrays, manifest


def module_arrays(module, prefix=""):
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module, arrays, prefix=""):
    sd = {k[len(prefix):]: torch.from_numpy(np.asarray(v)) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(sd)


def parameter_digest(module):
    """SHA-256 over a module's state, used to check frozen components."""
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def build_encoder(cfg):
    e = cfg.encoder
    return PatchEncoder(patch_size=e.patch_size, dim=e.dim, seed=e.seed,
                        position_scale=e.position_scale, bias_scale=e.bias_scale)


def _images(samples):
    return np.stack([s.image for s in samples]).astype(np.float32)


def load_split(out, split):
    root = Path(out) / "data" / split
    if not (root / "manifest.json").exists():
        raise MissingArtifactError(f"dataset {root} not found; run gen-data first")
    return load_dataset(root)


def gen_data(cfg, out):
    out = Path(out)
    h = config_hash(cfg)
    write_dataset(out / "data" / "train", cfg.generator, cfg.data.train_count, h)
    write_dataset(out / "data" / "val", cfg.generator, cfg.data.val_count, h, start=cfg.data.train_count)
    (out / "config.json").write_text(config_json(cfg))
    return out / "data"


def fit_indicator(images, cfg, encoder=None, indicator_config=None):
    encoder = encoder or build_encoder(cfg)
    return ind.train_indicator(images, indicator_config or cfg.indicator_config(), encoder)


def save_indicator(model, history, cfg, out):
    out = Path(out)
    h = config_hash(cfg)
    save_checkpoint(out / "indicator", model.state_arrays(), h, "indicator")
    with (out / "indicator_loss.csv").open("w", newline="") as fh:
        fh.write(f"# config_hash: {h}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "pixel", "stuff", "sep", "total"])
        for r in history:
            writer.writerow([r["step"]] + [f"{r[k]:.6f}" for k in ("pixel", "stuff", "sep", "total")])


def load_indicator(cfg, out, encoder=None):
    arrays, _ = load_checkpoint(Path(out) / "indicator", "indicator")
    model = ind.IndicatorModel(encoder or build_encoder(cfg), cfg.indicator_config())
    model.load_arrays(arrays)
    return model


def train_indicator_stage(cfg, out):
    images = _images(load_split(out, "train"))
    model, history = fit_indicator(images, cfg)
    save_indicator(model, history, cfg, out)
    return model, history


def _grid(cfg):
    n = cfg.generator.image_size // cfg.encoder.patch_size
    return n, n


def save_fusion(model, cfg, out, name):
    save_checkpoint(Path(out) / name, module_arrays(model), config_hash(cfg), "fusion",
                    extra=dict(use_fusion=model.uses_fusion))


def load_fusion(cfg, out, name, encoder=None, indicator=None):
    arrays, manifest = load_checkpoint(Path(out) / name, "fusion")
    use_fusion = manifest["use_fusion"]
    if use_fusion and indicator is None:
        indicator = load_indicator(cfg, out, encoder)
    model = cf.FusionModel(encoder or build_encoder(cfg), _grid(cfg), cfg.fusion_config(use_fusion),
                           indicator if use_fusion else None)
    load_module_arrays(model, arrays)
    model.trained = True
    return model


def fit_fusion(images, cfg, encoder, indicator, use_fusion=True, base=None, callback=None):
    return cf.train_contextfusion(images, encoder, indicator if use_fusion else None,
                                  cfg.fusion_config(use_fusion), base=base, callback=callback)


def train_fusion_stage(cfg, out, variant=None):
    """Train the base model (variant ``base``), the fusion model (``fusion``) or both."""
    images = _images(load_split(out, "train"))
    encoder = build_encoder(cfg)
    models = {}
    if variant in (None, "base", "full"):
        models["base"], _ = fit_fusion(images, cfg, encoder, None, use_fusion=False)
        save_fusion(models["base"], cfg, out, "fusion_base")
    if variant in (None, "fusion", "full"):
        indicator = load_indicator(cfg, out, encoder)
        base = None
        if cfg.fusion.init_from_base:
            base = models.get("base") or load_fusion(cfg, out, "fusion_base", encoder)
        models["fusion"], _ = fit_fusion(images, cfg, encoder, indicator, base=base)
        save_fusion(models["fusion"], cfg, out, "fusion")
    return models


def save_bootstrap(state, cfg, out):
    save_checkpoint(Path(out) / "bootstrap", module_arrays(state), config_hash(cfg), "bootstrap")


def load_bootstrap(cfg, out, fusion_model):
    arrays, _ = load_checkpoint(Path(out) / "bootstrap", "bootstrap")
    state = bs.BootstrapState(fusion_model, cfg.bootstrap_config())
    load_module_arrays(state, arrays)
    state.trained = True
    return state


def train_bootstrap_stage(cfg, out):
    """Sequential: adapt against the saved fusion model. Simultaneous: retrain fusion and interleave."""
    images = _images(load_split(out, "train"))
    encoder = build_encoder(cfg)
    if cfg.bootstrap.schedule == "sequential":
        fusion = load_fusion(cfg, out, "fusion", encoder)
        state, history = bs.train_bootstrap(images, fusion, cfg.bootstrap_config())
    else:
        indicator = load_indicator(cfg, out, encoder)
        base = load_fusion(cfg, out, "fusion_base", encoder) if cfg.fusion.init_from_base else None
        fusion, state, history = bs.train_simultaneous(
            images, encoder, indicator, cfg.fusion_config(), cfg.bootstrap_config(), base=base)
        save_fusion(fusion, cfg, out, "fusion")
    save_bootstrap(state, cfg, out)
    return state, history


def fit_all(cfg, images, indicator=None, encoder=None):
    """Train every stage in memory; returns the model dict used by :func:`score_variants`."""
    encoder = encoder or build_encoder(cfg)
    if indicator is None:
        indicator, _ = fit_indicator(images, cfg, encoder)
    base, _ = fit_fusion(images, cfg, encoder, None, use_fusion=False)
    if cfg.bootstrap.schedule == "simultaneous":
        fusion, state, _ = bs.train_simultaneous(images, encoder, indicator, cfg.fusion_config(),
                                                 cfg.bootstrap_config(),
                                                 base=base if cfg.fusion.init_from_base else None)
    else:
        fusion, _ = fit_fusion(images, cfg, encoder, indicator, base=base if cfg.fusion.init_from_base else None)
        state, _ = bs.train_bootstrap(images, fusion, cfg.bootstrap_config())
    return dict(indicator=indicator, base=base, fusion=fusion, bootstrap=state)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_variant(variant, images, models):
    if variant == "base":
        return cf.predict_masks(images, models["base"])[0]
    if variant == "fusion":
        return cf.predict_masks(images, models["fusion"])[0]
    if variant == "full":
        return bs.inference_combined(images, models["bootstrap"].adaptive, models["fusion"])[0]
    raise ind.ConfigurationError(f"unknown variant {variant!r}")


def load_models(cfg, out, variants):
    encoder = build_encoder(cfg)
    models = {}
    if "base" in variants:
        models["base"] = load_fusion(cfg, out, "fusion_base", encoder)
    if "fusion" in variants or "full" in variants:
        indicator = load_indicator(cfg, out, encoder)
        models["indicator"] = indicator
        models["fusion"] = load_fusion(cfg, out, "fusion", encoder, indicator)
    if "full" in variants:
        models["bootstrap"] = load_bootstrap(cfg, out, models["fusion"])
    return models


def score_variants(samples, models, variants, batch=20):
    """Per-image score rows for each variant.

    ``fg_iou`` is the indicator's binary mask against the ground truth and is
    left empty for the base variant, which has no indicator.
    """
    images = _images(samples)
    fg = None
    if "indicator" in models:
        fg = np.concatenate([ind.predict_fg_bg(images[i:i + batch], models["indicator"])[0]
                             for i in range(0, len(images), batch)])
    rows = []
    for variant in variants:
        labels = np.concatenate([predict_variant(variant, images[i:i + batch], models)
                                 for i in range(0, len(images), batch)])
        for i, s in enumerate(samples):
            use_fg = fg is not None and variant != "base"
            r = score_image(labels[i], s.instance_mask, s.category_mask,
                            fg[i] if use_fg else None, s.fgbg_mask if use_fg else None)
            rows.append(dict(variant=variant, image=f"{i:05d}", mbo_i=r["mbo_i"], mbo_c=r["mbo_c"],
                             miou=r["miou"], fg_iou=r.get("fg_iou", "")))
    return rows


def summarize(rows):
    """Mean row per variant; empty cells are skipped."""
    out = []
    for variant in dict.fromkeys(r["variant"] for r in rows):
        vr = [r for r in rows if r["variant"] == variant]
        keys = [k for k in ("mbo_i", "mbo_c", "miou", "fg_iou") if isinstance(vr[0][k], float)]
        means = aggregate(vr, keys)
        out.append(dict(variant=variant, image="mean", **{k: means.get(k, "") for k in
                                                           ("mbo_i", "mbo_c", "miou", "fg_iou")}))
    return out


def eval_stage(cfg, out, variants=VARIANTS, split="val"):
    samples = load_split(out, split)
    models = load_models(cfg, out, variants)
    rows = score_variants(samples, models, variants)
    means = summarize(rows)
    path = Path(out) / f"eval_{split}.csv"
    write_scores_csv(path, rows + means, config_hash(cfg))
    return path, means


def read_scores_csv(path):
    with Path(path).open() as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

_PALETTE = np.array([[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
                     [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
                     [250, 190, 212], [0, 128, 128]], dtype=np.uint8)


def colorize(labels):
    return _PALETTE[np.asarray(labels) % len(_PALETTE)]


def viz_stage(cfg, out, n=4, split="val"):
    """Write ``n`` overlays, one row per image: image | gt | base | fusion | full."""
    samples = load_split(out, split)[:n]
    models = load_models(cfg, out, VARIANTS)
    images = _images(samples)
    panels = [np.round(images * 255).astype(np.uint8), np.stack([colorize(s.instance_mask) for s in samples])]
    for variant in VARIANTS:
        panels.append(colorize(predict_variant(variant, images, models)))
    root = Path(out) / "viz"
    root.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    paths = []
    for i in range(len(samples)):
        row = np.concatenate([p[i] for p in panels], axis=1)
        path = root / f"{i:05d}.png"
        save_png(path, row, h)
        paths.append(path)
    return paths

