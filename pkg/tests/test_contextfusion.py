import numpy as np
import pytest
import torch

from slotforge.contextfusion import (BroadcastDecoder, FusionConfig, FusionLayer, FusionModel, copy_model, decode,
                                     fuse_slots, labels_from_alphas, predict_masks, reconstruction_loss,
                                     train_contextfusion)
from slotforge.indicator import IndicatorConfig, StateError, train_indicator
from slotforge.pipeline import parameter_digest
from slotforge.scenegen import GeneratorConfig, PatchEncoder, encode, generate_dataset, stack_images
from slotforge.slotcore import ConfigurationError, run_slot_attention

from conftest import central_fd_error


def test_fusion_identity_at_init():
    layer = FusionLayer(8, 6)
    slots = torch.randn(3, 5, 8)
    assert torch.equal(fuse_slots(slots, torch.randn(3, 2, 6), layer), slots)


def test_fusion_permutation_equivariance():
    torch.manual_seed(0)
    layer = FusionLayer(8, 6).double()
    for p in layer.parameters():
        torch.nn.init.normal_(p)
    slots = torch.randn(4, 8, dtype=torch.float64)
    fgbg = torch.randn(2, 6, dtype=torch.float64)
    perm = torch.tensor([3, 1, 0, 2])
    assert torch.allclose(fuse_slots(slots, fgbg, layer)[perm], fuse_slots(slots[perm], fgbg, layer))


def test_fusion_scalar_oracle():
    layer = FusionLayer(1, 1).double()
    with torch.no_grad():
        for att in (layer.cross, layer.self_attn):
            att.to_q.weight.fill_(1.0)
            att.to_k.weight.fill_(1.0)
            att.to_v.weight.fill_(1.0)
            att.to_out.weight.fill_(1.0)
            att.to_out.bias.zero_()
    slots = torch.tensor([[1.0], [-1.0]], dtype=torch.float64)
    fgbg = torch.tensor([[2.0], [0.0]], dtype=torch.float64)

    def attend(q, kv):
        out = []
        for qi in q:
            w = torch.softmax(torch.tensor([qi * k for k in kv]), 0)
            out.append(qi + sum(wi * k for wi, k in zip(w, kv)))
        return out

    mid = attend([s.item() for s in slots], [f.item() for f in fgbg])
    ref = attend(mid, mid)
    assert torch.allclose(fuse_slots(slots, fgbg, layer)[:, 0], torch.tensor(ref, dtype=torch.float64))


def test_fusion_context_must_be_pair():
    with pytest.raises(ConfigurationError):
        fuse_slots(torch.randn(3, 8), torch.randn(3, 6), FusionLayer(8, 6))


def test_decode_single_slot_and_normalization():
    dec = BroadcastDecoder(8, 5, (4, 4), hidden=16)
    recon, alphas, _ = decode(torch.randn(2, 1, 8), dec)
    assert recon.shape == (2, 4, 4, 5)
    assert torch.equal(alphas, torch.ones_like(alphas))
    for _ in range(20):
        _, alphas, _ = decode(torch.randn(3, 4, 8) * 10, dec)
        assert (alphas >= 0).all()
        assert torch.allclose(alphas.sum(-3), torch.ones(3, 4, 4), atol=1e-6)


def test_decode_scalar_compositing_oracle():
    dec = BroadcastDecoder(4, 2, (2, 3), hidden=8).double()
    slots = torch.randn(3, 4, dtype=torch.float64)
    recon, alphas, logits = decode(slots, dec)
    for i in range(2):
        for j in range(3):
            outs = [dec.mlp(slots[k] + dec.pos(dec.codes[i, j].double())) for k in range(3)]
            a = torch.softmax(torch.stack([o[-1] for o in outs]), 0)
            ref = sum(a[k] * outs[k][:-1] for k in range(3))
            assert torch.allclose(recon[i, j], ref)
            assert torch.allclose(alphas[:, i, j], a)


def test_reconstruction_loss_examples():
    t = torch.randn(3, 4, 5)
    assert reconstruction_loss(t, t).item() == 0.0
    assert reconstruction_loss(t + 1, t).item() == pytest.approx(1.0)
    r = torch.randn(3, 4, 5)
    assert reconstruction_loss(r, t).item() == pytest.approx(((r - t) ** 2).mean().item())
    with pytest.raises(ValueError):
        reconstruction_loss(r[:2], t)


def test_labels_from_alphas_upsampling():
    alphas = torch.zeros(2, 2, 2)
    alphas[0, :, 0] = 1
    alphas[1, :, 1] = 1
    lab = labels_from_alphas(alphas, (4, 4))
    assert lab.shape == (4, 4) and torch.equal(lab[:, :2], torch.zeros(4, 2, dtype=torch.long))


@pytest.fixture(scope="module")
def setup():
    gcfg = GeneratorConfig(image_size=32, patch_size=8)
    images = stack_images(generate_dataset(gcfg, range(12)))
    enc = PatchEncoder(patch_size=8, dim=16)
    ind, _ = train_indicator(images, IndicatorConfig(batch_size=4, dim=8, hidden=16, warmup=2), enc, steps=2)
    cfg = FusionConfig(slots=3, dim=16, decoder_hidden=16, batch_size=4, warmup=2)
    return images, enc, ind, cfg


def test_reconstruction_gradient_wrt_fusion_params(setup):
    images, enc, ind, cfg = setup
    torch.manual_seed(0)
    model = FusionModel(enc, (4, 4), cfg, ind).double()
    for att in (model.fusion.cross, model.fusion.self_attn):
        torch.nn.init.normal_(att.to_out.weight, std=0.3)
    feats = encode(torch.from_numpy(images[:2]), enc).double()
    fgbg = torch.randn(2, 2, 8, dtype=torch.float64)
    init = torch.randn(2, 3, 16, dtype=torch.float64)
    params = [model.fusion.cross.to_out.weight, model.fusion.self_attn.to_v.weight]

    def loss(*_):
        return reconstruction_loss(model(feats, fgbg, init=init)["recon"], feats)
    assert central_fd_error(loss, params) < 1e-4


def test_training_smoke_and_freezing(setup):
    images, enc, ind, cfg = setup
    before = parameter_digest(enc), parameter_digest(ind.student), parameter_digest(ind.teacher)
    model, hist = train_contextfusion(images, enc, ind, cfg, steps=60)
    assert np.mean([h["loss"] for h in hist[-10:]]) < np.mean([h["loss"] for h in hist[:10]])
    assert before == (parameter_digest(enc), parameter_digest(ind.student), parameter_digest(ind.teacher))
    _, hist2 = train_contextfusion(images, enc, ind, cfg, steps=5)
    _, hist3 = train_contextfusion(images, enc, ind, cfg, steps=5)
    assert hist2 == hist3
    labels, alphas = predict_masks(images[:2], model)
    assert labels.shape == (2, 32, 32) and labels.min() >= 0 and labels.max() < 3


def test_zero_steps_equals_init(setup):
    images, enc, ind, cfg = setup
    model, _ = train_contextfusion(images, enc, ind, cfg, steps=0)
    fresh = FusionModel(enc, (4, 4), cfg, ind)
    assert all(torch.equal(v, fresh.state_dict()[k]) for k, v in model.state_dict().items())


def test_predict_masks_matches_manual_composition(setup):
    images, enc, ind, cfg = setup
    model, _ = train_contextfusion(images, enc, ind, cfg, steps=3)
    from slotforge.contextfusion import eval_generator
    from slotforge.indicator import predict_fg_bg
    labels, alphas = predict_masks(images[:2], model, full_resolution=False)
    x = torch.from_numpy(images[:2])
    feats = encode(x, enc)
    init = model.slot_attention.init(3, (2,), eval_generator(model))
    slots, _ = run_slot_attention(model.position(feats), init, model.slot_attention, 3)
    fused = fuse_slots(slots, predict_fg_bg(images[:2], ind)[1], model.fusion)
    _, ref, _ = decode(fused, model.decoder)
    assert torch.equal(alphas, ref)
    assert np.array_equal(labels, ref.argmax(-3).numpy())


def test_single_slot_labels_zero(setup):
    images, enc, ind, cfg = setup
    import dataclasses
    model, _ = train_contextfusion(images, enc, ind, dataclasses.replace(cfg, slots=1), steps=1)
    labels, _ = predict_masks(images[:2], model)
    assert (labels == 0).all()


def test_state_errors(setup):
    images, enc, ind, cfg = setup
    with pytest.raises(StateError):
        predict_masks(images[:1], FusionModel(enc, (4, 4), cfg, ind))
    with pytest.raises(StateError):
        train_contextfusion(images, enc, None, cfg, steps=1)


def test_finetune_from_base_copies_weights(setup):
    import dataclasses
    images, enc, ind, cfg = setup
    base, _ = train_contextfusion(images, enc, None, dataclasses.replace(cfg, use_fusion=False), steps=3)
    tuned, hist = train_contextfusion(images, enc, ind, dataclasses.replace(cfg, finetune_steps=0), base=base)
    assert hist == []
    assert torch.equal(tuned.slot_attention.to_q.weight, base.slot_attention.to_q.weight)
    clone = copy_model(tuned)
    assert all(torch.equal(v, tuned.state_dict()[k]) for k, v in clone.state_dict().items())
