import math

import pytest
import torch

from slotforge.slotcore import (Attention, ConfigurationError, SlotAttention, attend, attention_masks_ok,
                                cross_attention, init_slots, run_slot_attention, self_attention,
                                slot_attention_step)


def make(dim=8, in_dim=6, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return SlotAttention(dim, in_dim=in_dim).to(dtype)


def test_init_slots_zero_std_gives_copies_of_mean():
    mean = torch.arange(4.0)
    s = init_slots(3, 4, mean, torch.full((4,), -math.inf), batch_shape=(2,))
    assert s.shape == (2, 3, 4)
    assert torch.equal(s, mean.expand(2, 3, 4))


def test_init_slots_is_seeded():
    a = init_slots(5, 4, torch.zeros(4), torch.zeros(4), torch.Generator().manual_seed(3))
    b = init_slots(5, 4, torch.zeros(4), torch.zeros(4), torch.Generator().manual_seed(3))
    assert torch.equal(a, b)


def test_init_slots_rejects_bad_dims():
    with pytest.raises(ConfigurationError):
        init_slots(0, 4, torch.zeros(4), torch.zeros(4))
    with pytest.raises(ConfigurationError):
        init_slots(2, 4, torch.zeros(3), torch.zeros(3))


def test_step_shapes_and_normalization():
    sa = make()
    feats = torch.randn(2, 5, 7, 6)
    slots = sa.init(4, (2,))
    new, attn = slot_attention_step(feats, slots, sa)
    assert new.shape == (2, 4, 8)
    assert attn.shape == (2, 4, 5, 7)
    assert attention_masks_ok(attn)


def test_single_slot_gets_all_attention():
    sa = make()
    _, attn = run_slot_attention(torch.randn(3, 3, 6), sa.init(1), sa)
    assert torch.allclose(attn, torch.ones_like(attn))


def test_slot_permutation_equivariance():
    sa = make(dtype=torch.float64)
    feats = torch.randn(4, 4, 6, dtype=torch.float64)
    init = torch.randn(3, 8, dtype=torch.float64)
    perm = torch.tensor([2, 0, 1])
    s1, a1 = run_slot_attention(feats, init, sa)
    s2, a2 = run_slot_attention(feats, init[perm], sa)
    assert torch.allclose(s1[perm], s2, atol=1e-10)
    assert torch.allclose(a1[perm], a2, atol=1e-10)


def test_run_equals_repeated_steps():
    sa = make(dtype=torch.float64)
    feats = torch.randn(4, 4, 6, dtype=torch.float64)
    slots = torch.randn(3, 8, dtype=torch.float64)
    ref = slots
    for _ in range(3):
        ref, attn_ref = slot_attention_step(feats, ref, sa)
    out, attn = run_slot_attention(feats, slots, sa, 3)
    assert torch.allclose(out, ref) and torch.allclose(attn, attn_ref)


def test_input_dim_mismatch():
    sa = make()
    with pytest.raises(ConfigurationError):
        run_slot_attention(torch.randn(3, 3, 5), sa.init(2), sa)
    with pytest.raises(ConfigurationError):
        run_slot_attention(torch.randn(3, 3, 6), sa.init(2), sa, iterations=0)


def test_attention_scalar_oracle():
    # one query, two keys, scalar dims with hand-set weights
    att = Attention(1, zero_init=False).double()
    with torch.no_grad():
        att.to_q.weight.fill_(2.0)
        att.to_k.weight.fill_(1.0)
        att.to_v.weight.fill_(3.0)
        att.to_out.weight.fill_(0.5)
        att.to_out.bias.fill_(0.1)
    q = torch.tensor([[1.0]], dtype=torch.float64)
    kv = torch.tensor([[0.0], [1.0]], dtype=torch.float64)
    out, w = attend(q, kv, att)
    e = math.exp(2.0)
    w_ref = [1 / (1 + e), e / (1 + e)]
    assert torch.allclose(w[0], torch.tensor(w_ref, dtype=torch.float64))
    expected = 1.0 + 0.5 * (w_ref[1] * 3.0) + 0.1
    assert out.item() == pytest.approx(expected, abs=1e-12)


def test_zero_init_attention_is_identity():
    att = Attention(8, kv_dim=4)
    q = torch.randn(5, 8)
    assert torch.equal(cross_attention(q, torch.randn(2, 4), att), q)
    att2 = Attention(8)
    assert torch.equal(self_attention(q, att2), q)


def test_attention_dim_errors():
    att = Attention(8, kv_dim=4)
    with pytest.raises(ConfigurationError):
        attend(torch.randn(2, 8), torch.randn(2, 5), att)


def test_attention_masks_ok_detects_bad_masks():
    attn = torch.full((3, 2, 2), 1 / 3)
    assert attention_masks_ok(attn)
    assert not attention_masks_ok(attn * 1.1)
