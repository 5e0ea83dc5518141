"""Adapter identities, normalization properties, freezing, pluggability."""

import numpy as np
import pytest

from guidedistill import autodiff as ad
from guidedistill.adapter import (GuidanceAdapter, StudentModel,
                                  attention_normalize, combine_features,
                                  plug_into)
from guidedistill.autodiff import Tensor, backward
from guidedistill.prompts import make_prompt
from guidedistill.unet import ArchitectureError, TeacherModel

TINY = dict(widths=(8, 16, 24), attn_inner=16, attn_heads=2)


def tiny_teacher(seed=9):
    t = TeacherModel(seed=seed, **TINY)
    t.set_trainable(False)
    return t


def rand_cond(teacher, prompts):
    with ad.no_grad():
        return teacher.encode(prompts)


def test_attention_normalize_zero_alpha_beta():
    rng = np.random.default_rng(0)
    zp = Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
    zn = Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
    out = attention_normalize(zp, zn, Tensor(np.zeros(())), Tensor(np.zeros(())))
    assert np.allclose(out.data, 0.0)


@pytest.mark.parametrize("c", [1e-3, 1.0, 1e3])
def test_attention_normalize_scale_invariance(c):
    rng = np.random.default_rng(1)
    zp = Tensor(rng.standard_normal((2, 6, 8)).astype(np.float32))
    zn_base = rng.standard_normal((2, 6, 8)).astype(np.float32)
    alpha = Tensor(np.asarray(0.7, dtype=np.float32))
    beta = Tensor(np.asarray(-0.2, dtype=np.float32))
    ref = attention_normalize(zp, Tensor(zn_base), alpha, beta).data
    got = attention_normalize(zp, Tensor(np.float32(c) * zn_base), alpha, beta).data
    denom = np.maximum(np.abs(ref), 1.0)
    assert np.max(np.abs(got - ref) / denom) <= 1e-6


def test_attention_normalize_homogeneous_in_positive_norm():
    rng = np.random.default_rng(2)
    zp = rng.standard_normal((1, 4, 8)).astype(np.float32)
    zn = Tensor(rng.standard_normal((1, 4, 8)).astype(np.float32))
    alpha = Tensor(np.asarray(1.0, dtype=np.float32))
    beta = Tensor(np.asarray(0.5, dtype=np.float32))
    g1 = attention_normalize(Tensor(zp), zn, alpha, beta).data
    g2 = attention_normalize(Tensor(2 * zp), zn, alpha, beta).data
    assert np.allclose(g2 - 0.5, 2 * (g1 - 0.5), atol=1e-5)


def test_attention_normalize_degenerate_rows():
    zp = Tensor(np.ones((1, 2, 4), dtype=np.float32))
    zn = Tensor(np.array([[[0, 0, 0, 0], [1, 1, 1, 1]]], dtype=np.float32))
    out = attention_normalize(zp, zn, Tensor(np.asarray(1.0, dtype=np.float32)),
                              Tensor(np.asarray(0.25, dtype=np.float32)))
    assert np.allclose(out.data[0, 0], 0.25)  # zero-norm row: only beta
    assert not np.allclose(out.data[0, 1], 0.25)


def test_combine_features_identity_and_shift():
    rng = np.random.default_rng(3)
    zp = Tensor(rng.standard_normal((2, 3, 4)).astype(np.float32))
    assert np.array_equal(combine_features(zp, Tensor(np.zeros((2, 3, 4), dtype=np.float32))).data,
                          zp.data)
    shifted = combine_features(zp, Tensor(np.full((2, 3, 4), 0.3, dtype=np.float32)))
    assert np.allclose(shifted.data, zp.data - 0.3, atol=1e-7)


def test_adapter_init_copies_host_and_much_smaller():
    t = tiny_teacher()
    a = GuidanceAdapter(t)
    for hb, ab in zip(t.unet.attention_blocks(), a.blocks):
        assert np.array_equal(hb.wk.data, ab.wk.data)
        assert np.array_equal(hb.wv.data, ab.wv.data)
        assert float(ab.alpha.data) == 0.0 and float(ab.beta.data) == 0.0
    assert a.param_count() < 0.1 * t.param_count()
    assert a.zero_control()


def test_init_identity_negative_equals_positive_features():
    # with copied projections and the same prompt, Z_n == Z_p bitwise
    t = tiny_teacher()
    a = GuidanceAdapter(t)
    prompt = make_prompt(["circle", "bright", "solid"])
    cond = rand_cond(t, [prompt])
    block = t.unet.attention_blocks()[0]
    ablock = a.blocks[0]
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((1, 8, 8, block.channels)).astype(np.float32))
    from guidedistill.unet import attend, split_heads
    with ad.no_grad():
        tokens = ad.reshape(block.gn(x), (1, 64, block.channels))
        q = split_heads(ad.matmul(tokens, block.wq), block.heads)
        k = ad.matmul(cond.vectors, block.wk)
        v = ad.matmul(cond.vectors, block.wv)
        z_p = attend(q, k, v, cond.mask, block.heads)
        z_n = ablock.negative_features(q, cond)
    assert np.array_equal(z_p.data, z_n.data)


def test_zero_adapter_identity_full_forward():
    t = tiny_teacher()
    student = StudentModel(t, GuidanceAdapter(t))
    rng = np.random.default_rng(5)
    for _ in range(20):
        z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        tv = rng.uniform(0.05, 1.0, 2).astype(np.float32)
        cp = rand_cond(t, [make_prompt(["circle", "bright"]), make_prompt(["square"])])
        cn = rand_cond(t, [make_prompt(["blur", "plain"]), ()])
        with ad.no_grad():
            ref = t.predict_noise(z, tv, cp).data
            got = student.predict_noise(z, tv, cp, cn).data
        denom = np.maximum(np.abs(ref), 1.0)
        assert np.max(np.abs(got - ref) / denom) <= 1e-6


def test_empty_negative_prompt_contributes_only_beta_shift():
    t = tiny_teacher()
    a = GuidanceAdapter(t)
    student = StudentModel(t, a)
    rng = np.random.default_rng(6)
    z = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
    tv = np.array([0.5], dtype=np.float32)
    cp = rand_cond(t, [make_prompt(["circle"])])
    cn_empty = rand_cond(t, [()])
    with ad.no_grad():
        ref = t.predict_noise(z, tv, cp).data
        same = student.predict_noise(z, tv, cp, cn_empty).data
    assert np.allclose(ref, same, atol=1e-6)  # alpha = beta = 0 at init
    a.blocks[0].alpha.data = np.asarray(5.0, dtype=np.float32)  # scaled term still 0
    with ad.no_grad():
        still = student.predict_noise(z, tv, cp, cn_empty).data
    assert np.allclose(ref, still, atol=1e-6)
    a.blocks[0].beta.data = np.asarray(0.5, dtype=np.float32)
    with ad.no_grad():
        shifted = student.predict_noise(z, tv, cp, cn_empty).data
    assert not np.allclose(ref, shifted, atol=1e-6)


def test_gradients_reach_adapter_only():
    t = tiny_teacher()
    a = GuidanceAdapter(t)
    student = StudentModel(t, a)
    rng = np.random.default_rng(7)
    z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
    tv = np.array([0.5, 0.7], dtype=np.float32)
    cp = rand_cond(t, [make_prompt(["circle"]), make_prompt(["cross"])])
    cn = rand_cond(t, [make_prompt(["blur"]), make_prompt(["speckle", "hole"])])
    pred = student.predict_noise(z, tv, cp, cn)
    target = Tensor(rng.standard_normal(pred.shape).astype(np.float32))
    backward(ad.mse(pred, target))
    for name, p in a.named_params():
        assert p.grad is not None, f"{name} missing grad"
    for name, p in t.named_params():
        assert p.grad is None, f"teacher {name} received grad"


def test_plug_into_compatible_and_reshaped_rejection():
    t = tiny_teacher(seed=1)
    other = tiny_teacher(seed=2)
    a = GuidanceAdapter(t)
    student = plug_into(a, other)  # same geometry, different weights: fine
    assert student.teacher is other
    reshaped = TeacherModel(seed=3, widths=(8, 16, 32), attn_inner=16, attn_heads=2)
    with pytest.raises(ArchitectureError):
        plug_into(a, reshaped)
    thin = TeacherModel(seed=3, widths=(8, 16, 24), attn_inner=8, attn_heads=2)
    with pytest.raises(ArchitectureError):
        plug_into(a, thin)


def test_plugged_student_matches_training_host_behavior():
    t = tiny_teacher(seed=1)
    a = GuidanceAdapter(t)
    for b in a.blocks:  # give the adapter some nonzero control
        b.alpha.data = np.asarray(0.3, dtype=np.float32)
    s1 = StudentModel(t, a)
    s2 = plug_into(a, t)
    rng = np.random.default_rng(8)
    z = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
    tv = np.array([0.4], dtype=np.float32)
    cp = rand_cond(t, [make_prompt(["triangle"])])
    cn = rand_cond(t, [make_prompt(["hole"])])
    with ad.no_grad():
        assert np.array_equal(s1.predict_noise(z, tv, cp, cn).data,
                              s2.predict_noise(z, tv, cp, cn).data)
