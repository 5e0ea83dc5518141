"""Denoiser architecture contracts, guidance combiner, teacher training."""

import numpy as np
import pytest

from guidedistill import autodiff as ad
from guidedistill.autodiff import Tensor
from guidedistill.data import DatasetSpec, make_dataset
from guidedistill.prompts import make_prompt
from guidedistill.rng import substream
from guidedistill.schedule import CosineSchedule
from guidedistill.training import TeacherConfig, finetune_teacher, train_teacher
from guidedistill.unet import TeacherModel, cfg_combine, predict_cfg

TINY = dict(widths=(8, 16, 24), attn_inner=16, attn_heads=2)

# frozen after implementation: seed-2024 teacher on a fixed input
GOLDEN_FIRST8 = np.array([
    -0.007347722537815571, 0.0014333222061395645, 0.011452406644821167,
    0.03291195258498192, 0.03291785344481468, 0.019044846296310425,
    0.019753417000174522, -0.023924363777041435], dtype=np.float64)
GOLDEN_SUM = 5.455571174621582


def tiny_teacher(seed=5):
    return TeacherModel(seed=seed, **TINY)


def test_output_shape_matches_input():
    t = tiny_teacher()
    z = np.zeros((3, 1, 16, 16), dtype=np.float32)
    with ad.no_grad():
        out = t.predict_noise(z, np.array([0.5, 0.2, 0.9], dtype=np.float32),
                              t.encode([(), (), ()]))
    assert out.shape == (3, 1, 16, 16)


def test_rejects_wrong_latent_shape_and_time():
    t = tiny_teacher()
    cond = t.encode([()])
    with pytest.raises(ad.ShapeError):
        t.predict_noise(np.zeros((1, 1, 8, 8), dtype=np.float32), [0.5], cond)
    with pytest.raises(ValueError):
        t.predict_noise(np.zeros((1, 1, 16, 16), dtype=np.float32), [1.5], cond)
    with pytest.raises(ValueError):
        t.predict_noise(np.zeros((1, 1, 16, 16), dtype=np.float32), [0.0], cond)


def test_parameter_budget_default_arch():
    t = TeacherModel(seed=0)
    assert t.param_count() < 2_000_000
    assert len(t.unet.attention_blocks()) == 4


def test_untrained_forward_golden_snapshot():
    t = TeacherModel(seed=2024)
    rng = substream(99, "golden")
    z = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
    cond = t.encode([make_prompt(["cross", "small", "dim", "striped"])])
    with ad.no_grad():
        out = t.predict_noise(z, np.array([0.62], dtype=np.float32), cond).data
    assert np.allclose(out.reshape(-1)[:8], GOLDEN_FIRST8, atol=1e-5)
    assert float(out.sum()) == pytest.approx(GOLDEN_SUM, abs=1e-3)


def test_conditional_vs_unconditional_differ():
    t = tiny_teacher()
    rng = np.random.default_rng(1)
    z = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
    tv = np.array([0.5], dtype=np.float32)
    with ad.no_grad():
        a = t.predict_noise(z, tv, t.encode([make_prompt(["circle", "bright"])])).data
        b = t.predict_noise(z, tv, t.encode([()])).data
    assert not np.allclose(a, b, atol=1e-7)


def test_nfe_counter_counts_per_sample():
    t = tiny_teacher()
    z = np.zeros((4, 1, 16, 16), dtype=np.float32)
    with ad.no_grad():
        t.predict_noise(z, np.full(4, 0.5, dtype=np.float32), t.encode([()] * 4))
    assert t.nfe == 4
    with ad.no_grad():
        predict_cfg(t, z, np.full(4, 0.5, dtype=np.float32),
                    t.encode([()] * 4), t.encode([()] * 4), 8.0)
    assert t.nfe == 4 + 8


def test_cfg_combine_cases():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
    b = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
    assert np.allclose(cfg_combine(a, b, 1.0), a)
    assert np.allclose(cfg_combine(a, a, 8.0), a, atol=1e-6)
    # affine identity: combine(a,b,w) + combine(b,a,w) == a + b
    for w in (0.0, 1.0, 8.0, -2.5):
        lhs = cfg_combine(a, b, w) + cfg_combine(b, a, w)
        assert np.allclose(lhs, a + b, atol=1e-5)


def test_predict_cfg_matches_two_forwards():
    t = tiny_teacher()
    rng = np.random.default_rng(3)
    z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
    tv = np.array([0.3, 0.8], dtype=np.float32)
    cp = t.encode([make_prompt(["circle"]), make_prompt(["square"])])
    cn = t.encode([(), make_prompt(["blur"])])
    with ad.no_grad():
        ref = cfg_combine(t.predict_noise(z, tv, cp).data,
                          t.predict_noise(z, tv, cn).data, 8.0)
    fused = predict_cfg(t, z, tv, cp, cn, 8.0)
    assert np.allclose(ref, fused, atol=1e-5)


@pytest.fixture(scope="module")
def small_run():
    ds = make_dataset(DatasetSpec(size=128, seed=21))
    cfg = TeacherConfig(steps=70, batch=32, seed=3, **TINY)
    model, history = train_teacher(ds, cfg)
    return ds, cfg, model, history


def test_teacher_initial_loss_near_one(small_run):
    _, _, _, history = small_run
    assert abs(history[0]["loss"] - 1.0) < 0.12


def test_teacher_loss_curve_deterministic(small_run):
    ds, cfg, _, history = small_run
    _, again = train_teacher(ds, cfg)
    assert [h["loss"] for h in history] == [h["loss"] for h in again]


def test_condition_dropout_fraction(small_run):
    _, cfg, _, history = small_run
    total = sum(h["n_uncond"] for h in history)
    n = len(history) * cfg.batch
    assert abs(total / n - 0.1) <= 0.02


def test_finetune_zero_steps_identical(small_run):
    _, _, model, _ = small_run
    ds2 = make_dataset(DatasetSpec(size=32, seed=22, style="inverted"))
    clone, _ = finetune_teacher(model, ds2, TeacherConfig(steps=0, seed=4, **TINY))
    assert clone.param_checksum() == model.param_checksum()


def test_finetune_shares_shapes_and_freezes_encoder(small_run):
    _, _, model, _ = small_run
    ds2 = make_dataset(DatasetSpec(size=64, seed=23, style="inverted"))
    tuned, _ = finetune_teacher(model, ds2, TeacherConfig(steps=5, batch=16, seed=4, **TINY))
    for (na, pa), (nb, pb) in zip(model.named_params(), tuned.named_params()):
        assert na == nb and pa.shape == pb.shape
    for (name, pa), (_, pb) in zip(model.encoder.named_params(),
                                   tuned.encoder.named_params()):
        assert np.array_equal(pa.data, pb.data), f"encoder {name} changed"
    assert model.param_checksum() != tuned.param_checksum()
    assert tuned.attention_signature() == model.attention_signature()


def test_empty_dataset_rejected():
    from guidedistill.data import Dataset
    empty = Dataset(images=np.zeros((0, 1, 16, 16), dtype=np.float32), prompts=[])
    with pytest.raises(ValueError):
        train_teacher(empty, TeacherConfig(steps=1, **TINY))
