"""Guidance-distillation losses and the adapter training loop.

Two objectives train the adapter against a frozen teacher:

  * guidance loss: the one-pass student output should match the teacher's
    two-pass guided noise at the same (z_t, t).
  * multi-step consistency (MSC): the student output should equal the
    single noise estimate whose DDIM step reproduces an N-step guided
    teacher rollout from t down to s = t - N * delta. That target is the
    DDIM inversion (pseudo epsilon) of the rollout endpoint.

With N = 1 the second target collapses exactly onto the first, which the
tests exploit as an algebraic check. Rollouts never record gradients; the
teacher is a constant.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapter import GuidanceAdapter, StudentModel
from .autodiff import Tensor
from .optim import AdamW
from .prompts import sample_negative_prompt
from .rng import substream
from .schedule import CosineSchedule, add_noise, ddim_step, pseudo_epsilon
from .unet import cfg_combine, predict_cfg


def _stack2(cond_a, cond_b):
    from .prompts import stack_embeddings
    return stack_embeddings(cond_a, cond_b)


@dataclass
class DistillConfig:
    w: float = 8.0
    lam: float = 0.1
    delta: float = 0.25
    n_max: int = 3
    batch: int = 32
    steps: int = 5000
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    ckpt_every: int = 1000
    normalize: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must be in (0, 1]")
        if self.n_max * self.delta > 1 + 1e-9:
            raise ValueError("n_max * delta must be <= 1")


def make_batch(dataset, schedule, rng, batch_size):
    """Draw one training batch: clean images with their prompts, fresh
    negative prompts, continuous times, and unit noise."""
    idx = rng.integers(0, len(dataset), size=batch_size)
    z0 = dataset.images[idx]
    prompts_p = [dataset.prompts[i] for i in idx]
    prompts_n = [sample_negative_prompt(rng) for _ in range(batch_size)]
    t = rng.uniform(schedule.floor, 1.0, size=batch_size).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    return {"z0": z0, "eps": eps, "t": t, "prompts_p": prompts_p, "prompts_n": prompts_n}


def _teacher_target(teacher, schedule, batch, w):
    """Guided teacher noise at (z_t, t); constant with respect to training."""
    with ad.no_grad():
        cond_p = teacher.encode(batch["prompts_p"])
        cond_n = teacher.encode(batch["prompts_n"])
        z_t = add_noise(schedule, batch["z0"], batch["eps"], batch["t"])
        target = predict_cfg(teacher, z_t, batch["t"], cond_p, cond_n, w)
    return z_t, cond_p, cond_n, target


def cfg_distill_loss(student, teacher, batch, w, schedule=None):
    """Per-element MSE between the student's one-pass estimate and the
    teacher's two-pass guided noise."""
    schedule = schedule or CosineSchedule()
    z_t, cond_p, cond_n, target = _teacher_target(teacher, schedule, batch, w)
    pred = student.predict_noise(z_t, batch["t"], cond_p, cond_n)
    return ad.mse(pred, Tensor(target))


def _reduced_segments(t, n_req, delta, floor):
    """Clip the requested segment count so n * delta fits below t, and clip
    s to the schedule floor. Returns (n per element, s per element)."""
    t = np.asarray(t, dtype=np.float64)
    cap = np.floor(t / delta + 1e-9).astype(int)
    n = np.maximum(1, np.minimum(n_req, cap))
    s = np.maximum(t - n * delta, floor)
    return n, s.astype(np.float32)


def msc_rollout(teacher, schedule, z_t, t, s, n_seg, cond_p, cond_n, w, first_eps=None):
    """Iterate the guided teacher with DDIM from t down to s in n_seg
    uniform segments. No gradients are recorded; the endpoint is a constant
    target. `first_eps`, when given, reuses an already computed guided
    noise for the first segment (it is evaluated at exactly (z_t, t))."""
    if n_seg < 1:
        raise ValueError("msc_rollout: need at least one segment")
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s >= t):
        raise ValueError("msc_rollout: need s < t elementwise")
    dt = (t - s) / n_seg
    z = np.asarray(z_t, dtype=np.float32)
    with ad.no_grad():
        for k in range(n_seg):
            tau = (t - k * dt).astype(np.float32)
            tau_next = s.astype(np.float32) if k == n_seg - 1 else (t - (k + 1) * dt).astype(np.float32)
            if k == 0 and first_eps is not None:
                eps_hat = first_eps
            else:
                eps_hat = predict_cfg(teacher, z, tau, cond_p, cond_n, w)
            z = ddim_step(schedule, z, eps_hat, tau, tau_next)
    return z


def _msc_targets(teacher, schedule, z_t, t, cond_p, cond_n, w, n_per_elem, s, first_eps):
    """Pseudo-epsilon targets per element. Rollout segments are aligned
    across the batch: segment k runs once for every element with more than
    k segments left, so a mixed batch costs max(n)-1 extra teacher passes
    (segment 0 reuses the already computed guided noise). Returns
    (targets, valid_mask)."""
    t = np.asarray(t, dtype=np.float64)
    s64 = np.asarray(s, dtype=np.float64)
    targets = np.zeros_like(z_t)
    valid = ((t - s64) > 1e-6) & (n_per_elem >= 1)
    if not valid.any():
        return targets, valid
    dt = np.where(valid, (t - s64) / np.maximum(n_per_elem, 1), 1.0)
    z = np.array(z_t, copy=True)
    with ad.no_grad():
        for k in range(int(n_per_elem[valid].max())):
            sel = valid & (n_per_elem > k)
            idx = np.nonzero(sel)[0]
            tau = (t[idx] - k * dt[idx]).astype(np.float32)
            last = (n_per_elem[idx] == k + 1)
            tau_next = np.where(last, s64[idx], t[idx] - (k + 1) * dt[idx]).astype(np.float32)
            if k == 0 and first_eps is not None:
                eps_hat = first_eps[idx]
            else:
                eps_hat = predict_cfg(teacher, z[idx], tau,
                                      _take_cond(cond_p, idx), _take_cond(cond_n, idx), w)
            z[idx] = ddim_step(schedule, z[idx], eps_hat, tau, tau_next)
    gi = np.nonzero(valid)[0]
    targets[gi] = pseudo_epsilon(schedule, z_t[gi], z[gi], t[gi], s64[gi]).astype(np.float32)
    return targets, valid


def _take_cond(cond, idx):
    from .prompts import PromptEmbedding
    return PromptEmbedding(Tensor(cond.vectors.data[idx]), cond.mask[idx])


def msc_loss(student, teacher, batch, n_seg, w=8.0, delta=0.25, schedule=None, _pred=None):
    """Consistency loss against an n_seg-step rollout target. The segment
    count is reduced per element where n_seg * delta exceeds t; elements
    sitting at the schedule floor (no room to roll) are excluded."""
    schedule = schedule or CosineSchedule()
    z_t, cond_p, cond_n, target_eps = _teacher_target(teacher, schedule, batch, w)
    n_per_elem, s = _reduced_segments(batch["t"], n_seg, delta, schedule.floor)
    targets, valid = _msc_targets(teacher, schedule, z_t, batch["t"], cond_p, cond_n,
                                  w, n_per_elem, s, target_eps)
    pred = _pred if _pred is not None else student.predict_noise(z_t, batch["t"], cond_p, cond_n)
    return ad.masked_mse(pred, Tensor(targets), valid)


def total_loss(student, teacher, batch, config, rng, schedule=None):
    """Combined objective for one batch: guidance loss plus lam times the
    MSC loss with per-element segment counts drawn uniformly from
    {1..min(n_max, floor(t/delta))}. Elements with t < delta carry no MSC
    term. Returns (loss, parts dict). The N draw happens regardless of lam
    so ablation runs with different lam see identical batches.

    The teacher's guided target, the rollout's first segment, and the
    student's pre-adapter trunk all see the same frozen computation on
    (z_t, t), so the trunk is evaluated once and shared.
    """
    schedule = schedule or CosineSchedule()
    t = batch["t"]
    with ad.no_grad():
        cond_p = teacher.encode(batch["prompts_p"])
        cond_n = teacher.encode(batch["prompts_n"])
        z_t = add_noise(schedule, batch["z0"], batch["eps"], t)
        unet = teacher.unet
        temb = unet._temb(t)
        trunk_h, trunk_e16 = unet._trunk(Tensor(z_t), temb)
        both = unet._head(ad.concat([trunk_h, trunk_h], axis=0),
                          ad.concat([trunk_e16, trunk_e16], axis=0),
                          ad.concat([temb, temb], axis=0),
                          _stack2(cond_p, cond_n), [None] * 4, None)
        teacher.nfe += 2 * z_t.shape[0]
        b = z_t.shape[0]
        target_eps = cfg_combine(both.data[:b], both.data[b:], config.w)
    cap = np.minimum(config.n_max, np.floor(t / config.delta + 1e-9).astype(int))
    eligible = cap >= 1
    u = rng.random(len(t))
    n_draw = np.where(eligible, 1 + np.floor(u * np.maximum(cap, 1)).astype(int), 0)

    student.nfe += b
    pred = unet._head(trunk_h, trunk_e16, temb, cond_p,
                      student.adapter.blocks, cond_n)
    loss_cfg = ad.mse(pred, Tensor(target_eps))

    if config.lam > 0 and eligible.any():
        s = np.maximum(t - n_draw * config.delta, schedule.floor).astype(np.float32)
        targets, valid = _msc_targets(teacher, schedule, z_t, t, cond_p, cond_n,
                                      config.w, n_draw, s, target_eps)
        valid &= eligible
        loss_msc = ad.masked_mse(pred, Tensor(targets), valid)
    else:
        loss_msc = Tensor(np.zeros((), dtype=np.float32))

    loss = ad.add(loss_cfg, ad.mul(loss_msc, Tensor(np.float32(config.lam))))
    parts = {"loss_cfg": float(loss_cfg.data), "loss_msc": float(loss_msc.data),
             "loss_total": float(loss.data)}
    return loss, parts


def train_adapter(teacher, dataset, config, schedule=None, csv_path=None,
                  ckpt_dir=None, progress=None):
    """Train a fresh adapter against a frozen teacher. Emits a per-step CSV
    when `csv_path` is set and periodic checkpoints under `ckpt_dir`.
    Returns (adapter, history). Raises if the teacher's parameters change
    or the loss goes non-finite."""
    from .fileio import save_adapter, write_csv
    schedule = schedule or CosineSchedule()
    teacher.set_trainable(False)
    checksum_before = teacher.param_checksum()
    adapter = GuidanceAdapter(teacher, normalize=config.normalize)
    student = StudentModel(teacher, adapter)
    opt = AdamW([p for _, p in adapter.named_params()],
                lr=config.lr, weight_decay=config.weight_decay)
    rng = substream(config.seed, "adapter-batches")
    history = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        batch = make_batch(dataset, schedule, rng, config.batch)
        loss, parts = total_loss(student, teacher, batch, config, rng, schedule)
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
        wall_ms = int((time.perf_counter() - t0) * 1000)
        history.append({"step": step, **parts, "wall_ms": wall_ms})
        if ckpt_dir is not None and config.ckpt_every and (step + 1) % config.ckpt_every == 0:
            save_adapter(f"{ckpt_dir}/adapter-step{step + 1:06d}.ckpt", adapter)
        if progress and (step % 50 == 0 or step == config.steps - 1):
            progress(step, parts)
    if teacher.param_checksum() != checksum_before:
        raise RuntimeError("train_adapter: frozen teacher parameters changed")
    if csv_path is not None:
        write_csv(csv_path, ["step", "loss_cfg", "loss_msc", "loss_total", "wall_ms"],
                  [(h["step"], h["loss_cfg"], h["loss_msc"], h["loss_total"], h["wall_ms"])
                   for h in history])
    return adapter, history
