"""Denoiser (teacher) training and style fine-tuning.

Standard epsilon-prediction diffusion training with condition dropout
(probability 0.1 by default) so unconditional and negative-prompt
evaluations are meaningful at sampling time. Fine-tuning continues the
same objective on a style-shifted dataset with the prompt encoder frozen,
which keeps one shared text representation across every model variant.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamW
from .rng import substream
from .schedule import CosineSchedule, add_noise
from .unet import TeacherModel


@dataclass
class TeacherConfig:
    steps: int = 20000
    batch: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    cond_dropout: float = 0.1
    seed: int = 0
    widths: tuple = (32, 64, 128)
    attn_inner: int = 32
    attn_heads: int = 4
    log_every: int = 50


def _training_step(model, schedule, imgs, prompts, t, eps):
    cond = model.encode(prompts)
    z_t = add_noise(schedule, imgs, eps, t)
    pred = model.predict_noise(z_t, t, cond)
    return ad.mse(pred, Tensor(eps))


def train_teacher(dataset, config, schedule=None, progress=None):
    """Train a fresh teacher on `dataset`. Returns (model, history) where
    history rows are dicts with step, loss, n_uncond, wall_ms."""
    if len(dataset) == 0:
        raise ValueError("train_teacher: empty dataset")
    schedule = schedule or CosineSchedule()
    model = TeacherModel(seed=config.seed, widths=config.widths,
                         attn_inner=config.attn_inner, attn_heads=config.attn_heads)
    return _fit(model, dataset, config, schedule, trainable="all", progress=progress)


def finetune_teacher(teacher, dataset, config, schedule=None, progress=None):
    """Continue diffusion training of a trained teacher on a shifted
    dataset. The prompt encoder stays frozen; architecture is unchanged.
    Zero steps returns an identical copy."""
    if len(dataset) == 0:
        raise ValueError("finetune_teacher: empty dataset")
    schedule = schedule or CosineSchedule()
    model = teacher.clone()
    return _fit(model, dataset, config, schedule, trainable="unet", progress=progress)


def _fit(model, dataset, config, schedule, trainable, progress):
    model.set_trainable(True)
    if trainable == "unet":
        model.encoder.set_trainable(False)
        params = [p for _, p in model.unet.params()]
    else:
        params = [p for _, p in model.named_params()]
    history = []
    if config.steps == 0:
        return model, history
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = substream(config.seed, "teacher-batches")
    n = len(dataset)
    for step in range(config.steps):
        t0 = time.perf_counter()
        idx = rng.integers(0, n, size=config.batch)
        imgs = dataset.images[idx]
        dropped = rng.random(config.batch) < config.cond_dropout
        prompts = [() if dropped[j] else dataset.prompts[i] for j, i in enumerate(idx)]
        t = schedule.training_times(rng, config.batch)
        eps = rng.standard_normal(imgs.shape).astype(np.float32)
        loss = _training_step(model, schedule, imgs, prompts, t, eps)
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
        wall_ms = int((time.perf_counter() - t0) * 1000)
        history.append({"step": step, "loss": float(loss.data),
                        "n_uncond": int(dropped.sum()), "wall_ms": wall_ms})
        if progress and (step % config.log_every == 0 or step == config.steps - 1):
            progress(step, float(loss.data))
    model.set_trainable(False)
    return model, history
