"""Deterministic DDIM sampling with NFE and wall-clock accounting.

Two sampling modes: the teacher with two-pass guidance (2 NFE per step)
and the one-pass student (1 NFE per step). Grids are uniform in continuous
time from 1.0 to the schedule floor; the clean-image estimate is the final
step's x0 projection, which costs no extra evaluation.

Per-sample noise comes from substream(seed, "sample", index), so results
do not depend on how samples are grouped into chunks or threads.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from hashlib import sha256

import numpy as np

from . import autodiff as ad
from .rng import substream
from .schedule import ddim_step, x0_projection
from .unet import predict_cfg

IMG_SHAPE = (1, 16, 16)
EVAL_CHUNK = 32  # fixed grouping; never varies with thread count


@dataclass
class SampleTrace:
    """Record of one sampling run for a single sample."""
    seed: int
    z_init: np.ndarray
    times: np.ndarray
    z0: np.ndarray
    nfe: int
    wall_ms: int
    latents: list = field(default=None)


def initial_noise(seed, index, n=1):
    rng = substream(seed, "sample", index)
    return rng.standard_normal((n,) + IMG_SHAPE).astype(np.float32)


def _teacher_cfg_chunk(teacher, schedule, z, cond_p, cond_n, steps, w, keep=False):
    grid = schedule.sampling_grid(steps)
    latents = []
    eps_hat = None
    for k in range(steps):
        tv = np.full(z.shape[0], grid[k], dtype=np.float32)
        eps_hat = predict_cfg(teacher, z, tv, cond_p, cond_n, w)
        z = ddim_step(schedule, z, eps_hat, grid[k], grid[k + 1])
        if keep:
            latents.append(z.copy())
    z0 = x0_projection(schedule, z, eps_hat, grid[-1])
    return z0, grid, latents


def _student_chunk(student, schedule, z, cond_p, cond_n, steps, keep=False):
    grid = schedule.sampling_grid(steps)
    latents = []
    eps_hat = None
    for k in range(steps):
        tv = np.full(z.shape[0], grid[k], dtype=np.float32)
        with ad.no_grad():
            eps_hat = student.predict_noise(z, tv, cond_p, cond_n).data
        z = ddim_step(schedule, z, eps_hat, grid[k], grid[k + 1])
        if keep:
            latents.append(z.copy())
    z0 = x0_projection(schedule, z, eps_hat, grid[-1])
    return z0, grid, latents


def sample_teacher_cfg(teacher, schedule, prompt_p, prompt_n, steps, w, seed,
                       keep_latents=False, index=0):
    """Sample one image with the two-pass guided teacher (NFE = 2 * steps)."""
    t0 = time.perf_counter()
    z = initial_noise(seed, index)
    z_init = z[0].copy()
    with ad.no_grad():
        cond_p = teacher.encode([prompt_p])
        cond_n = teacher.encode([prompt_n])
    nfe0 = teacher.nfe
    z0, grid, lat = _teacher_cfg_chunk(teacher, schedule, z, cond_p, cond_n,
                                       steps, w, keep=keep_latents)
    return SampleTrace(seed=seed, z_init=z_init,
                       times=grid, z0=z0[0], nfe=teacher.nfe - nfe0,
                       wall_ms=int((time.perf_counter() - t0) * 1000),
                       latents=[x[0] for x in lat] if keep_latents else None)


def sample_student(student, schedule, prompt_p, prompt_n, steps, seed,
                   keep_latents=False, index=0):
    """Sample one image with the one-pass student (NFE = steps)."""
    t0 = time.perf_counter()
    z = initial_noise(seed, index)
    z_init = z[0].copy()
    with ad.no_grad():
        cond_p = student.encode([prompt_p])
        cond_n = student.encode([prompt_n])
    nfe0 = student.nfe
    z0, grid, lat = _student_chunk(student, schedule, z, cond_p, cond_n,
                                   steps, keep=keep_latents)
    return SampleTrace(seed=seed, z_init=z_init,
                       times=grid, z0=z0[0], nfe=student.nfe - nfe0,
                       wall_ms=int((time.perf_counter() - t0) * 1000),
                       latents=[x[0] for x in lat] if keep_latents else None)


@dataclass
class SampleSet:
    """A batch of paired samples for set-level evaluation."""
    z0: np.ndarray       # [N, 1, 16, 16]
    z_init: np.ndarray   # [N, 1, 16, 16]
    pairs: list          # [(prompt_p, prompt_n)] per sample
    steps: int
    nfe: int
    wall_ms: int
    model_id: str = ""

    def pair_digest(self):
        h = sha256()
        for p, n in self.pairs:
            h.update(bytes(p) + b"|" + bytes(n) + b";")
        h.update(self.z_init.tobytes())
        return h.hexdigest()


def sample_set(model, schedule, pairs, steps, seed, w=None, model_id="",
               keep_latents=False, threads=1):
    """Generate z0 for every (positive, negative) pair.

    `model` is a teacher (w required, two-pass guidance) or a student
    (w ignored, one pass). Work is grouped into fixed-size chunks whose
    contents do not depend on `threads`, so any thread count produces
    identical results.
    """
    from .adapter import StudentModel
    is_student = isinstance(model, StudentModel)
    if not is_student and w is None:
        raise ValueError("sample_set: teacher sampling needs a guidance weight w")
    n = len(pairs)
    t_start = time.perf_counter()
    z_init = np.concatenate([initial_noise(seed, i) for i in range(n)], axis=0)
    nfe0 = model.nfe

    chunks = [(lo, min(lo + EVAL_CHUNK, n)) for lo in range(0, n, EVAL_CHUNK)]

    def run(bounds):
        lo, hi = bounds
        with ad.no_grad():
            cond_p = model.encode([p for p, _ in pairs[lo:hi]])
            cond_n = model.encode([q for _, q in pairs[lo:hi]])
        if is_student:
            z0, _, _ = _student_chunk(model, schedule, z_init[lo:hi], cond_p, cond_n, steps)
        else:
            z0, _, _ = _teacher_cfg_chunk(model, schedule, z_init[lo:hi], cond_p, cond_n, steps, w)
        return z0

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    z0 = np.concatenate(outs, axis=0)
    return SampleSet(z0=z0, z_init=z_init, pairs=list(pairs), steps=steps,
                     nfe=model.nfe - nfe0,
                     wall_ms=int((time.perf_counter() - t_start) * 1000),
                     model_id=model_id)


def bench(models, pairs, step_grid, schedule, seed, w=8.0, threads=1):
    """Timing/NFE table over a step grid.

    `models` is a list of (model_id, model). Returns one row per
    (model, steps): [model_id, steps, nfe_per_sample, mean_wall_ms,
    distance] with the distribution-distance column left blank for the
    eval stage to fill.
    """
    if not models or not pairs or not step_grid:
        raise ValueError("bench: need at least one model, prompt pair, and step count")
    rows = []
    for model_id, model in models:
        for steps in step_grid:
            ss = sample_set(model, schedule, pairs, steps, seed, w=w,
                            model_id=model_id, threads=threads)
            rows.append([model_id, steps, ss.nfe // len(pairs),
                         ss.wall_ms / len(pairs), ""])
    return rows
