"""Evaluation metrics: distribution distance, paired consistency against a
many-step reference, negative-prompt controllability, and the cross-step
consistency ablation.

The distribution distance is a sliced Wasserstein-1 on raw pixels (random
unit projections, sorted 1-D transport). Attribute precision/recall uses
the data module's oracle. All comparisons insist on identical pairing
(same prompts and same initial noise) before touching any numbers.
"""

from dataclasses import dataclass

import numpy as np

from .data import attribute_oracle, detected_phrases
from .prompts import (CORRUPTIONS, FILLERS, INTENSITIES, SHAPES, SIZES,
                      TEXTURES, VOCAB, make_prompt, sample_negative_prompt)
from .rng import substream
from .sampling import sample_set


class PairingError(ValueError):
    """Two sample sets were built from different (seed, z_T, prompt) tuples."""


def sample_eval_pairs(seed, n, with_negatives=True):
    """Deterministic evaluation pairs: clean positive prompts (one shape
    plus size/intensity/texture, no corruption) and, optionally, fresh
    random negative prompts."""
    rng = substream(seed, "eval-pairs")
    pairs = []
    for _ in range(n):
        pos = make_prompt([SHAPES[rng.integers(4)], SIZES[rng.integers(2)],
                           INTENSITIES[rng.integers(2)], TEXTURES[rng.integers(3)]])
        neg = sample_negative_prompt(rng) if with_negatives else ()
        pairs.append((pos, neg))
    return pairs


def sliced_wasserstein(samples_a, samples_b, projections=64, seed=0):
    """Mean 1-D Wasserstein-1 distance over random unit projections.

    Both sets are flattened to [N, D] and must have equal counts.
    """
    a = np.asarray(samples_a, dtype=np.float64).reshape(len(samples_a), -1)
    b = np.asarray(samples_b, dtype=np.float64).reshape(len(samples_b), -1)
    if a.shape != b.shape:
        raise ValueError(f"sliced_wasserstein: counts/shapes differ, {a.shape} vs {b.shape}")
    rng = substream(seed, "swd-projections")
    proj = rng.standard_normal((projections, a.shape[1]))
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    pa = np.sort(a @ proj.T, axis=0)
    pb = np.sort(b @ proj.T, axis=0)
    return float(np.mean(np.abs(pa - pb)))


@dataclass
class EvalReport:
    model_id: str
    steps: int
    swd: float
    mse_mean: float
    attr_precision: float
    attr_recall: float
    neg_presence: float
    nfe: int
    wall_ms: int

    HEADER = ["model_id", "steps", "swd", "mse_mean", "attr_precision",
              "attr_recall", "neg_presence", "nfe", "wall_ms"]

    def row(self):
        return [self.model_id, self.steps, self.swd, self.mse_mean,
                self.attr_precision, self.attr_recall, self.neg_presence,
                self.nfe, self.wall_ms]


def _assert_paired(set_a, set_b):
    if set_a.pair_digest() != set_b.pair_digest():
        raise PairingError("sample sets disagree on (z_T, prompt) pairing")


def per_sample_mse(set_a, set_b):
    _assert_paired(set_a, set_b)
    d = (set_a.z0.astype(np.float64) - set_b.z0.astype(np.float64)) ** 2
    return d.reshape(len(d), -1).mean(axis=1)


def attr_precision_recall(images, prompts, threshold=0.5):
    """Oracle-detected phrases versus the prompts that produced them.

    Filler phrases carry no visual signal and are ignored on both sides.
    """
    fillers = set(FILLERS)
    precisions, recalls = [], []
    for img, prompt in zip(images, prompts):
        want = {VOCAB[t] for t in prompt} - fillers
        got = detected_phrases(attribute_oracle(img), threshold) - fillers
        if got:
            precisions.append(len(got & want) / len(got))
        if want:
            recalls.append(len(got & want) / len(want))
    return (float(np.mean(precisions)) if precisions else 0.0,
            float(np.mean(recalls)) if recalls else 0.0)


def corruption_presence(images, threshold=0.5):
    """Fraction of images whose oracle flags each corruption phrase."""
    counts = {c: 0 for c in CORRUPTIONS}
    for img in images:
        scores = attribute_oracle(img)
        for c in CORRUPTIONS:
            if scores[c] > threshold:
                counts[c] += 1
    n = max(len(images), 1)
    return {c: counts[c] / n for c in CORRUPTIONS}


def kd_consistency(student_set, reference_set, projections=64, seed=0):
    """Paired student-vs-reference consistency: per-sample MSE plus the
    set-level sliced Wasserstein distance. Both sets must share pairing."""
    mses = per_sample_mse(student_set, reference_set)
    swd = sliced_wasserstein(student_set.z0, reference_set.z0,
                             projections=projections, seed=seed)
    prec, rec = attr_precision_recall(student_set.z0,
                                      [p for p, _ in student_set.pairs])
    nfe_ratio = (reference_set.nfe / student_set.nfe) if student_set.nfe else float("inf")
    report = EvalReport(model_id=student_set.model_id, steps=student_set.steps,
                        swd=swd, mse_mean=float(mses.mean()),
                        attr_precision=prec, attr_recall=rec,
                        neg_presence=float("nan"),
                        nfe=student_set.nfe, wall_ms=student_set.wall_ms)
    return {"per_sample_mse": mses, "mse_mean": float(mses.mean()), "swd": swd,
            "nfe_ratio": nfe_ratio, "report": report}


def negative_control_eval(student, schedule, positives, steps=4,
                          samples_per_cell=256, seed=0, threads=1):
    """Presence-rate table for each corruption phrase, with the phrase in
    the negative prompt versus an empty-negative control.

    Every cell shares positives and initial noise sample-for-sample, so the
    only difference between cells is the negative prompt.
    """
    cells = {}
    base_pos = [positives[i % len(positives)] for i in range(samples_per_cell)]
    for label, neg in [("control", ())] + [(c, make_prompt([c])) for c in CORRUPTIONS]:
        pairs = [(p, neg) for p in base_pos]
        ss = sample_set(student, schedule, pairs, steps, seed,
                        model_id=f"negctrl-{label}", threads=threads)
        cells[label] = {"rates": corruption_presence(ss.z0), "set": ss}
    table = []
    for label, cell in cells.items():
        for c in CORRUPTIONS:
            table.append([label, c, cell["rates"][c]])
    return {"cells": {k: v["rates"] for k, v in cells.items()}, "table": table}


def msc_ablation(students, schedule, pairs, steps_pair=(4, 8), seed=0, threads=1):
    """Cross-step output consistency per student: MSE between the two step
    counts' outputs from identical noise, averaged over pairs."""
    lo, hi = steps_pair
    out = {}
    for name, student in students.items():
        set_lo = sample_set(student, schedule, pairs, lo, seed,
                            model_id=f"{name}-{lo}", threads=threads)
        set_hi = sample_set(student, schedule, pairs, hi, seed,
                            model_id=f"{name}-{hi}", threads=threads)
        mses = per_sample_mse(set_lo, set_hi)
        out[name] = {"cross_mse": float(mses.mean()), "per_pair": mses}
    return out
