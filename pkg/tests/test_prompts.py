"""Vocabulary, encoder determinism/masking, negative-prompt sampling."""

import numpy as np
import pytest

from guidedistill import autodiff as ad
from guidedistill.autodiff import Tensor
from guidedistill.prompts import (MAX_PROMPT_LEN, NEGATIVE_POOL, VOCAB,
                                  VOCAB_SIZE, PromptEncoder, PromptError,
                                  PromptEmbedding, make_prompt, parse_prompt,
                                  prompt_to_text, sample_negative_prompt)
from guidedistill.rng import substream
from guidedistill.unet import TeacherModel


def encoder():
    return PromptEncoder(substream(7, "enc"))


def test_vocabulary_size_and_pool():
    assert VOCAB_SIZE == 24
    assert len(set(VOCAB)) == 24
    assert len(NEGATIVE_POOL) == 13


def test_prompt_construction_and_serialization():
    p = make_prompt(["circle", "bright", "blur"])
    assert prompt_to_text(p) == "circle bright blur"
    assert parse_prompt("circle bright blur") == p
    assert parse_prompt("") == ()
    with pytest.raises(PromptError):
        make_prompt(["not-a-phrase"])
    with pytest.raises(PromptError):
        make_prompt([99])
    with pytest.raises(PromptError):
        make_prompt(["circle"] * 9)


def test_encoder_deterministic():
    enc = encoder()
    p = make_prompt(["square", "dim", "striped"])
    a = enc.encode([p])
    b = enc.encode([p])
    assert np.array_equal(a.vectors.data, b.vectors.data)
    assert np.array_equal(a.mask, b.mask)


def test_empty_prompt_is_all_masked_zero():
    enc = encoder()
    e = enc.encode([()])
    assert np.all(e.mask == 0)
    assert np.all(e.vectors.data == 0)


def test_permuted_tokens_differ():
    enc = encoder()
    a = enc.encode([make_prompt(["circle", "bright"])])
    b = enc.encode([make_prompt(["bright", "circle"])])
    assert not np.allclose(a.vectors.data, b.vectors.data, atol=1e-6)


def test_masked_rows_zero_and_oov_rejected():
    enc = encoder()
    e = enc.encode([make_prompt(["circle"])])
    assert np.all(e.vectors.data[0, 1:] == 0)
    with pytest.raises(PromptError):
        enc.encode([(42,)])


def test_padded_rows_never_reach_attention():
    # garbage in masked embedding rows must not change the denoiser output
    teacher = TeacherModel(seed=5, widths=(8, 16, 24), attn_inner=16, attn_heads=2)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(2, 1, 16, 16)).astype(np.float32)
    t = np.array([0.4, 0.9], dtype=np.float32)
    cond = teacher.encode([make_prompt(["circle", "bright"]), make_prompt(["square"])])
    with ad.no_grad():
        ref = teacher.predict_noise(z, t, cond).data
    poisoned = cond.vectors.data.copy()
    poisoned[cond.mask == 0] = 1e3
    bad = PromptEmbedding(Tensor(poisoned), cond.mask)
    with ad.no_grad():
        out = teacher.predict_noise(z, t, bad).data
    assert np.array_equal(ref, out)


def test_negative_sampler_bounds():
    seen_lengths = set()
    for seed in range(200):
        p = sample_negative_prompt(substream(seed, "neg"))
        seen_lengths.add(len(p))
        assert len(p) <= MAX_PROMPT_LEN
        assert len(set(p)) == len(p)  # no replacement
        assert all(tok in NEGATIVE_POOL for tok in p)
    assert 0 in seen_lengths
    assert MAX_PROMPT_LEN in seen_lengths


def test_negative_sampler_uniform_coverage():
    # over 10^4 draws each pool phrase lands within 3 sigma of its
    # binomial expectation (k ~ U{0..8} of 13 -> p = 4/13)
    rng = substream(123, "neg-dist")
    n = 10_000
    counts = {tok: 0 for tok in NEGATIVE_POOL}
    for _ in range(n):
        for tok in sample_negative_prompt(rng):
            counts[tok] += 1
    p = (MAX_PROMPT_LEN / 2) / len(NEGATIVE_POOL)
    mean = n * p
    sigma = np.sqrt(n * p * (1 - p))
    for tok, c in counts.items():
        assert abs(c - mean) <= 3 * sigma, f"{VOCAB[tok]}: {c} vs {mean:.0f}+-{sigma:.0f}"
