"""Token vocabulary, prompt encoder, and negative-prompt sampling.

Prompts are tuples of vocabulary indices, at most MAX_PROMPT_LEN long; the
empty tuple is the unconditional prompt. The encoder embeds tokens, adds a
learned positional embedding, mixes once with masked self-attention, and
returns a fixed-length embedding plus a key mask. Masked positions are
zeroed everywhere, so padding rows can never leak into attention outputs.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SHAPES = ("circle", "square", "cross", "triangle")
SIZES = ("small", "large")
INTENSITIES = ("dim", "bright")
TEXTURES = ("solid", "striped", "noisy")
CORRUPTIONS = ("blur", "speckle", "hole")
FILLERS = ("plain", "clean", "simple", "basic", "neutral",
           "ordinary", "regular", "standard", "common", "typical")

VOCAB = SHAPES + SIZES + INTENSITIES + TEXTURES + CORRUPTIONS + FILLERS
VOCAB_SIZE = len(VOCAB)
PHRASE_TO_ID = {p: i for i, p in enumerate(VOCAB)}

# phrases eligible for negative prompts: artifact names plus filler noise
NEGATIVE_POOL = tuple(PHRASE_TO_ID[p] for p in CORRUPTIONS + FILLERS)

MAX_PROMPT_LEN = 8
EMBED_DIM = 32

assert VOCAB_SIZE == 24
assert len(NEGATIVE_POOL) == 13


class PromptError(ValueError):
    pass


def make_prompt(phrases):
    """Build a prompt (tuple of token ids) from phrase names or ids."""
    toks = []
    for p in phrases:
        if isinstance(p, str):
            if p not in PHRASE_TO_ID:
                raise PromptError(f"unknown phrase: {p!r}")
            toks.append(PHRASE_TO_ID[p])
        else:
            t = int(p)
            if not 0 <= t < VOCAB_SIZE:
                raise PromptError(f"token id out of range: {t}")
            toks.append(t)
    if len(toks) > MAX_PROMPT_LEN:
        raise PromptError(f"prompt too long: {len(toks)} > {MAX_PROMPT_LEN}")
    return tuple(toks)


def prompt_to_text(prompt):
    return " ".join(VOCAB[t] for t in prompt)


def parse_prompt(text):
    """Parse a space-separated phrase string; '' is the empty prompt."""
    words = text.split()
    return make_prompt(words)


def sample_negative_prompt(rng):
    """Draw a negative prompt: k ~ U{0..8} distinct pool phrases, shuffled."""
    k = int(rng.integers(0, MAX_PROMPT_LEN + 1))
    if k == 0:
        return ()
    picks = rng.choice(len(NEGATIVE_POOL), size=k, replace=False)
    return tuple(NEGATIVE_POOL[i] for i in picks)


class PromptEmbedding:
    """Fixed-length condition: vectors [B, MAX_PROMPT_LEN, EMBED_DIM] plus a
    key mask [B, MAX_PROMPT_LEN] (1 = real token)."""

    def __init__(self, vectors, mask):
        self.vectors = vectors
        self.mask = mask

    @property
    def batch(self):
        return self.vectors.shape[0]


def stack_embeddings(a, b):
    """Concatenate two embeddings along the batch axis."""
    return PromptEmbedding(ad.concat([a.vectors, b.vectors], axis=0),
                           np.concatenate([a.mask, b.mask], axis=0))


class PromptEncoder:
    """Token embedding + positional embedding + one masked self-attention
    mixing layer. Trained jointly with the base denoiser, then frozen."""

    def __init__(self, rng, dim=EMBED_DIM):
        self.dim = dim
        scale = 1.0 / np.sqrt(dim)
        self.table = Tensor(rng.normal(0, scale, (VOCAB_SIZE, dim)).astype(np.float32), requires_grad=True)
        self.pos = Tensor(rng.normal(0, scale, (MAX_PROMPT_LEN, dim)).astype(np.float32), requires_grad=True)
        self.wq = Tensor(rng.normal(0, scale, (dim, dim)).astype(np.float32), requires_grad=True)
        self.wk = Tensor(rng.normal(0, scale, (dim, dim)).astype(np.float32), requires_grad=True)
        self.wv = Tensor(rng.normal(0, scale, (dim, dim)).astype(np.float32), requires_grad=True)
        self.wo = Tensor((rng.normal(0, scale, (dim, dim)) * 0.1).astype(np.float32), requires_grad=True)

    def named_params(self):
        return [("encoder.table", self.table), ("encoder.pos", self.pos),
                ("encoder.wq", self.wq), ("encoder.wk", self.wk),
                ("encoder.wv", self.wv), ("encoder.wo", self.wo)]

    def set_trainable(self, flag):
        for _, p in self.named_params():
            p.requires_grad = bool(flag)

    def encode(self, prompts):
        """Encode a list of prompts into one PromptEmbedding."""
        b = len(prompts)
        idx = np.zeros((b, MAX_PROMPT_LEN), dtype=np.int64)
        mask = np.zeros((b, MAX_PROMPT_LEN), dtype=np.float32)
        for i, p in enumerate(prompts):
            if len(p) > MAX_PROMPT_LEN:
                raise PromptError(f"prompt too long: {len(p)}")
            for j, t in enumerate(p):
                if not 0 <= int(t) < VOCAB_SIZE:
                    raise PromptError(f"token id out of range: {t}")
                idx[i, j] = int(t)
                mask[i, j] = 1.0

        flat = ad.embedding(self.table, idx.reshape(-1))
        tok = ad.reshape(flat, (b, MAX_PROMPT_LEN, self.dim))
        m3 = Tensor(mask[:, :, None])
        # zero padded rows before mixing; position codes only on real tokens
        pos = ad.reshape(ad.embedding(self.pos, np.tile(np.arange(MAX_PROMPT_LEN), b)),
                         (b, MAX_PROMPT_LEN, self.dim))
        h = ad.mul(ad.add(tok, pos), m3)

        q = ad.matmul(h, self.wq)
        k = ad.matmul(h, self.wk)
        v = ad.matmul(h, self.wv)
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1)))
        scores = scores * float(1.0 / np.sqrt(self.dim))
        attn = ad.masked_softmax(scores, mask)
        mixed = ad.matmul(ad.matmul(attn, v), self.wo)
        out = ad.mul(ad.add(h, mixed), m3)
        return PromptEmbedding(out, mask)
