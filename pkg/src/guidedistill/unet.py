"""Conditional denoiser: a small U-Net with cross-attention text
conditioning, plus the guidance combiner.

The network predicts noise from (z_t, t, condition). Cross-attention sits
in the encoder path only, at the 8x8 and 16-channel..128-channel levels (4
blocks total); attention outputs are added residually, with an empty
(fully masked) condition contributing exactly zero. A negative-prompt
adapter can ride along: each attention block accepts an optional adapter
block that reuses this block's queries (see adapter.py).
"""

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .prompts import EMBED_DIM, PromptEncoder


class ArchitectureError(ValueError):
    """Incompatible shapes when combining models or loading checkpoints."""


class Linear:
    def __init__(self, rng, d_in, d_out, bias=True, scale=1.0):
        std = scale / np.sqrt(d_in)
        self.w = Tensor(rng.normal(0, std, (d_in, d_out)).astype(np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.w)
        return ad.add(y, self.b) if self.b is not None else y

    def params(self, prefix):
        out = [(prefix + ".w", self.w)]
        if self.b is not None:
            out.append((prefix + ".b", self.b))
        return out


class Conv:
    def __init__(self, rng, c_in, c_out, k=3, stride=1, scale=1.0):
        std = scale * np.sqrt(2.0 / (c_in * k * k))
        self.w = Tensor(rng.normal(0, std, (c_out, c_in, k, k)).astype(np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride)

    def params(self, prefix):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


class GroupNorm:
    def __init__(self, channels, groups=8):
        self.groups = groups
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.group_norm(x, self.gamma, self.beta, self.groups)

    def params(self, prefix):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]


class ResBlock:
    """conv-conv residual block with the time embedding injected between."""

    def __init__(self, rng, c_in, c_out, temb_dim):
        self.gn1 = GroupNorm(c_in)
        self.conv1 = Conv(rng, c_in, c_out)
        self.temb = Linear(rng, temb_dim, c_out)
        self.gn2 = GroupNorm(c_out)
        self.conv2 = Conv(rng, c_out, c_out)
        self.skip = Conv(rng, c_in, c_out, k=1) if c_in != c_out else None

    def __call__(self, x, temb):
        h = self.conv1(ad.silu(self.gn1(x)))
        h = ad.add_channel_bias(h, self.temb(ad.silu(temb)))
        h = self.conv2(ad.silu(self.gn2(h)))
        s = self.skip(x) if self.skip is not None else x
        return ad.add(s, h)

    def params(self, prefix):
        out = self.gn1.params(prefix + ".gn1") + self.conv1.params(prefix + ".conv1")
        out += self.temb.params(prefix + ".temb") + self.gn2.params(prefix + ".gn2")
        out += self.conv2.params(prefix + ".conv2")
        if self.skip is not None:
            out += self.skip.params(prefix + ".skip")
        return out


def split_heads(x, heads):
    """[B, T, D] -> [B, heads, T, D/heads]"""
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x):
    """[B, heads, T, dh] -> [B, T, heads*dh]"""
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attend(q_heads, k, v, mask, heads):
    """Masked multi-head attention given pre-split queries."""
    kh = split_heads(k, heads)
    vh = split_heads(v, heads)
    dh = q_heads.shape[-1]
    scores = ad.matmul(q_heads, ad.transpose(kh, (0, 1, 3, 2))) * float(1.0 / np.sqrt(dh))
    attn = ad.masked_softmax(scores, mask)
    return merge_heads(ad.matmul(attn, vh))


class CrossAttentionBlock:
    """Spatial-to-text cross attention, residual on the spatial features.

    Keys/values come from the prompt embedding; queries from the (group
    normalized) spatial features. An adapter block, when supplied, shares
    these queries, builds its own negative-prompt features, and subtracts
    its normalized contribution before the output projection.
    """

    def __init__(self, rng, channels, cond_dim=EMBED_DIM, inner=32, heads=4):
        self.channels = channels
        self.cond_dim = cond_dim
        self.inner = inner
        self.heads = heads
        self.gn = GroupNorm(channels)
        self.wq = Tensor(rng.normal(0, 1 / np.sqrt(channels), (channels, inner)).astype(np.float32), requires_grad=True)
        self.wk = Tensor(rng.normal(0, 1 / np.sqrt(cond_dim), (cond_dim, inner)).astype(np.float32), requires_grad=True)
        self.wv = Tensor(rng.normal(0, 1 / np.sqrt(cond_dim), (cond_dim, inner)).astype(np.float32), requires_grad=True)
        self.wo = Tensor((rng.normal(0, 1 / np.sqrt(inner), (inner, channels)) * 0.05).astype(np.float32), requires_grad=True)

    def signature(self):
        return (self.channels, self.cond_dim, self.inner, self.heads)

    def __call__(self, x, cond, adapter_block=None, neg_cond=None):
        b, h, w, c = x.shape
        tokens = ad.reshape(self.gn(x), (b, h * w, c))
        q = split_heads(ad.matmul(tokens, self.wq), self.heads)
        k = ad.matmul(cond.vectors, self.wk)
        v = ad.matmul(cond.vectors, self.wv)
        z_p = attend(q, k, v, cond.mask, self.heads)
        if adapter_block is not None:
            z = adapter_block.combine(q, z_p, neg_cond, self.heads)
        else:
            z = z_p
        out = ad.matmul(z, self.wo)
        return ad.add(x, ad.reshape(out, (b, h, w, c)))

    def params(self, prefix):
        return self.gn.params(prefix + ".gn") + [
            (prefix + ".wq", self.wq), (prefix + ".wk", self.wk),
            (prefix + ".wv", self.wv), (prefix + ".wo", self.wo)]


class UNet:
    """16x16 single-channel noise predictor with 4 cross-attention blocks."""

    TEMB_IN = 64
    TEMB_DIM = 128

    def __init__(self, rng, widths=(32, 64, 128), attn_inner=32, attn_heads=4):
        w1, w2, w3 = widths
        self.widths = tuple(widths)
        self.tmlp1 = Linear(rng, self.TEMB_IN, self.TEMB_DIM)
        self.tmlp2 = Linear(rng, self.TEMB_DIM, self.TEMB_DIM)
        self.conv_in = Conv(rng, 1, w1)
        self.res16a = ResBlock(rng, w1, w1, self.TEMB_DIM)
        self.res16b = ResBlock(rng, w1, w1, self.TEMB_DIM)
        self.down1 = Conv(rng, w1, w2, stride=2)
        self.res8a = ResBlock(rng, w2, w2, self.TEMB_DIM)
        self.attn8a = CrossAttentionBlock(rng, w2, inner=attn_inner, heads=attn_heads)
        self.res8b = ResBlock(rng, w2, w2, self.TEMB_DIM)
        self.attn8b = CrossAttentionBlock(rng, w2, inner=attn_inner, heads=attn_heads)
        self.down2 = Conv(rng, w2, w3, stride=2)
        self.res4a = ResBlock(rng, w3, w3, self.TEMB_DIM)
        self.attn4a = CrossAttentionBlock(rng, w3, inner=attn_inner, heads=attn_heads)
        self.res4b = ResBlock(rng, w3, w3, self.TEMB_DIM)
        self.attn4b = CrossAttentionBlock(rng, w3, inner=attn_inner, heads=attn_heads)
        self.dec8a = ResBlock(rng, w3 + w2, w2, self.TEMB_DIM)
        self.dec8b = ResBlock(rng, w2, w2, self.TEMB_DIM)
        self.dec16a = ResBlock(rng, w2 + w1, w1, self.TEMB_DIM)
        self.dec16b = ResBlock(rng, w1, w1, self.TEMB_DIM)
        self.gn_out = GroupNorm(w1)
        self.conv_out = Conv(rng, w1, 1, scale=0.05)

    def attention_blocks(self):
        return [self.attn8a, self.attn8b, self.attn4a, self.attn4b]

    def _temb(self, t):
        return self.tmlp2(ad.silu(self.tmlp1(ad.time_embedding(t, self.TEMB_IN))))

    def _trunk(self, z, temb):
        """Everything before the first cross attention; condition-free."""
        if z.ndim != 4 or z.shape[1] != 1 or z.shape[2] != 16 or z.shape[3] != 16:
            raise ad.ShapeError(f"unet: expected [B,1,16,16] latents, got {tuple(z.shape)}")
        h = self.conv_in(ad.transpose(z, (0, 2, 3, 1)))
        h = self.res16b(self.res16a(h, temb), temb)
        e16 = h
        h = self.res8a(self.down1(h), temb)
        return h, e16

    def _head(self, h, e16, temb, cond, ablocks, neg_cond):
        h = self.attn8a(h, cond, ablocks[0], neg_cond)
        h = self.attn8b(self.res8b(h, temb), cond, ablocks[1], neg_cond)
        e8 = h
        h = self.down2(h)
        h = self.attn4a(self.res4a(h, temb), cond, ablocks[2], neg_cond)
        h = self.attn4b(self.res4b(h, temb), cond, ablocks[3], neg_cond)
        h = ad.concat([ad.upsample2x(h), e8], axis=3)
        h = self.dec8b(self.dec8a(h, temb), temb)
        h = ad.concat([ad.upsample2x(h), e16], axis=3)
        h = self.dec16b(self.dec16a(h, temb), temb)
        out = self.conv_out(ad.silu(self.gn_out(h)))
        return ad.transpose(out, (0, 3, 1, 2))

    def forward(self, z, t, cond, adapter=None, neg_cond=None):
        """z is [B, 1, 16, 16]; internally the net runs channels-last."""
        ablocks = adapter.blocks if adapter is not None else [None] * 4
        temb = self._temb(t)
        h, e16 = self._trunk(z, temb)
        return self._head(h, e16, temb, cond, ablocks, neg_cond)

    def forward_pair(self, z, t, cond_a, cond_b):
        """Evaluate two conditions on the same (z, t): the shared trunk runs
        once, then both conditions continue as one stacked batch. Returns a
        [2B, ...] prediction (first half cond_a, second half cond_b)."""
        temb = self._temb(t)
        h, e16 = self._trunk(z, temb)
        h2 = ad.concat([h, h], axis=0)
        e16_2 = ad.concat([e16, e16], axis=0)
        temb2 = ad.concat([temb, temb], axis=0)
        from .prompts import stack_embeddings
        cond = stack_embeddings(cond_a, cond_b)
        return self._head(h2, e16_2, temb2, cond, [None] * 4, None)

    def params(self, prefix="unet"):
        out = self.tmlp1.params(prefix + ".tmlp1") + self.tmlp2.params(prefix + ".tmlp2")
        out += self.conv_in.params(prefix + ".conv_in")
        for name in ("res16a", "res16b", "down1", "res8a", "attn8a", "res8b", "attn8b",
                     "down2", "res4a", "attn4a", "res4b", "attn4b",
                     "dec8a", "dec8b", "dec16a", "dec16b", "gn_out", "conv_out"):
            out += getattr(self, name).params(f"{prefix}.{name}")
        return out


class TeacherModel:
    """Frozen-able denoiser: prompt encoder + U-Net + an evaluation counter."""

    def __init__(self, seed=0, widths=(32, 64, 128), attn_inner=32, attn_heads=4, _rngs=None):
        from .rng import substream
        self.widths = tuple(widths)
        self.attn_inner = attn_inner
        self.attn_heads = attn_heads
        self.seed = seed
        enc_rng = _rngs[0] if _rngs else substream(seed, "init", "encoder")
        net_rng = _rngs[1] if _rngs else substream(seed, "init", "unet")
        self.encoder = PromptEncoder(enc_rng)
        self.unet = UNet(net_rng, widths=widths, attn_inner=attn_inner, attn_heads=attn_heads)
        self.nfe = 0

    def encode(self, prompts):
        return self.encoder.encode(prompts)

    def predict_noise(self, z_t, t, cond):
        """One denoiser evaluation; counts one NFE per batch element."""
        zt = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float32))
        tv = np.atleast_1d(np.asarray(t, dtype=np.float32))
        if np.any(tv <= 0.0) or np.any(tv > 1.0):
            raise ValueError(f"predict_noise: t must lie in (0,1], got {tv}")
        if tv.shape[0] == 1 and zt.shape[0] > 1:
            tv = np.full(zt.shape[0], tv[0], dtype=np.float32)
        self.nfe += zt.shape[0]
        return self.unet.forward(zt, tv, cond)

    def named_params(self):
        return self.encoder.named_params() + self.unet.params()

    def set_trainable(self, flag):
        for _, p in self.named_params():
            p.requires_grad = bool(flag)

    def param_count(self):
        return sum(p.size for _, p in self.named_params())

    def param_checksum(self):
        h = hashlib.sha256()
        for name, p in self.named_params():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def attention_signature(self):
        sig = ";".join(f"{b.signature()}" for b in self.unet.attention_blocks())
        return hashlib.sha256(sig.encode()).hexdigest()

    def arch_hash(self):
        sig = ";".join(f"{n}:{tuple(p.shape)}" for n, p in self.named_params())
        return hashlib.sha256(sig.encode()).hexdigest()

    def clone(self):
        """Deep copy with an independent parameter set and NFE counter."""
        twin = TeacherModel(seed=self.seed, widths=self.widths,
                            attn_inner=self.attn_inner, attn_heads=self.attn_heads)
        for (_, dst), (_, src) in zip(twin.named_params(), self.named_params()):
            dst.data = src.data.copy()
        return twin


def cfg_combine(eps_p, eps_n, w):
    """Guided noise: w * eps_p + (1 - w) * eps_n. Works on arrays or Tensors."""
    if isinstance(eps_p, Tensor) or isinstance(eps_n, Tensor):
        if tuple(eps_p.shape) != tuple(eps_n.shape):
            raise ad.ShapeError(f"cfg_combine: {tuple(eps_p.shape)} vs {tuple(eps_n.shape)}")
        return eps_p * float(w) + eps_n * float(1.0 - w)
    a = np.asarray(eps_p, dtype=np.float32)
    b = np.asarray(eps_n, dtype=np.float32)
    if a.shape != b.shape:
        raise ad.ShapeError(f"cfg_combine: {a.shape} vs {b.shape}")
    return np.float32(w) * a + np.float32(1.0 - w) * b


def predict_cfg(teacher, z_t, t, cond_p, cond_n, w):
    """Two-pass guided teacher noise: eps_hat = w*eps_p + (1-w)*eps_n.

    Counts 2 NFE per sample. The condition-free trunk is shared between the
    two passes, which changes nothing semantically (it sees identical
    inputs either way). Returns a plain array; intended for no-grad targets
    and sampling loops.
    """
    z = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t, dtype=np.float32)
    tv = np.atleast_1d(np.asarray(t, dtype=np.float32))
    if np.any(tv <= 0.0) or np.any(tv > 1.0):
        raise ValueError(f"predict_cfg: t must lie in (0,1], got {tv}")
    if tv.shape[0] == 1 and z.shape[0] > 1:
        tv = np.full(z.shape[0], tv[0], dtype=np.float32)
    b = z.shape[0]
    teacher.nfe += 2 * b
    with ad.no_grad():
        both = teacher.unet.forward_pair(Tensor(z), tv, cond_p, cond_n)
    return cfg_combine(both.data[:b], both.data[b:], w)
