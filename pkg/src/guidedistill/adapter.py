"""Pluggable negative-prompt adapter with decoupled cross attention.

Per host attention block the adapter owns new key/value projections and a
learnable (alpha, beta) pair. It shares the host's queries, computes
negative features Z_n, rescales them by the positive-to-negative row-norm
ratio (so the correction is invariant to the scale of Z_n), and subtracts
the result from the positive features before the host's output projection:

    Z = Z_p - (alpha * Z_n * |Z_p| / |Z_n| + beta)

With alpha = beta = 0 the student is exactly the host's conditional pass.
The host network stays frozen; only adapter parameters train.
"""

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .unet import ArchitectureError, attend


def attention_normalize(z_p, z_n, alpha, beta, enabled=True):
    """Norm-matched negative features: alpha * z_n * |z_p|/|z_n| + beta.

    Norms are per-token L2 over the feature axis. Rows where |z_n| is
    (near) zero contribute no scaled term; beta is still added. With
    `enabled` False the norm ratio is skipped (ablation arm).
    """
    if tuple(z_p.shape) != tuple(z_n.shape):
        raise ad.ShapeError(f"attention_normalize: {tuple(z_p.shape)} vs {tuple(z_n.shape)}")
    if enabled:
        ratio = ad.guarded_div(ad.l2norm_last(z_p), ad.l2norm_last(z_n))
        scaled = ad.mul(z_n, ratio)
    else:
        scaled = z_n
    return ad.add(ad.mul(scaled, alpha), beta)


def combine_features(z_p, g_out):
    """Subtract the normalized negative contribution: Z = Z_p - g."""
    return ad.sub(z_p, g_out)


class AdapterBlock:
    """Negative-prompt key/value projections for one host attention block."""

    def __init__(self, channels, cond_dim, inner, heads, normalize=True):
        self.channels = channels
        self.cond_dim = cond_dim
        self.inner = inner
        self.heads = heads
        self.normalize = normalize
        self.wk = Tensor(np.zeros((cond_dim, inner), dtype=np.float32), requires_grad=True)
        self.wv = Tensor(np.zeros((cond_dim, inner), dtype=np.float32), requires_grad=True)
        self.alpha = Tensor(np.zeros((), dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros((), dtype=np.float32), requires_grad=True)

    @classmethod
    def from_host(cls, host_block, normalize=True):
        """Start as a copy of the host projections: with matching prompts
        the negative features reproduce the positive ones exactly at init."""
        blk = cls(*host_block.signature(), normalize=normalize)
        blk.wk.data = host_block.wk.data.copy()
        blk.wv.data = host_block.wv.data.copy()
        return blk

    def signature(self):
        return (self.channels, self.cond_dim, self.inner, self.heads)

    def negative_features(self, q_heads, neg_cond):
        k = ad.matmul(neg_cond.vectors, self.wk)
        v = ad.matmul(neg_cond.vectors, self.wv)
        return attend(q_heads, k, v, neg_cond.mask, self.heads)

    def combine(self, q_heads, z_p, neg_cond, heads):
        z_n = self.negative_features(q_heads, neg_cond)
        g = attention_normalize(z_p, z_n, self.alpha, self.beta, enabled=self.normalize)
        return combine_features(z_p, g)

    def params(self, prefix):
        return [(prefix + ".wk", self.wk), (prefix + ".wv", self.wv),
                (prefix + ".alpha", self.alpha), (prefix + ".beta", self.beta)]


class GuidanceAdapter:
    """The trainable adapter: one AdapterBlock per host attention block."""

    def __init__(self, teacher, normalize=True):
        self.normalize = normalize
        self.blocks = [AdapterBlock.from_host(b, normalize=normalize)
                       for b in teacher.unet.attention_blocks()]

    @classmethod
    def from_signatures(cls, signatures, normalize=True):
        """Rebuild an (uninitialized) adapter from block signatures, for
        checkpoint loading."""
        obj = cls.__new__(cls)
        obj.normalize = normalize
        obj.blocks = [AdapterBlock(*sig, normalize=normalize) for sig in signatures]
        return obj

    def named_params(self):
        out = []
        for i, b in enumerate(self.blocks):
            out += b.params(f"adapter.block{i}")
        return out

    def set_trainable(self, flag):
        for _, p in self.named_params():
            p.requires_grad = bool(flag)

    def param_count(self):
        return sum(p.size for _, p in self.named_params())

    def attention_signature(self):
        sig = ";".join(f"{b.signature()}" for b in self.blocks)
        return hashlib.sha256(sig.encode()).hexdigest()

    def zero_control(self):
        """True when every block has alpha == beta == 0 (identity student)."""
        return all(float(b.alpha.data) == 0.0 and float(b.beta.data) == 0.0
                   for b in self.blocks)


class StudentModel:
    """A frozen teacher plus an adapter: one-pass guided noise prediction."""

    def __init__(self, teacher, adapter):
        host = teacher.unet.attention_blocks()
        if len(host) != len(adapter.blocks):
            raise ArchitectureError(
                f"adapter has {len(adapter.blocks)} blocks, host has {len(host)}")
        for i, (hb, ab) in enumerate(zip(host, adapter.blocks)):
            if hb.signature() != ab.signature():
                raise ArchitectureError(
                    f"block {i}: host attention {hb.signature()} vs adapter {ab.signature()}")
        self.teacher = teacher
        self.adapter = adapter
        self.nfe = 0

    def encode(self, prompts):
        return self.teacher.encode(prompts)

    def predict_noise(self, z_t, t, cond, neg_cond):
        """Single evaluation producing the guided estimate (one NFE)."""
        zt = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float32))
        tv = np.atleast_1d(np.asarray(t, dtype=np.float32))
        if np.any(tv <= 0.0) or np.any(tv > 1.0):
            raise ValueError(f"predict_noise: t must lie in (0,1], got {tv}")
        if tv.shape[0] == 1 and zt.shape[0] > 1:
            tv = np.full(zt.shape[0], tv[0], dtype=np.float32)
        self.nfe += zt.shape[0]
        return self.teacher.unet.forward(zt, tv, cond, adapter=self.adapter, neg_cond=neg_cond)


def plug_into(adapter, teacher):
    """Attach a trained adapter to any shape-compatible teacher, with no
    parameter updates. Raises ArchitectureError on mismatch."""
    return StudentModel(teacher, adapter)
