"""Shared test utilities: the finite-difference gradient oracle and the
randomized graph builders that cover every tensor op.

The oracle runs the SAME graph in float64 (shadow mode), computes analytic
gradients via the tape, and compares each leaf element against central
finite differences with h = 1e-4 * max(1, |x|). Errors are measured as
|a - f| / max(1, |a|, |f|).
"""

import numpy as np

from guidedistill import autodiff as ad
from guidedistill.autodiff import Tensor

FD_TOL = 1e-4


def fd_gradcheck(build, seed, tol=FD_TOL):
    """build(rng) -> (leaves, forward) where forward() returns a scalar
    Tensor from the float64 leaves. Returns the max relative error."""
    rng = np.random.default_rng(seed)
    leaves, forward = build(rng)
    loss = forward()
    assert loss.size == 1
    ad.backward(loss)
    worst = 0.0
    with ad.no_grad():
        for leaf in leaves:
            assert leaf.grad is not None, "leaf missing grad"
            flat = leaf.data.reshape(-1)
            gflat = leaf.grad.reshape(-1)
            for i in range(flat.size):
                x0 = flat[i]
                h = 1e-4 * max(1.0, abs(x0))
                flat[i] = x0 + h
                fp = float(forward().data)
                flat[i] = x0 - h
                fm = float(forward().data)
                flat[i] = x0
                fd = (fp - fm) / (2 * h)
                a = float(gflat[i])
                err = abs(a - fd) / max(1.0, abs(a), abs(fd))
                worst = max(worst, err)
            leaf.grad = None
    assert worst <= tol, f"gradient mismatch: rel err {worst:.3e} > {tol}"
    return worst


def leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True, dtype=np.float64)


def const(rng, shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), dtype=np.float64)


# each builder composes >= 3 suite ops and ends in a scalar
def build_elementwise(rng):
    a = leaf(rng, (3, 5))
    b = leaf(rng, (3, 5))
    c = Tensor(rng.uniform(1.5, 2.5, (3, 5)), requires_grad=True, dtype=np.float64)

    def forward():
        out = ad.div(ad.add(ad.mul(a, b), ad.sub(a, b)), c)
        return ad.tsum(ad.mul(out, out))
    return [a, b, c], forward


def build_broadcast(rng):
    x = leaf(rng, (4, 6))
    v = leaf(rng, (6,))
    s = leaf(rng, ())
    k = leaf(rng, (4, 1))

    def forward():
        out = ad.mul(ad.add(x, v), s)
        return ad.tmean(ad.mul(out, k))
    return [x, v, s, k], forward


def build_matmul_chain(rng):
    a = leaf(rng, (3, 4))
    b = leaf(rng, (4, 5))
    c = leaf(rng, (5, 2))

    def forward():
        return ad.tsum(ad.matmul(ad.matmul(a, b), c))
    return [a, b, c], forward


def build_attention(rng):
    q = leaf(rng, (2, 2, 3, 4))
    k = leaf(rng, (2, 2, 5, 4))
    v = leaf(rng, (2, 2, 5, 4))
    mask = np.array([[1, 1, 0, 1, 0], [1, 0, 1, 1, 1]], dtype=np.float32)

    def forward():
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        attn = ad.masked_softmax(scores, mask)
        return ad.tsum(ad.matmul(attn, v))
    return [q, k, v], forward


def build_softmax(rng):
    x = leaf(rng, (3, 7))
    w = leaf(rng, (7,))

    def forward():
        return ad.tmean(ad.mul(ad.softmax_last(x), w))
    return [x, w], forward


def build_norm_ratio(rng):
    zp = leaf(rng, (2, 4, 5))
    zn = Tensor(rng.normal(0, 1, (2, 4, 5)) + 3.0, requires_grad=True, dtype=np.float64)
    alpha = leaf(rng, ())

    def forward():
        ratio = ad.guarded_div(ad.l2norm_last(zp), ad.l2norm_last(zn))
        return ad.tsum(ad.mul(ad.mul(zn, ratio), alpha))
    return [zp, zn, alpha], forward


def build_conv_stack(rng):
    x = leaf(rng, (2, 4, 4, 3))
    w1 = leaf(rng, (4, 3, 3, 3), scale=0.5)
    b1 = leaf(rng, (4,))
    w2 = leaf(rng, (2, 4, 3, 3), scale=0.5)

    def forward():
        h = ad.silu(ad.conv2d(x, w1, b1, stride=1))
        return ad.tsum(ad.conv2d(h, w2, stride=2))
    return [x, w1, b1, w2], forward


def build_conv1x1_gn(rng):
    x = leaf(rng, (2, 3, 3, 4))
    w = leaf(rng, (8, 4, 1, 1), scale=0.5)
    gamma = Tensor(rng.uniform(0.5, 1.5, (8,)), requires_grad=True, dtype=np.float64)
    beta = leaf(rng, (8,))
    tb = leaf(rng, (2, 8))

    def forward():
        h = ad.conv2d(x, w)
        h = ad.add_channel_bias(h, tb)
        return ad.tmean(ad.group_norm(h, gamma, beta, groups=4))
    return [x, w, gamma, beta, tb], forward


def build_upsample(rng):
    x = leaf(rng, (2, 3, 3, 2))
    w = leaf(rng, (2, 2, 3, 3), scale=0.5)

    def forward():
        return ad.tsum(ad.silu(ad.conv2d(ad.upsample2x(x), w)))
    return [x, w], forward


def build_concat_reshape(rng):
    a = leaf(rng, (2, 3, 4))
    b = leaf(rng, (2, 2, 4))
    t = const(rng, (2, 20))

    def forward():
        cat = ad.concat([a, b], axis=1)
        flat = ad.reshape(ad.transpose(cat, (0, 2, 1)), (2, 20))
        return ad.mse(flat, t)
    return [a, b], forward


def build_embedding(rng):
    table = leaf(rng, (7, 4))
    w = leaf(rng, (4, 3))
    idx = rng.integers(0, 7, size=5)

    def forward():
        return ad.tsum(ad.matmul(ad.embedding(table, idx), w))
    return [table, w], forward


def build_time_embedding(rng):
    t = Tensor(rng.uniform(0.1, 1.0, (3,)), requires_grad=True, dtype=np.float64)
    w = leaf(rng, (8, 2))

    def forward():
        emb = ad.time_embedding(t, 8, scale=7.0)
        return ad.tsum(ad.matmul(emb, w))
    return [t, w], forward


def build_masked_mse(rng):
    p = leaf(rng, (4, 3))
    t = const(rng, (4, 3))
    mask = np.array([1, 0, 1, 1], dtype=bool)

    def forward():
        return ad.masked_mse(ad.silu(p), t, mask)
    return [p], forward


def build_mse_head(rng):
    a = leaf(rng, (3, 4))
    b = leaf(rng, (4, 4))

    def forward():
        return ad.mse(ad.matmul(a, b), const(np.random.default_rng(0), (3, 4)))
    return [a, b], forward


def build_groupnorm_deep(rng):
    x = leaf(rng, (2, 2, 2, 8))
    gamma = Tensor(rng.uniform(0.5, 1.5, (8,)), requires_grad=True, dtype=np.float64)
    beta = leaf(rng, (8,))
    w = leaf(rng, (4, 8, 1, 1), scale=0.5)

    def forward():
        h = ad.group_norm(x, gamma, beta, groups=2)
        return ad.tsum(ad.silu(ad.conv2d(h, w)))
    return [x, gamma, beta, w], forward


def build_nd2d_matmul(rng):
    x = leaf(rng, (2, 5, 3))
    w = leaf(rng, (3, 4))
    v = leaf(rng, (4,))

    def forward():
        return ad.tsum(ad.mul(ad.matmul(x, w), v))
    return [x, w, v], forward


ALL_BUILDERS = [
    build_elementwise, build_broadcast, build_matmul_chain, build_attention,
    build_softmax, build_norm_ratio, build_conv_stack, build_conv1x1_gn,
    build_upsample, build_concat_reshape, build_embedding,
    build_time_embedding, build_masked_mse, build_mse_head,
    build_groupnorm_deep, build_nd2d_matmul,
]
