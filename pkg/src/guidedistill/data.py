"""Procedural 16x16 image generator with an attribute oracle.

Every vocabulary phrase maps to one deterministic rendering effect; filler
phrases map to the identity. Rendering is a pure function of (prompt,
instance seed): the seed drives only the stochastic texture/corruption
details (noise jitter, salt positions, hole placement).

The oracle inverts the generator: statistics-plus-template matching per
phrase, returning a presence score in [0, 1] with 0.5 as the decision
threshold. Constants below were calibrated on clean renders (see
tests/test_data.py for the calibration checks). Scores assume base-style
images (background at -0.8).
"""

from dataclasses import dataclass, field

import numpy as np

from .prompts import (CORRUPTIONS, FILLERS, INTENSITIES, PHRASE_TO_ID, SHAPES,
                      SIZES, TEXTURES, VOCAB, make_prompt)
from .rng import substream

IMG = 16
BACKGROUND = -0.8
BRIGHT = 0.8
DIM = 0.3
STRIPE_DROP = 0.7
NOISE_AMP = 0.3
SALT_COUNT = 10
HOLE = 4

STYLES = ("base", "inverted", "striped")


class RenderError(ValueError):
    pass


def _shape_mask(shape, size):
    r, c = np.mgrid[0:IMG, 0:IMG].astype(np.float64)
    dr, dc = r - 7.5, c - 7.5
    big = size == "large"
    if shape == "circle":
        rad = 5.5 if big else 3.2
        return dr * dr + dc * dc <= rad * rad
    if shape == "square":
        half = 4.5 if big else 2.5
        return (np.abs(dr) <= half) & (np.abs(dc) <= half)
    if shape == "cross":
        arm = 6.5 if big else 3.5
        return ((np.abs(dc) <= 1.5) & (np.abs(dr) <= arm)) | \
               ((np.abs(dr) <= 1.5) & (np.abs(dc) <= arm))
    if shape == "triangle":
        r0, r1 = (2, 13) if big else (5, 10)
        return (r >= r0) & (r <= r1) & (np.abs(dc) <= (r - r0) * 0.5)
    raise RenderError(f"unknown shape {shape!r}")


_TEMPLATES = {(s, z): _shape_mask(s, z) for s in SHAPES for z in SIZES}


def _box_blur(img):
    pad = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += pad[di:di + IMG, dj:dj + IMG]
    return out / 9.0


def render(prompt, instance_seed):
    """Rasterize a prompt. Requires exactly one shape phrase; size,
    intensity and texture default to large/bright/solid."""
    words = [VOCAB[t] for t in prompt]
    shapes = [w for w in words if w in SHAPES]
    if len(shapes) != 1:
        raise RenderError(f"prompt needs exactly one shape phrase, got {shapes}")
    sizes = [w for w in words if w in SIZES]
    intens = [w for w in words if w in INTENSITIES]
    texts = [w for w in words if w in TEXTURES]
    if len(sizes) > 1 or len(intens) > 1 or len(texts) > 1:
        raise RenderError(f"conflicting attribute phrases in {words}")
    corr = [w for w in CORRUPTIONS if w in words]

    shape = shapes[0]
    size = sizes[0] if sizes else "large"
    level = BRIGHT if (intens[0] if intens else "bright") == "bright" else DIM
    texture = texts[0] if texts else "solid"

    rng = np.random.default_rng(int(instance_seed))
    img = np.full((IMG, IMG), BACKGROUND, dtype=np.float64)
    mask = _TEMPLATES[(shape, size)]
    img[mask] = level
    if texture == "striped":
        rows = np.arange(IMG) % 2 == 1
        img[np.outer(rows, np.ones(IMG, bool)) & mask] = level - STRIPE_DROP
    elif texture == "noisy":
        img[mask] += rng.uniform(-NOISE_AMP, NOISE_AMP, size=int(mask.sum()))

    for c in corr:
        if c == "blur":
            img = _box_blur(img)
        elif c == "speckle":
            flat = rng.choice(IMG * IMG, size=SALT_COUNT, replace=False)
            img.flat[flat] = 1.0
        elif c == "hole":
            r0, c0 = rng.integers(0, IMG - HOLE + 1, size=2)
            img[r0:r0 + HOLE, c0:c0 + HOLE] = 0.0

    img = np.clip(img, -1.0, 1.0)
    return img.astype(np.float32)[None, :, :]


# ---------------------------------------------------------------------------
# attribute oracle

def _ramp(x, lo, hi):
    return float(np.clip((x - lo) / (hi - lo), 0.0, 1.0))


def _prototype(shape, size, level, texture, blurred):
    """Deterministic reference render for the non-stochastic textures."""
    img = np.full((IMG, IMG), BACKGROUND)
    mask = _TEMPLATES[(shape, size)]
    img[mask] = level
    if texture == "striped":
        rows = np.arange(IMG) % 2 == 1
        img[np.outer(rows, np.ones(IMG, bool)) & mask] = level - STRIPE_DROP
    if blurred:
        img = _box_blur(img)
    return np.clip(img, -1.0, 1.0)


_PROTOS = {}
for _s in SHAPES:
    for _z in SIZES:
        for _lvl_name, _lvl in (("dim", DIM), ("bright", BRIGHT)):
            for _tex in ("solid", "striped"):
                for _bl in (False, True):
                    _PROTOS[(_s, _z, _lvl_name, _tex, _bl)] = _prototype(_s, _z, _lvl, _tex, _bl)

_PROTO_MASKS = {k: v > -0.5 for k, v in _PROTOS.items()}


def _erode(mask):
    m = mask.copy()
    padded = np.pad(mask, 1, mode="constant")
    m &= padded[0:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, 0:-2] & padded[1:-1, 2:]
    return m


def _window_max_abs(img):
    a = np.abs(img)
    best = np.inf
    best_rc = (0, 0)
    for r0 in range(IMG - HOLE + 1):
        for c0 in range(IMG - HOLE + 1):
            m = a[r0:r0 + HOLE, c0:c0 + HOLE].max()
            if m < best:
                best, best_rc = m, (r0, c0)
    return best, best_rc


def attribute_oracle(image):
    """Score every vocabulary phrase's presence in `image` (scores in [0,1],
    decision threshold 0.5). Filler phrases are unrenderable and score 0.

    Detection order matters: corruption statistics come first because the
    shape/intensity/texture statistics exclude detected salt pixels and
    hole windows, and switch to blur-compensated thresholds on soft images.
    """
    img = np.asarray(image, dtype=np.float64).reshape(IMG, IMG)
    scores = {p: 0.0 for p in VOCAB}

    # blur: a crisp render always contains a hard jump somewhere
    gx = np.abs(np.diff(img, axis=1)).max()
    gy = np.abs(np.diff(img, axis=0)).max()
    maxgrad = max(gx, gy)
    scores["blur"] = _ramp(0.675 - maxgrad, -0.125, 0.125)
    blurred = scores["blur"] > 0.5

    # speckle: saturated pixels whose entire neighborhood sits far below
    # (noisy-texture pixels always have a bright neighbor, salt does not)
    pad = np.pad(img, 1, mode="edge")
    nbr = np.stack([pad[0:-2, 1:-1], pad[2:, 1:-1], pad[1:-1, 0:-2], pad[1:-1, 2:]])
    nmax = nbr.max(axis=0)
    salt_mask = (img >= 0.98) & (nmax <= img - 0.35)
    salt_count = int(salt_mask.sum())  # scored below; prototype residuals
    # reveal salt sitting on bright shapes that this local rule cannot see

    # hole: some 4x4 window is entirely near zero
    winmin, (hr, hc) = _window_max_abs(img)
    scores["hole"] = _ramp(0.2 - winmin, 0.0, 0.12)
    ignore = salt_mask.copy()
    if scores["hole"] > 0.5:
        ignore[hr:hr + HOLE, hc:hc + HOLE] = True

    # shape and size: IoU of the foreground against prototype masks, salt
    # and hole pixels excluded on both sides
    fg = (img > -0.5) & ~ignore
    keep = ~ignore
    ious = {}
    for (s, z) in _TEMPLATES:
        best = 0.0
        for bl in (False, True):
            for lvl in ("dim", "bright"):
                for tex in ("solid", "striped"):
                    tmpl = _PROTO_MASKS[(s, z, lvl, tex, bl)] & keep
                    inter = np.logical_and(fg, tmpl).sum()
                    union = np.logical_or(fg, tmpl).sum()
                    if union:
                        best = max(best, inter / union)
        ious[(s, z)] = best
    by_shape = {s: max(ious[(s, z)] for z in SIZES) for s in SHAPES}
    best_shape = max(SHAPES, key=by_shape.get)
    # a real render is mostly background; a canvas-filling foreground (for
    # example an all-zero image, which also trips the hole detector) is not
    # a shape however well it overlaps the largest template
    plausible = 4 <= fg.sum() <= 0.75 * max(keep.sum(), 1)
    # exactly one shape per render: runners-up stay below the threshold
    for s in SHAPES:
        full = _ramp(by_shape[s], 0.35, 0.65) if plausible else 0.0
        scores[s] = full if s == best_shape else min(full, 0.45)
    shape_found = scores[best_shape] > 0.5

    if shape_found:
        best_size = max(SIZES, key=lambda z: ious[(best_shape, z)])
        for z in SIZES:
            full = _ramp(ious[(best_shape, z)], 0.35, 0.65)
            scores[z] = full if z == best_size else min(full, 0.45)

        # level and texture by residual against exact prototypes: solid and
        # striped renders are deterministic, so the right prototype matches
        # to ~0; a leveled-but-unmatched image with bounded residual is the
        # noisy texture
        match = {}
        for lvl in ("dim", "bright"):
            for tex in ("solid", "striped"):
                best = np.inf
                for bl in (False, True):
                    key = (best_shape, best_size, lvl, tex, bl)
                    region = (fg | _PROTO_MASKS[key]) & keep
                    if region.sum() < 4:
                        continue
                    med = float(np.median(np.abs(img - _PROTOS[key])[region]))
                    best = min(best, med)
                match[(lvl, tex)] = best
        best_key = min(match, key=match.get)
        m_solid = min(match[("dim", "solid")], match[("bright", "solid")])
        m_striped = min(match[("dim", "striped")], match[("bright", "striped")])
        m_best = min(m_solid, m_striped)
        m_dim = min(match[("dim", "solid")], match[("dim", "striped")])
        m_bright = min(match[("bright", "solid")], match[("bright", "striped")])

        # exact prototypes match to ~0; blurred noise sits near 0.03-0.05
        scores["solid"] = _ramp(0.022 - m_solid, 0.0, 0.012)
        scores["striped"] = _ramp(0.03 - m_striped, 0.0, 0.02)
        scores["noisy"] = min(_ramp(m_best - 0.018, 0.0, 0.012),
                              _ramp(0.45 - m_best, 0.0, 0.15))
        scores["bright"] = _ramp(m_dim - m_bright, -0.06, 0.06)
        scores["dim"] = _ramp(m_bright - m_dim, -0.06, 0.06)

        # salt sitting on the shape: saturated pixels far above the matched
        # prototype (only trustworthy when some prototype actually matched)
        if m_best <= 0.03:
            lvl, tex = best_key
            residuals = []
            for bl in (False, True):
                proto = _PROTOS[(best_shape, best_size, lvl, tex, bl)]
                residuals.append(np.abs(img - proto))
            resid = np.minimum(*residuals)
            extra = (img >= 0.98) & (resid >= 0.19) & keep & ~salt_mask
            salt_count += int(extra.sum())

    scores["speckle"] = _ramp(salt_count, 0.5, 2.0)
    return scores


def detected_phrases(scores, threshold=0.5):
    return {p for p, s in scores.items() if s > threshold}


# ---------------------------------------------------------------------------
# datasets

@dataclass
class DatasetSpec:
    size: int
    style: str = "base"
    corruption_prob: float = 0.3
    seed: int = 0
    filler_max: int = 2

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}")
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ValueError("corruption_prob must be in [0,1]")

    def texture_weights(self):
        if self.style == "striped":
            return {"solid": 0.1, "striped": 0.8, "noisy": 0.1}
        return {"solid": 1 / 3, "striped": 1 / 3, "noisy": 1 / 3}


@dataclass
class Dataset:
    images: np.ndarray  # [N, 1, 16, 16] float32
    prompts: list
    spec: DatasetSpec = field(default=None)

    def __len__(self):
        return len(self.prompts)


def make_dataset(spec):
    """Generate `spec.size` (image, prompt) pairs deterministically."""
    tex_names = list(TEXTURES)
    tw = spec.texture_weights()
    tex_p = np.array([tw[t] for t in tex_names])
    images = np.zeros((spec.size, 1, IMG, IMG), dtype=np.float32)
    prompts = []
    for i in range(spec.size):
        rng = substream(spec.seed, "record", i)
        words = [SHAPES[rng.integers(4)], SIZES[rng.integers(2)],
                 INTENSITIES[rng.integers(2)],
                 tex_names[rng.choice(3, p=tex_p)]]
        if rng.random() < spec.corruption_prob:
            words.append(CORRUPTIONS[rng.integers(3)])
        nfill = int(rng.integers(0, spec.filler_max + 1))
        if nfill:
            words.extend(FILLERS[j] for j in rng.choice(len(FILLERS), size=nfill, replace=False))
        order = rng.permutation(len(words))
        prompt = make_prompt([words[j] for j in order])
        img = render(prompt, int(rng.integers(0, 2**63 - 1)))
        if spec.style == "inverted":
            img = -img
        images[i] = img
        prompts.append(prompt)
    return Dataset(images=images, prompts=prompts, spec=spec)


def corrupted_fraction(ds):
    corr_ids = {PHRASE_TO_ID[c] for c in CORRUPTIONS}
    n = sum(1 for p in ds.prompts if corr_ids & set(p))
    return n / max(len(ds), 1)
