"""Binary file formats: checkpoints, datasets, latent dumps, PGM, CSV.

Checkpoint container (shared by teachers, adapters, and latent dumps):

    magic 'GDCP' | version u32 | arch-hash 32 bytes (sha256) | n_blobs u32
    blob:  name_len u16 | name utf-8 | ndim u8 | dims u32* | data f32 LE

Dataset file:

    magic 'GDDS' | version u32 | meta_len u32 | meta utf-8 key=value lines
    n u32 | h u16 | w u16
    record: n_tokens u8 | tokens u8* | pixels f32 LE h*w

Model geometry rides inside checkpoints as 'meta.*' blobs so one container
format serves every model kind.
"""

import struct

import numpy as np

from .adapter import GuidanceAdapter
from .data import Dataset, DatasetSpec
from .unet import ArchitectureError, TeacherModel

CKPT_MAGIC = b"GDCP"
DATA_MAGIC = b"GDDS"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or wrong-format checkpoint file."""


def save_checkpoint(path, blobs, arch_hash_hex):
    digest = bytes.fromhex(arch_hash_hex)
    if len(digest) != 32:
        raise CheckpointError("arch hash must be a sha256 hex digest")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(digest)
        f.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path):
    """Return (ordered dict name -> float32 array, arch_hash_hex, version)."""
    try:
        raw = open(path, "rb").read()
    except OSError as e:
        raise FileNotFoundError(str(e))
    if len(raw) < 44 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    arch_hash = raw[8:40].hex()
    (n,) = struct.unpack_from("<I", raw, 40)
    off = 44
    blobs = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        ndim = raw[off]
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        blobs[name] = arr.astype(np.float32)
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last blob")
    return blobs, arch_hash, version


# ---------------------------------------------------------------------------
# model checkpoints

def save_teacher(path, teacher):
    blobs = [("meta.kind", np.array([0.0])),
             ("meta.widths", np.array(teacher.widths, dtype=np.float32)),
             ("meta.attn", np.array([teacher.attn_inner, teacher.attn_heads], dtype=np.float32))]
    blobs += [(n, p.data) for n, p in teacher.named_params()]
    save_checkpoint(path, blobs, teacher.arch_hash())


def load_teacher(path):
    blobs, arch_hash, _ = load_checkpoint(path)
    if blobs.get("meta.kind") is None or int(blobs["meta.kind"][0]) != 0:
        raise CheckpointError(f"{path}: not a teacher checkpoint")
    widths = tuple(int(x) for x in blobs["meta.widths"])
    inner, heads = (int(x) for x in blobs["meta.attn"])
    model = TeacherModel(seed=0, widths=widths, attn_inner=inner, attn_heads=heads)
    for name, p in model.named_params():
        if name not in blobs:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if blobs[name].shape != p.data.shape:
            raise ArchitectureError(
                f"{path}: {name} has shape {blobs[name].shape}, expected {p.data.shape}")
        p.data = blobs[name].copy()
    if model.arch_hash() != arch_hash:
        raise ArchitectureError(f"{path}: architecture hash mismatch")
    return model


def save_adapter(path, adapter):
    sig = np.array([b.signature() for b in adapter.blocks], dtype=np.float32)
    blobs = [("meta.kind", np.array([1.0])),
             ("meta.signatures", sig),
             ("meta.normalize", np.array([1.0 if adapter.normalize else 0.0]))]
    blobs += [(n, p.data) for n, p in adapter.named_params()]
    save_checkpoint(path, blobs, adapter.attention_signature())


def load_adapter(path):
    blobs, arch_hash, _ = load_checkpoint(path)
    if blobs.get("meta.kind") is None or int(blobs["meta.kind"][0]) != 1:
        raise CheckpointError(f"{path}: not an adapter checkpoint")
    sigs = [tuple(int(x) for x in row) for row in blobs["meta.signatures"]]
    normalize = bool(blobs["meta.normalize"][0])
    adapter = GuidanceAdapter.from_signatures(sigs, normalize=normalize)
    for name, p in adapter.named_params():
        if name not in blobs:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if blobs[name].shape != p.data.shape:
            raise ArchitectureError(
                f"{path}: {name} has shape {blobs[name].shape}, expected {p.data.shape}")
        p.data = blobs[name].copy()
    if adapter.attention_signature() != arch_hash:
        raise ArchitectureError(f"{path}: attention signature mismatch")
    return adapter


def load_model_file(path):
    """Load either kind; returns ('teacher', model) or ('adapter', adapter)."""
    blobs, _, _ = load_checkpoint(path)
    kind = int(blobs.get("meta.kind", np.array([-1.0]))[0])
    if kind == 0:
        return "teacher", load_teacher(path)
    if kind == 1:
        return "adapter", load_adapter(path)
    raise CheckpointError(f"{path}: unknown checkpoint kind")


# ---------------------------------------------------------------------------
# datasets

def save_dataset(path, ds):
    spec = ds.spec
    meta = "".join(f"{k}={v}\n" for k, v in (
        ("size", spec.size), ("style", spec.style),
        ("corruption_prob", spec.corruption_prob), ("seed", spec.seed),
        ("filler_max", spec.filler_max)))
    mb = meta.encode("utf-8")
    n, _, h, w = ds.images.shape
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(mb)))
        f.write(mb)
        f.write(struct.pack("<IHH", n, h, w))
        for i in range(n):
            toks = ds.prompts[i]
            f.write(struct.pack("<B", len(toks)))
            f.write(bytes(toks))
            f.write(ds.images[i].astype("<f4").tobytes())


def load_dataset(path):
    try:
        raw = open(path, "rb").read()
    except OSError as e:
        raise FileNotFoundError(str(e))
    if raw[:4] != DATA_MAGIC:
        raise CheckpointError(f"{path}: not a dataset file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported dataset version {version}")
    (mlen,) = struct.unpack_from("<I", raw, 8)
    meta = {}
    for line in raw[12:12 + mlen].decode("utf-8").splitlines():
        k, v = line.split("=", 1)
        meta[k] = v
    off = 12 + mlen
    n, h, w = struct.unpack_from("<IHH", raw, off)
    off += 8
    images = np.zeros((n, 1, h, w), dtype=np.float32)
    prompts = []
    for i in range(n):
        ln = raw[off]
        off += 1
        prompts.append(tuple(raw[off:off + ln]))
        off += ln
        images[i, 0] = np.frombuffer(raw, dtype="<f4", count=h * w, offset=off).reshape(h, w)
        off += 4 * h * w
    spec = DatasetSpec(size=int(meta["size"]), style=meta["style"],
                       corruption_prob=float(meta["corruption_prob"]),
                       seed=int(meta["seed"]), filler_max=int(meta["filler_max"]))
    return Dataset(images=images, prompts=prompts, spec=spec)


# ---------------------------------------------------------------------------
# images and tables

def write_pgm(path, image):
    """8-bit binary PGM; values clamped from [-1, 1] to [0, 255]."""
    img = np.asarray(image, dtype=np.float32)
    img = img.reshape(img.shape[-2], img.shape[-1])
    px = np.clip((img + 1.0) * 0.5, 0.0, 1.0)
    px = np.round(px * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def _fmt(v):
    if isinstance(v, float) or isinstance(v, np.floating):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path):
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def csv_equal_ignoring_wall(path_a, path_b):
    """Byte-level CSV comparison with wall-clock columns masked out; those
    are the only fields allowed to differ between identical reruns."""
    ha, ra = read_csv(path_a)
    hb, rb = read_csv(path_b)
    if ha != hb or len(ra) != len(rb):
        return False
    skip = {i for i, name in enumerate(ha) if name.startswith("wall")}
    for x, y in zip(ra, rb):
        for i, (u, v) in enumerate(zip(x, y)):
            if i in skip:
                continue
            if u != v:
                return False
        if len(x) != len(y):
            return False
    return True
