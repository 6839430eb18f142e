"""Dataset ingestion, portable tensor/checkpoint files, and the synthetic
fine-grained corpus generator.

Images are binary PPM (P6, maxval 255).  Tensors travel in the FICT
container: magic ``FICT`` | u32 LE version=1 | u8 dtype (1=real32,
2=real64) | u8 rank | 6x u64 LE dims (unused trail 0) | row-major LE
payload.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mfn import FrequencyIndexSet

FICT_MAGIC = b"FICT"
CKPT_MAGIC = b"FGCK"
SPLITS = ("train", "val", "test")


class FileFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM images

def write_ppm(path, img):
    """img: (3,H,W) float in [0,1]."""
    c, h, w = img.shape
    raw = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(raw.transpose(1, 2, 0).tobytes())


def _read_ppm_token(f):
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise FileFormatError("truncated PPM header")
        if ch in b" \t\r\n":
            if tok:
                return tok
            continue
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        tok += ch


def read_ppm(path):
    with open(path, "rb") as f:
        if f.read(2) != b"P6":
            raise FileFormatError(f"{path}: not a binary PPM (P6)")
        w = int(_read_ppm_token(f))
        h = int(_read_ppm_token(f))
        maxval = int(_read_ppm_token(f))
        if maxval != 255:
            raise FileFormatError(f"{path}: unsupported maxval {maxval}")
        payload = f.read(w * h * 3)
        if len(payload) != w * h * 3:
            raise FileFormatError(f"{path}: truncated PPM payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def bilinear_resize(img, side):
    """Resize (C,H,W) to (C,side,side), align-corners false convention."""
    c, h, w = img.shape
    if h == side and w == side:
        return img.copy()

    def axis_coords(n_src, n_dst):
        src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        src = np.clip(src, 0, n_src - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(h, side)
    xlo, xhi, fx = axis_coords(w, side)
    top = img[:, ylo][:, :, xlo] * (1 - fx) + img[:, ylo][:, :, xhi] * fx
    bot = img[:, yhi][:, :, xlo] * (1 - fx) + img[:, yhi][:, :, xhi] * fx
    out = top * (1 - fy)[None, :, None] + bot * fy[None, :, None]
    return out.astype(img.dtype)


def load_image(path, side=None):
    """Load a PPM or FICT image as (3,S,S) floats in [0,1], resizing with
    bilinear interpolation when the source side differs."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic[:2] == b"P6":
        img = read_ppm(path)
    elif magic == FICT_MAGIC:
        img = load_tensor(path)
        if img.ndim != 3 or img.shape[0] != 3:
            raise FileFormatError(f"{path}: tensor is not a 3xHxW image")
    else:
        raise FileFormatError(f"{path}: unknown image format")
    if side is not None and img.shape[1:] != (side, side):
        img = bilinear_resize(img, side)
    return img


# ---------------------------------------------------------------------------
# FICT tensor container

_DTYPE_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _encode_tensor(arr):
    arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d
    if arr.dtype not in _DTYPE_CODE:
        raise FileFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 6:
        raise FileFormatError(f"rank {arr.ndim} exceeds 6")
    dims = list(arr.shape) + [0] * (6 - arr.ndim)
    head = FICT_MAGIC + struct.pack("<IBB6Q", 1, _DTYPE_CODE[arr.dtype],
                                    arr.ndim, *dims)
    return head + arr.astype(arr.dtype.newbyteorder("<")).tobytes()


def _decode_tensor(buf, offset=0):
    head_len = 4 + 4 + 1 + 1 + 48
    head = buf[offset:offset + head_len]
    if len(head) < head_len or head[:4] != FICT_MAGIC:
        raise FileFormatError("bad FICT magic")
    version, code, rank, *dims = struct.unpack("<IBB6Q", head[4:])
    if version != 1:
        raise FileFormatError(f"unsupported FICT version {version}")
    if code not in _CODE_DTYPE:
        raise FileFormatError(f"unknown FICT dtype code {code}")
    if rank > 6 or any(d != 0 for d in dims[rank:]):
        raise FileFormatError("bad FICT dims")
    shape = tuple(int(d) for d in dims[:rank])
    dtype = _CODE_DTYPE[code]
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * dtype.itemsize
    payload = buf[offset + head_len:offset + head_len + nbytes]
    if len(payload) != nbytes:
        raise FileFormatError("FICT payload length mismatch")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("=")), offset + head_len + nbytes


def save_tensor(path, t):
    # engine tensors carry their array in .data; ndarrays pass through
    # (ndarray.data is a raw buffer, not the array)
    data = t.data if hasattr(t, "node") else np.asarray(t)
    with open(path, "wb") as f:
        f.write(_encode_tensor(data))


def load_tensor(path):
    buf = Path(path).read_bytes()
    arr, end = _decode_tensor(buf)
    if end != len(buf):
        raise FileFormatError(f"{path}: trailing bytes after FICT payload")
    return arr


# ---------------------------------------------------------------------------
# Dataset index

@dataclass
class DatasetIndex:
    root: str
    classes: list          # [(name, [sample paths])] lexicographic
    split_of: dict         # class name -> split

    def classes_for_split(self, split):
        return [(name, paths) for name, paths in self.classes
                if self.split_of[name] == split]


def scan_dataset(root, split_file):
    """Index a `<class>/<sample>` tree against a tab-separated split file."""
    root = Path(root)
    split_of = {}
    with open(split_file, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            name, _, split = line.partition("\t")
            if split not in SPLITS:
                raise FileFormatError(f"unknown split token {split!r} for {name}")
            if name in split_of and split_of[name] != split:
                raise FileFormatError(f"class {name} assigned to multiple splits")
            split_of[name] = split
    classes = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if d.name not in split_of:
            continue
        samples = sorted(str(p) for p in d.iterdir() if p.is_file())
        for s in samples:
            with open(s, "rb") as f:
                magic = f.read(4)
            if magic[:2] != b"P6" and magic != FICT_MAGIC:
                raise FileFormatError(f"unreadable sample {s}")
        classes.append((d.name, samples))
    return DatasetIndex(str(root), classes, split_of)


# ---------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    version: int
    params: dict            # name -> np.ndarray, insertion-ordered
    freq_set: FrequencyIndexSet | None
    config: dict            # str -> str
    rng_state: bytes = b""


def _freq_set_text(fs):
    if fs is None:
        return ""
    buf = io.StringIO()
    hf, wf = fs.grid
    buf.write(f"MFN-FREQ v1 M={fs.M} grid={hf}x{wf}\n")
    for m, (i, j, score) in enumerate(fs.entries):
        buf.write(f"{m} {i} {j} {score:.9g}\n")
    return buf.getvalue()


def _freq_set_parse(text):
    if not text:
        return None
    lines = text.splitlines()
    header = lines[0].split()
    fields = dict(tok.split("=", 1) for tok in header[2:])
    hf, wf = (int(x) for x in fields["grid"].split("x"))
    entries = []
    for line in lines[1:]:
        if line.strip():
            _, i, j, score = line.split()
            entries.append((int(i), int(j), float(score)))
    return FrequencyIndexSet(entries, (hf, wf))


def save_checkpoint(path, ckpt):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", ckpt.version))
        cfg = "".join(f"{k}={ckpt.config[k]}\n" for k in sorted(ckpt.config))
        for blob in (cfg.encode(), _freq_set_text(ckpt.freq_set).encode(),
                     ckpt.rng_state):
            f.write(struct.pack("<I", len(blob)) + blob)
        f.write(struct.pack("<I", len(ckpt.params)))
        for name, arr in ckpt.params.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(_encode_tensor(arr))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FileFormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != 1:
        raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    blobs = []
    for _ in range(3):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + n > len(buf):
            raise FileFormatError(f"{path}: truncated checkpoint block")
        blobs.append(buf[off:off + n])
        off += n
    config = {}
    for line in blobs[0].decode().splitlines():
        k, _, v = line.partition("=")
        config[k] = v
    freq_set = _freq_set_parse(blobs[1].decode())
    rng_state = bytes(blobs[2])
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        arr, off = _decode_tensor(buf, off)
        params[name] = arr
    if off != len(buf):
        raise FileFormatError(f"{path}: trailing bytes in checkpoint")
    return Checkpoint(version, params, freq_set, config, rng_state)


# ---------------------------------------------------------------------------
# Synthetic fine-grained corpus

BEAK_ANGLES = (-20.0, -10.0, 0.0, 10.0, 20.0)
MAX_STRIPES = 4


@dataclass
class SynthSpec:
    num_classes: int = 20
    samples_per_class: int = 30
    side: int = 32
    seed: int = 0
    translation_px: float = 3.0
    rotation_deg: float = 15.0
    scale_range: tuple = (0.85, 1.15)
    supersample: int = 3
    measure_probes: int = 6

    def __post_init__(self):
        if self.num_classes > len(BEAK_ANGLES) * MAX_STRIPES:
            raise ValueError(
                f"num_classes={self.num_classes} exceeds the "
                f"{len(BEAK_ANGLES) * MAX_STRIPES} distinct class bins")


def class_features(idx):
    """Class identity carried only by (beak angle bin, stripe count)."""
    return BEAK_ANGLES[idx % len(BEAK_ANGLES)], idx // len(BEAK_ANGLES) + 1


def class_name(idx):
    beak, stripes = class_features(idx)
    return f"c{idx:02d}_beak{int(beak):+03d}_s{stripes}"


def _sample_nuisance(rng, spec):
    lo, hi = spec.scale_range
    return {
        "rot": rng.uniform(-spec.rotation_deg, spec.rotation_deg) * np.pi / 180,
        "scale": rng.uniform(lo, hi),
        "tx": rng.uniform(-spec.translation_px, spec.translation_px),
        "ty": rng.uniform(-spec.translation_px, spec.translation_px),
        "body_rgb": rng.uniform(0.25, 0.85, size=3),
        "bg_a": rng.uniform(0.0, 1.0, size=3),
        "bg_b": rng.uniform(0.0, 1.0, size=3),
        "bg_freq": rng.uniform(0.05, 0.25, size=2),
        "bg_phase": rng.uniform(0, 2 * np.pi),
        "noise": rng.normal(0.0, 0.03, size=(3, spec.side, spec.side)),
    }


def render_sample(spec, beak_angle_deg, stripes, nu):
    """Analytic supersampled render of the shared bird shape; only the beak
    angle and the wing stripe frequency differ between classes."""
    s = spec.side
    ss = spec.supersample
    n = s * ss
    # supersampled pixel centers in canvas coordinates
    ys, xs = np.meshgrid((np.arange(n) + 0.5) / ss, (np.arange(n) + 0.5) / ss,
                         indexing="ij")
    cx = s / 2 + nu["tx"]
    cy = s / 2 + nu["ty"]
    half = s / 2
    # inverse nuisance transform into normalized object coordinates
    dx = (xs - cx) / (nu["scale"] * half)
    dy = (ys - cy) / (nu["scale"] * half)
    cr, sr = np.cos(-nu["rot"]), np.sin(-nu["rot"])
    ox = cr * dx - sr * dy
    oy = sr * dx + cr * dy

    body = (ox / 0.52) ** 2 + (oy / 0.34) ** 2 <= 1.0
    wx = (ox + 0.10) / 0.40
    wy = (oy - 0.02) / 0.22
    wing = wx ** 2 + wy ** 2 <= 1.0
    # stripes: alternating dark bands across the wing, count = class cue
    band = np.floor((np.clip(wx, -1, 1) + 1) / 2 * (2 * stripes)).astype(int)
    stripe = wing & (band % 2 == 1)

    theta = beak_angle_deg * np.pi / 180
    bl = 0.55
    bx0, hw = 0.50, 0.14
    # beak triangle: base at the body's right edge, tip rotated by the bin angle
    tipx = bx0 + bl * np.cos(theta)
    tipy = -bl * np.sin(theta)
    v0 = np.array([bx0, -hw])
    v1 = np.array([bx0, hw])
    v2 = np.array([tipx, tipy])

    def halfplane(a, b):
        return (b[0] - a[0]) * (oy - a[1]) - (b[1] - a[1]) * (ox - a[0])

    d0, d1, d2 = halfplane(v0, v1), halfplane(v1, v2), halfplane(v2, v0)
    beak = ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))

    # background grating
    fxy = nu["bg_freq"]
    grating = 0.5 + 0.5 * np.sin(2 * np.pi * (fxy[0] * xs + fxy[1] * ys)
                                 + nu["bg_phase"])
    img = np.empty((3, n, n))
    body_rgb = nu["body_rgb"]
    wing_rgb = np.minimum(body_rgb * 1.35 + 0.10, 1.0)
    stripe_rgb = np.full(3, 0.05)
    beak_rgb = np.array([0.95, 0.75, 0.15])
    for ch in range(3):
        layer = nu["bg_a"][ch] + (nu["bg_b"][ch] - nu["bg_a"][ch]) * grating
        layer = np.where(body, body_rgb[ch], layer)
        layer = np.where(wing, wing_rgb[ch], layer)
        layer = np.where(stripe, stripe_rgb[ch], layer)
        layer = np.where(beak, beak_rgb[ch], layer)
        img[ch] = layer
    # box-average the supersampled grid down to the pixel grid
    img = img.reshape(3, s, ss, s, ss).mean(axis=(2, 4))
    img = np.clip(img + nu["noise"], 0.0, 1.0)
    return img.astype(np.float32)


def default_split_assignment(num_classes):
    """Class-disjoint splits, test/val classes spread across the bin grid."""
    n_test = max(2, round(num_classes * 0.25))
    n_val = max(1, round(num_classes * 0.15))
    test = {int((i + 0.5) * num_classes / n_test) for i in range(n_test)}
    rest = [i for i in range(num_classes) if i not in test]
    val = {rest[int((i + 0.5) * len(rest) / n_val)] for i in range(n_val)}
    out = {}
    for i in range(num_classes):
        out[class_name(i)] = ("test" if i in test else
                              "val" if i in val else "train")
    return out


def generate_synthetic(spec, out_dir):
    """Render the corpus, write PPMs + split file + manifest, return the
    index.  Byte-identical per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_of = default_split_assignment(spec.num_classes)

    for cls in range(spec.num_classes):
        beak, stripes = class_features(cls)
        cdir = out / class_name(cls)
        cdir.mkdir(exist_ok=True)
        for k in range(spec.samples_per_class):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence((spec.seed, cls, k))))
            img = render_sample(spec, beak, stripes, _sample_nuisance(rng, spec))
            write_ppm(cdir / f"s{k:04d}.ppm", img)

    split_path = out / "split.txt"
    with open(split_path, "w", encoding="utf-8") as f:
        for i in range(spec.num_classes):
            name = class_name(i)
            f.write(f"{name}\t{split_of[name]}\n")

    inter, intra = measure_fine_grained(spec)
    with open(out / "manifest.txt", "w", encoding="utf-8") as f:
        f.write("FEWGRAIN-SYNTH v1\n")
        f.write(f"num_classes={spec.num_classes}\n")
        f.write(f"samples_per_class={spec.samples_per_class}\n")
        f.write(f"side={spec.side}\n")
        f.write(f"seed={spec.seed}\n")
        f.write(f"inter_class_l1_same_nuisance={inter:.6g}\n")
        f.write(f"intra_class_l1_diff_nuisance={intra:.6g}\n")
        f.write(f"signal_to_nuisance_ratio={inter / intra:.6g}\n")
    return scan_dataset(out, split_path)


def measure_fine_grained(spec):
    """Mean per-pixel L1 between classes under a shared nuisance draw vs
    within one class under different nuisances (probe renders, not part of
    the corpus)."""
    probes = [_sample_nuisance(
        np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((spec.seed, 0x70726F62, p)))), spec)
        for p in range(spec.measure_probes)]
    n_cls = min(spec.num_classes, 6)
    renders = np.stack([
        np.stack([render_sample(spec, *class_features(c), nu) for nu in probes])
        for c in range(n_cls)])
    inter_deltas = []
    for p in range(len(probes)):
        for c1 in range(n_cls):
            for c2 in range(c1 + 1, n_cls):
                inter_deltas.append(
                    np.abs(renders[c1, p] - renders[c2, p]).mean())
    intra_deltas = []
    for c in range(n_cls):
        for p1 in range(len(probes)):
            for p2 in range(p1 + 1, len(probes)):
                intra_deltas.append(
                    np.abs(renders[c, p1] - renders[c, p2]).mean())
    return float(np.mean(inter_deltas)), float(np.mean(intra_deltas))
