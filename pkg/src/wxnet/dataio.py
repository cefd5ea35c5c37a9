"""Manifests, PPM images, synthetic datasets and checkpoint files."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cooccurrence import THRESHOLD

# -- manifests -----------------------------------------------------------------


class ManifestError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


@dataclass
class Manifest:
    class_names: list[str]
    paths: list[Path]
    strengths: np.ndarray  # N x K in [0, 1]

    def __len__(self) -> int:
        return len(self.paths)

    def subset(self, idx) -> "Manifest":
        idx = np.asarray(idx, dtype=int)
        return Manifest(list(self.class_names), [self.paths[i] for i in idx], self.strengths[idx])


def load_manifest(path) -> Manifest:
    """Parse a manifest CSV: header ``path,<class>,...``, one image per row.

    Image paths are resolved relative to the manifest's directory. Rows are
    numbered from 1 (the first row after the header).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if not header or header[0].strip() != "path":
        raise ManifestError("header must start with 'path'", row=0)
    names = [h.strip() for h in header[1:]]
    if not names or any(not n for n in names) or len(set(names)) != len(names):
        raise ManifestError("header needs distinct, non-empty class names", row=0)
    paths, rows = [], []
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(names) + 1:
            raise ManifestError(f"expected {len(names) + 1} columns, found {len(row)}", row=row_no)
        vals = []
        for name, cell in zip(names, row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise ManifestError(f"strength for {name!r} is not a number: {cell!r}", row=row_no) from None
            if not 0.0 <= v <= 1.0:
                raise ManifestError(f"strength for {name!r} out of range [0, 1]: {cell}", row=row_no)
            vals.append(v)
        p = Path(row[0].strip())
        paths.append(p if p.is_absolute() else path.parent / p)
        rows.append(vals)
    strengths = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return Manifest(names, paths, strengths)


def write_manifest(manifest: Manifest, path, relative_to=None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path"] + list(manifest.class_names))
        for p, row in zip(manifest.paths, manifest.strengths):
            p = Path(p)
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            w.writerow([p.as_posix()] + [repr(float(v)) for v in row])


def binarize_strengths(strengths, add_other: bool = False) -> np.ndarray:
    """Labels are 1 where strength >= 0.5; ``add_other`` appends a column set when no label is."""
    s = np.asarray(strengths, dtype=float)
    labels = (s >= THRESHOLD).astype(np.int64)
    if add_other:
        other = (~labels.astype(bool).any(axis=-1)).astype(np.int64)
        labels = np.concatenate([labels, other[..., None]], axis=-1)
    return labels


# -- images --------------------------------------------------------------------


class DecodeError(ValueError):
    pass


def read_ppm(path) -> np.ndarray:
    """Decode a binary (P6) PPM into an ``H x W x 3`` uint8 array (16-bit samples are scaled down)."""
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DecodeError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise DecodeError(f"{path}: bad magic {tokens[0]!r}, expected b'P6'")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DecodeError(f"{path}: malformed header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DecodeError(f"{path}: invalid dimensions or maxval")
    pos += 1  # single whitespace byte after maxval
    bps = 1 if maxval < 256 else 2
    need = width * height * 3 * bps
    if len(data) - pos < need:
        raise DecodeError(f"{path}: truncated pixel data ({len(data) - pos} of {need} bytes)")
    raw = np.frombuffer(data, dtype=np.uint8 if bps == 1 else ">u2", count=width * height * 3, offset=pos)
    img = raw.reshape(height, width, 3)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("write_ppm expects an H x W x 3 uint8 array")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment and edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def decode_image(path, size: int = 256) -> np.ndarray:
    """Read a PPM as floats in [0, 1], resized to ``size x size x 3``."""
    img = read_ppm(path)
    out = img.astype(np.float64) / 255.0
    if img.shape[:2] != (size, size):
        out = resize_bilinear(out, size, size)
    return out


@dataclass
class Dataset:
    images: np.ndarray       # N x S x S x 3 float32 in [0, 1]
    labels: np.ndarray       # N x T binary
    class_names: list[str]
    strengths: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        s = None if self.strengths is None else self.strengths[idx]
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), s)


def load_dataset(manifest: Manifest | str | Path, size: int = 256, add_other: bool = False) -> Dataset:
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    images = np.stack([decode_image(p, size).astype(np.float32) for p in manifest.paths]) if len(manifest) \
        else np.zeros((0, size, size, 3), np.float32)
    names = list(manifest.class_names) + (["other"] if add_other else [])
    return Dataset(images, binarize_strengths(manifest.strengths, add_other), names, manifest.strengths)


# -- synthetic datasets ----------------------------------------------------------

SYNTH_NAMES = ("sunny", "cloudy", "foggy", "rainy", "snowy", "moist", "hazy", "windy")
_COLORS = np.array([
    (230, 40, 40), (40, 200, 60), (50, 80, 230), (235, 220, 40),
    (210, 50, 210), (40, 215, 215), (245, 245, 245), (240, 140, 30),
], dtype=np.float64)
_CELLS = [(0, 0), (0, 2), (2, 0), (2, 2), (0, 1), (2, 1), (1, 0), (1, 2)]


class SynthSpecError(ValueError):
    pass


def parse_synth_spec(text: str, class_names) -> dict[frozenset, float]:
    """Parse a label-set distribution, one ``labels,probability`` line each.

    Labels within a set are joined by ``+`` and given as class names or
    indices; an empty label field is the empty set. ``#`` starts a comment.
    """
    class_names = list(class_names)
    spec: dict[frozenset, float] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            labels, prob = line.rsplit(",", 1)
            p = float(prob)
        except ValueError:
            raise SynthSpecError(f"line {line_no}: expected 'labels,probability', got {raw!r}") from None
        members = set()
        for tok in filter(None, (t.strip() for t in labels.split("+"))):
            if tok.isdigit() and int(tok) < len(class_names):
                members.add(int(tok))
            elif tok in class_names:
                members.add(class_names.index(tok))
            else:
                raise SynthSpecError(f"line {line_no}: unknown class {tok!r}")
        key = frozenset(members)
        spec[key] = spec.get(key, 0.0) + p
    return spec


def validate_synth_spec(spec: dict[frozenset, float], k: int) -> None:
    for key, p in spec.items():
        if not 0.0 <= p <= 1.0:
            raise SynthSpecError(f"probability {p} for label set {sorted(key)} outside [0, 1]")
        if any(not 0 <= i < k for i in key):
            raise SynthSpecError(f"label set {sorted(key)} references a class outside 0..{k - 1}")
    total = sum(spec.values())
    if abs(total - 1.0) > 1e-6:
        raise SynthSpecError(f"label-set probabilities sum to {total}, expected 1")


def independent_spec(k: int, p: float = 0.4) -> dict[frozenset, float]:
    """Each class present independently with probability ``p``."""
    spec = {}
    for bits in itertools.product((0, 1), repeat=k):
        prob = float(np.prod([p if b else 1 - p for b in bits]))
        spec[frozenset(i for i, b in enumerate(bits) if b)] = prob
    return spec


def planted_cooccurrence(spec: dict[frozenset, float], k: int) -> np.ndarray:
    """Expected co-occurrence matrix of labels drawn from ``spec``."""
    joint = np.zeros((k, k))
    for key, p in spec.items():
        for i in key:
            for j in key:
                joint[i, j] += p
    occ = np.diag(joint).copy()
    return np.divide(joint, occ[:, None], out=np.zeros_like(joint), where=occ[:, None] > 0)


def render_sample(active, rng: np.random.Generator, size: int = 96) -> np.ndarray:
    """Noisy background plus one colored square per active class at its own grid cell."""
    base = rng.uniform(0.3, 0.55) * 255.0
    img = base + rng.normal(0.0, 12.0, size=(size, size, 3))
    cell = size / 3.0
    side = max(2, int(round(size * 0.2)))
    jitter = max(1, int(round(size * 0.05)))
    for k in active:
        cy, cx = _CELLS[k]
        y = int(round((cy + 0.5) * cell - side / 2)) + int(rng.integers(-jitter, jitter + 1))
        x = int(round((cx + 0.5) * cell - side / 2)) + int(rng.integers(-jitter, jitter + 1))
        y, x = np.clip(y, 0, size - side), np.clip(x, 0, size - side)
        img[y:y + side, x:x + side] = _COLORS[k] + rng.normal(0.0, 8.0, size=(side, side, 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def synth_dataset(k: int, n: int, seed: int, spec: dict[frozenset, float] | None = None,
                  out_dir=None, size: int = 96, class_names=None) -> tuple[np.ndarray, Manifest]:
    """Draw ``n`` labelled images whose label sets follow ``spec``.

    Returns the uint8 images and a manifest with strength 1.0 for active
    classes and 0.0 otherwise. With ``out_dir`` the images are written as
    PPM files next to ``manifest.csv``.
    """
    if not 1 <= k <= len(SYNTH_NAMES):
        raise ValueError(f"synthetic datasets support 1..{len(SYNTH_NAMES)} classes, got {k}")
    if n < 1:
        raise ValueError("synthetic dataset needs at least one sample")
    names = list(class_names) if class_names is not None else list(SYNTH_NAMES[:k])
    spec = independent_spec(k) if spec is None else spec
    validate_synth_spec(spec, k)
    rng = np.random.default_rng(seed)
    keys = sorted(spec, key=lambda s: (len(s), sorted(s)))
    probs = np.array([spec[s] for s in keys])
    draws = rng.choice(len(keys), size=n, p=probs / probs.sum())
    strengths = np.zeros((n, k))
    images = np.empty((n, size, size, 3), np.uint8)
    for i, d in enumerate(draws):
        active = sorted(keys[d])
        strengths[i, active] = 1.0
        images[i] = render_sample(active, rng, size)
    out = Path(out_dir) if out_dir is not None else Path(".")
    paths = [out / "images" / f"{i:05d}.ppm" for i in range(n)]
    manifest = Manifest(names, paths, strengths)
    if out_dir is not None:
        (out / "images").mkdir(parents=True, exist_ok=True)
        for p, img in zip(paths, images):
            write_ppm(p, img)
        write_manifest(manifest, out / "manifest.csv")
    return images, manifest


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"WXNN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    """Raised when the payload CRC does not match; the parsed content is attached."""

    def __init__(self, message: str, tensors: dict, meta: dict):
        super().__init__(message)
        self.tensors = tensors
        self.meta = meta


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(tensors: dict, meta: dict, path) -> None:
    """Write named tensors and a metadata block in the ``WXNN`` v1 format.

    Layout (little-endian): magic, u32 version, u32 count; per tensor u16 name
    length, name, u8 dtype (0 = f32, 1 = f64), u8 rank, rank x u64 dims,
    payload; then u32 length + UTF-8 JSON metadata; then u32 CRC32 of all
    tensor payload bytes.
    """
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    crc = 0
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value))
        if arr.dtype == np.float32:
            code = 0
        elif arr.dtype == np.float64:
            code = 1
        else:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r}: name too long or rank too high")
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        crc = zlib.crc32(payload, crc)
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<BB", code, arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), payload]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", crc)]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    """Read a ``WXNN`` checkpoint. Raises :class:`ChecksumError` on a payload CRC mismatch when ``verify``."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a WXNN checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    crc = 0
    for t in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"name length of tensor #{t}"))
        name = take(nlen, f"name of tensor #{t}").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"tensor {name!r} header"))
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"tensor {name!r} dims"))
        nbytes = _DTYPES[code].itemsize
        for d in dims:
            nbytes *= d
            if nbytes > len(data):
                raise CheckpointError(f"tensor {name!r}: dims {dims} overflow the file size")
        payload = take(nbytes, f"tensor {name!r} payload")
        crc = zlib.crc32(payload, crc)
        tensors[name] = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(dims).astype(_DTYPES[code].newbyteorder("="))
    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    try:
        meta = json.loads(take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed metadata block: {exc}") from exc
    (stored,) = struct.unpack("<I", take(4, "checksum"))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after checksum")
    if verify and stored != crc:
        raise ChecksumError(f"payload checksum mismatch (stored {stored:08x}, computed {crc:08x})", tensors, meta)
    return tensors, meta
