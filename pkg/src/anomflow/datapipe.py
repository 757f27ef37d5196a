"""Dataset trees, image and tensor files, and the synthetic benchmark.

Directory convention (one category per dataset root):

    {root}/{category}/train/good/       flawless training images
    {root}/{category}/test/good/        flawless test images
    {root}/{category}/test/{defect}/    anomalous test images per defect type

Supported image files are binary PPM (P6), binary PGM (P5, replicated to
three channels) and ``.adtn`` tensor files; pixel values decode to float32
in [0, 1].  The synthetic generator writes a complete tree of 64x64 RGB
textures (sums of random sinusoid gratings plus white noise) where defect
images carry either a dark scratch or a bright Gaussian blob; everything
derives from per-image seeds, so trees are byte-reproducible and any
image, its pre-defect base and its defect mask can be regenerated without
touching the files.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, LayoutError

F32 = np.float32

IMAGE_EXTS = (".ppm", ".pgm", ".adtn")
SYNTH_SIZE = 64
DEFECT_KINDS = ("scratch", "blob")

TENSOR_MAGIC = b"ADTN"
TENSOR_VERSION = 1


@dataclass
class DatasetLayout:
    root: Path
    category: str
    train_flawless: list[Path]
    test_flawless: list[Path]
    test_anomalous: list[tuple[Path, str]]  # (path, defect type)


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3,H,W) float32 in [0,1]
    label: str = "flawless"
    anomaly_type: str | None = None


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix in IMAGE_EXTS)


def load_dataset(root, category: str) -> DatasetLayout:
    """Enumerate a category tree; ordering is lexicographic by path."""
    base = Path(root) / category
    train_dir = base / "train" / "good"
    if not train_dir.is_dir():
        raise LayoutError(f"missing train/good directory: {train_dir}")
    test_dir = base / "test"
    if not test_dir.is_dir():
        raise LayoutError(f"missing test directory: {test_dir}")
    train = _image_files(train_dir)
    test_flawless: list[Path] = []
    test_anomalous: list[tuple[Path, str]] = []
    for sub in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        files = _image_files(sub)
        if sub.name == "good":
            test_flawless.extend(files)
        else:
            test_anomalous.extend((f, sub.name) for f in files)
    if not test_flawless and not test_anomalous:
        raise LayoutError(f"test directory has no images: {test_dir}")
    return DatasetLayout(root=Path(root), category=category,
                         train_flawless=train, test_flawless=test_flawless,
                         test_anomalous=test_anomalous)


# ---------------------------------------------------------------------------
# PPM / PGM


def _parse_pnm_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    magic = data[:2]
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise FormatError(f"{path}: unexpected byte {ch!r} in header")
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (must be 255)")
    return magic, w, h, maxval, pos


def decode_image(path, id: str | None = None) -> Sample:
    """Decode a PPM/PGM/.adtn file to a (3,H,W) float sample in [0,1]."""
    path = Path(path)
    if path.suffix == ".adtn":
        arr = read_tensor(path)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise FormatError(
                f"{path}: tensor image must be (3,H,W), got {tuple(arr.shape)}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
            raise FormatError(f"{path}: tensor image values outside [0,1]")
        return Sample(id=id or path.stem, image=arr.astype(F32))
    with open(path, "rb") as f:
        data = f.read()
    magic, w, h, _, pos = _parse_pnm_header(data, path)
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"{path}: truncated pixel data "
                          f"({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    arr = arr.transpose(2, 0, 1).astype(F32) / F32(255)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=0)
    return Sample(id=id or path.stem, image=np.ascontiguousarray(arr))


def encode_ppm(image: np.ndarray, path) -> None:
    """Write a (3,H,W) float image in [0,1] as binary PPM, atomically."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"expected (3,H,W) image, got {tuple(image.shape)}")
    h, w = image.shape[1:]
    quant = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    payload = quant.transpose(1, 2, 0).tobytes()
    _atomic_write(path, b"P6\n%d %d\n255\n" % (w, h) + payload)


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# ADTN tensor files


def write_tensor(tensor: np.ndarray, path) -> None:
    """Write a float32 tensor in the ADTN container, atomically."""
    arr = np.ascontiguousarray(tensor, dtype=F32)
    head = TENSOR_MAGIC + struct.pack("<BBI", TENSOR_VERSION, 0, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    _atomic_write(path, head + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic, not an ADTN file")
    if len(data) < 10:
        raise FormatError(f"{path}: truncated header")
    version, dtype, ndim = struct.unpack("<BBI", data[4:10])
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != 0:
        raise FormatError(f"{path}: unsupported dtype {dtype}")
    dims_end = 10 + 4 * ndim
    if len(data) < dims_end:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{ndim}I", data[10:dims_end])
    expect = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = data[dims_end:]
    if len(payload) != expect * 4:
        raise FormatError(
            f"{path}: dims {dims} need {expect * 4} payload bytes, "
            f"file has {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(F32)


# ---------------------------------------------------------------------------
# synthetic benchmark


def _texture(rng: np.random.Generator) -> np.ndarray:
    """Band-limited color texture: four sinusoid gratings + 5% white noise."""
    size = SYNTH_SIZE
    yy = np.arange(size, dtype=np.float64)[:, None]
    xx = np.arange(size, dtype=np.float64)[None, :]
    img = np.full((3, size, size), 0.5)
    for _ in range(4):
        theta = rng.uniform(0.0, np.pi)
        cycles = rng.uniform(2.0, 8.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        proj = (np.cos(theta) * xx + np.sin(theta) * yy) * (
            2.0 * np.pi * cycles / size)
        wave = np.sin(proj + phase)
        amps = rng.uniform(0.04, 0.12, size=3)
        img += amps[:, None, None] * wave
    img += rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(F32)


def _scratch(img: np.ndarray, rng: np.random.Generator):
    """Dark anti-aliased line: width 1-2 px, length 15-40 px, intensity x0.3.

    The returned mask is the exact support of the perturbation; outside it
    the image is bitwise equal to its base.
    """
    size = SYNTH_SIZE
    cy, cx = rng.uniform(size * 0.25, size * 0.75, size=2)
    theta = rng.uniform(0.0, np.pi)
    length = rng.uniform(15.0, 40.0)
    width = rng.uniform(1.0, 2.0)
    dy, dx = np.sin(theta), np.cos(theta)
    half = length / 2.0
    yy = np.arange(size, dtype=np.float64)[:, None] - cy
    xx = np.arange(size, dtype=np.float64)[None, :] - cx
    t = np.clip(yy * dy + xx * dx, -half, half)
    dist = np.hypot(yy - t * dy, xx - t * dx)
    alpha = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    out = (img * (1.0 - 0.7 * alpha[None])).astype(F32)
    return out, alpha > 0.0


def _blob(img: np.ndarray, rng: np.random.Generator):
    """Additive Gaussian bump: sigma 3-6 px, amplitude 0.4.

    The tail is cut below one byte level so the perturbation has compact
    support; the mask is that support.
    """
    size = SYNTH_SIZE
    cy, cx = rng.uniform(size * 0.25, size * 0.75, size=2)
    sigma = rng.uniform(3.0, 6.0)
    yy = np.arange(size, dtype=np.float64)[:, None] - cy
    xx = np.arange(size, dtype=np.float64)[None, :] - cx
    bump = 0.4 * np.exp(-(yy * yy + xx * xx) / (2.0 * sigma * sigma))
    bump[bump < 0.004] = 0.0
    out = np.clip(img + bump[None], 0.0, 1.0).astype(F32)
    return out, bump > 0.0


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(seed ^ index)


def defect_kind(defect_index: int) -> str:
    """Defect types alternate: even indices scratch, odd indices blob."""
    return DEFECT_KINDS[defect_index % 2]


def synth_flawless(seed: int, index: int) -> np.ndarray:
    """Regenerate the flawless image with global index ``index``."""
    return _texture(_image_rng(seed, index))


def synth_defect(seed: int, index: int, defect_index: int):
    """Regenerate a defect image: (base, defected, mask, kind).

    ``index`` is the image's global index in the tree, ``defect_index`` its
    position among the defective images (selects scratch vs blob).
    """
    rng = _image_rng(seed, index)
    base = _texture(rng)
    kind = defect_kind(defect_index)
    img, mask = (_scratch if kind == "scratch" else _blob)(base, rng)
    return base, img, mask, kind


def synth_dataset(out_root, n_train: int, n_test_good: int,
                  n_test_defect: int, seed: int,
                  category: str = "synthetic") -> DatasetLayout:
    """Generate an MVTec-style tree of synthetic textures.

    Fully determined by (counts, seed): per-image generators are seeded
    with seed XOR a global image index, so the tree is byte-identical
    across runs and individual images can be regenerated in isolation.
    """
    if min(n_train, n_test_good, n_test_defect) < 1:
        raise InputError("all synth counts must be >= 1")
    base = Path(out_root) / category
    dirs = {
        "train": base / "train" / "good",
        "good": base / "test" / "good",
        "scratch": base / "test" / "scratch",
        "blob": base / "test" / "blob",
    }
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    gi = 0
    for i in range(n_train):
        encode_ppm(synth_flawless(seed, gi), dirs["train"] / f"{i:04d}.ppm")
        gi += 1
    for i in range(n_test_good):
        encode_ppm(synth_flawless(seed, gi), dirs["good"] / f"{i:04d}.ppm")
        gi += 1
    for k in range(n_test_defect):
        _, img, _, kind = synth_defect(seed, gi, k)
        encode_ppm(img, dirs[kind] / f"{k:04d}.ppm")
        gi += 1
    return load_dataset(out_root, category)
