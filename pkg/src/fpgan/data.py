"""Image ingestion: binary PPM (P6), raw FTEN1 tensors, and folder datasets."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, DatasetError, FormatError
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

FTEN_MAGIC = b"FTEN1"
_FTEN_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _ppm_header(raw: bytes) -> tuple[int, int, int, int]:
    """Parse ``P6 <w> <h> <maxval>`` and return (w, h, maxval, data_offset)."""
    if raw[:2] != b"P6":
        raise FormatError(f"P6 required, file starts with {raw[:2]!r}")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(raw):
            raise FormatError("truncated PPM header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError("PPM header must end with a single whitespace byte")
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"non-numeric PPM header fields {tokens!r}") from None
    if w < 1 or h < 1:
        raise FormatError(f"bad PPM size {w}x{h}")
    if maxval != 255:
        raise FormatError(f"PPM maxval must be 255, got {maxval}")
    return w, h, maxval, pos + 1


def decode_ppm(raw: bytes) -> np.ndarray:
    """Bytes of a P6 file -> uint8 array [3, H, W]."""
    w, h, _, off = _ppm_header(raw)
    need = 3 * w * h
    pix = raw[off:off + need]
    if len(pix) < need:
        raise FormatError(f"truncated PPM pixel data: {len(pix)} of {need} bytes")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)


def bytes_to_unit(b: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (b.astype(np.float64) / 127.5 - 1.0).astype(dtype)


def unit_to_bytes(v: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and quantize with round-half-away-from-zero."""
    x = 127.5 * (np.clip(np.asarray(v, dtype=np.float64), -1.0, 1.0) + 1.0)
    return np.floor(x + 0.5).astype(np.uint8)


def load_ppm(path, dtype=np.float32) -> Tensor:
    return Tensor(bytes_to_unit(decode_ppm(Path(path).read_bytes()), dtype))


def encode_ppm(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"save_ppm needs a [3, H, W] tensor, got dims {list(arr.shape)}")
    _, h, w = arr.shape
    body = unit_to_bytes(arr).transpose(1, 2, 0).tobytes()
    return f"P6\n{w} {h}\n255\n".encode("ascii") + body


def save_ppm(t, path) -> None:
    Path(path).write_bytes(encode_ppm(t))


def encode_ften(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = {np.dtype("float32"): 0, np.dtype("float64"): 1}.get(arr.dtype)
    if code is None:
        raise FormatError(f"FTEN supports float32/float64, got {arr.dtype}")
    head = FTEN_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_FTEN_DTYPES[code]).tobytes()


def decode_ften(raw: bytes) -> np.ndarray:
    if raw[:5] != FTEN_MAGIC:
        raise FormatError(f"bad FTEN magic {raw[:5]!r}")
    if len(raw) < 7:
        raise FormatError("truncated FTEN header")
    code, ndim = struct.unpack("<BB", raw[5:7])
    if code not in _FTEN_DTYPES:
        raise FormatError(f"unknown FTEN dtype code {code}")
    end = 7 + 8 * ndim
    if len(raw) < end:
        raise FormatError("truncated FTEN dims")
    dims = struct.unpack(f"<{ndim}Q", raw[7:end])
    dt = _FTEN_DTYPES[code]
    need = int(np.prod(dims)) * dt.itemsize
    if len(raw) != end + need:
        raise FormatError(f"FTEN payload is {len(raw) - end} bytes, expected {need}")
    return np.frombuffer(raw[end:], dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def save_ften(arr, path) -> None:
    Path(path).write_bytes(encode_ften(arr.data if isinstance(arr, Tensor) else arr))


def load_ften(path) -> np.ndarray:
    return decode_ften(Path(path).read_bytes())


def crop_resize_indices(h: int, w: int, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Source row/col indices for a center square crop then nearest resize.

    Output pixel ``i`` reads crop pixel ``floor(i * side / resolution)``.
    """
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    idx = (np.arange(resolution) * side) // resolution
    return top + idx, left + idx


def fit_image(img: np.ndarray, resolution: int) -> np.ndarray:
    _, h, w = img.shape
    if h == w == resolution:
        return img
    rows, cols = crop_resize_indices(h, w, resolution)
    return img[:, rows][:, :, cols]


def _decode_item(path: Path) -> list[np.ndarray]:
    if path.suffix == ".ppm":
        return [bytes_to_unit(decode_ppm(path.read_bytes()), np.float64)]
    arr = load_ften(path).astype(np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3:
        return [arr]
    if arr.ndim == 4 and arr.shape[1] == 3:
        return list(arr)
    raise FormatError(f"FTEN image tensor must be [3,H,W] or [N,3,H,W], got {list(arr.shape)}")


@dataclass
class Dataset:
    """All images of a folder, fitted to ``[3, R, R]`` and held in memory."""

    images: np.ndarray  # [n, 3, R, R]
    files: list[str]
    rng: Rng

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def epoch_order(self, epoch: int) -> np.ndarray:
        return self.rng.child(epoch).permutation(len(self))

    def batches(self, epoch: int, batch_size: int, drop_last: bool = False) -> Iterator[Tensor]:
        order = self.epoch_order(epoch)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                return
            yield Tensor(self.images[idx])

    def batch_at(self, step: int, batch_size: int) -> Tensor:
        """The batch consumed by training step ``step`` (0-based).

        Full batches only; a dataset smaller than ``batch_size`` yields the
        whole (shuffled) set every step.
        """
        per_epoch = max(len(self) // batch_size, 1)
        epoch, k = divmod(step, per_epoch)
        order = self.epoch_order(epoch)
        idx = order[k * batch_size:(k + 1) * batch_size]
        return Tensor(self.images[idx])


def load_dataset(directory, resolution: int, rng: Rng, dtype=np.float32) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"dataset directory {str(d)!r} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix in (".ppm", ".ften") and p.is_file())
    if not files:
        raise DatasetError(f"no .ppm or .ften files in {str(d)!r}")
    images, names, bad = [], [], []
    for f in files:
        try:
            items = _decode_item(f)
        except (FormatError, OSError) as exc:
            bad.append(f"{f.name}: {exc}")
            continue
        for it in items:
            images.append(fit_image(it, resolution))
            names.append(f.name)
    if bad:
        log.warning("skipped %d undecodable file(s): %s", len(bad), "; ".join(bad))
    if not images:
        raise DatasetError(f"no decodable images in {str(d)!r}: " + "; ".join(bad))
    return Dataset(np.stack(images).astype(dtype), names, rng)


TOY_DIR = Path(__file__).with_name("toy_data")


def bundled_toy_dir() -> Path:
    """Folder of the 64 bundled 32px images written by :func:`make_synthetic_dataset`."""
    if not TOY_DIR.is_dir():
        raise DatasetError(f"bundled toy dataset missing at {str(TOY_DIR)!r}")
    return TOY_DIR


def make_synthetic_dataset(directory, n: int = 64, resolution: int = 32, seed: int = 0) -> list[Path]:
    """Write ``n`` PPM images of coloured discs and bars on soft gradients."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed).child("synthetic")
    yy, xx = np.mgrid[0:resolution, 0:resolution] / (resolution - 1)
    paths = []
    for i in range(n):
        u = rng.uniform(12)
        base = np.stack([0.2 + 0.3 * u[0] * yy, 0.2 + 0.3 * u[1] * xx, 0.3 + 0.2 * u[2] * (1 - yy)])
        cy, cx = 0.25 + 0.5 * u[3], 0.25 + 0.5 * u[4]
        rad = 0.12 + 0.15 * u[5]
        disc = ((yy - cy) ** 2 + (xx - cx) ** 2) < rad ** 2
        colour = np.array([0.6 + 0.4 * u[6], 0.2 + 0.6 * u[7], 0.1 * u[8]])
        img = np.where(disc[None], colour[:, None, None], base)
        if u[9] > 0.5:
            bar = np.abs(xx - u[10]) < 0.06
            img = np.where(bar[None], np.array([0.1, 0.1, 0.6 + 0.4 * u[11]])[:, None, None], img)
        p = d / f"img_{i:04d}.ppm"
        save_ppm(img * 2.0 - 1.0, p)
        paths.append(p)
    return paths
