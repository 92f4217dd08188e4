"""Datasets and image utilities.

Toy generators are seed-deterministic. Image archives use the IDX
format (big-endian dims, ubyte payload), optionally gzip-compressed;
pixel values load as float64 in [0, 1].
"""

from __future__ import annotations

import gzip
import os
import struct

import numpy as np

from .errors import BadMagic, CountMismatch, IOFormatError, TruncatedFile

IDX_UBYTE = 0x08


def gen_toy_regression(n: int, seed: int = 0, gap: tuple = (2.0, 4.0),
                       domain: tuple = (0.0, 6.5), noise_sd: float = 0.1):
    """1D regression with a hole: y = sin(2x) + 0.2x + N(0, noise_sd^2).

    Inputs are uniform over the domain minus the gap, each side sampled
    in proportion to its length. Returns (x (N,1), y (N,1)).
    """
    rng = np.random.default_rng(seed)
    left = gap[0] - domain[0]
    right = domain[1] - gap[1]
    u = rng.uniform(0.0, left + right, size=n)
    x = np.where(u < left, domain[0] + u, gap[1] + (u - left))[:, None]
    y = np.sin(2.0 * x) + 0.2 * x + noise_sd * rng.normal(size=(n, 1))
    return x, y


def gen_banana(n: int, seed: int = 0, noise_sd: float = 0.2):
    """Two interleaved half-moons; returns (x (N,2), labels (N,) in {0,1})."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, np.pi, size=n)
    labels = rng.integers(0, 2, size=n)
    xx = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
    yy = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
    x = np.stack([xx, yy], axis=1) + noise_sd * rng.normal(size=(n, 2))
    return x, labels.astype(np.int64)


# ----------------------------------------------------------------- idx files

def _open_maybe_gzip(path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def load_idx(path) -> np.ndarray:
    """Read an IDX array. ubyte images scale to [0, 1]; labels stay ints."""
    with _open_maybe_gzip(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: shorter than an IDX header")
    zero, zero2, dtype, ndim = struct.unpack(">BBBB", raw[:4])
    if zero != 0 or zero2 != 0:
        raise BadMagic(f"{path}: not an IDX file (leading bytes nonzero)")
    if dtype != IDX_UBYTE:
        raise IOFormatError(f"{path}: unsupported IDX dtype 0x{dtype:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header ends early")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64)) if dims else 0
    body = raw[header:]
    if len(body) < count:
        raise TruncatedFile(
            f"{path}: payload holds {len(body)} bytes, dims need {count}")
    if len(body) > count:
        raise CountMismatch(
            f"{path}: payload holds {len(body)} bytes beyond dims {dims}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(dims)
    if ndim == 1:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (inverse of load_idx up to scaling)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with _open_maybe_gzip(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, IDX_UBYTE, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


_IDX_NAMES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def load_idx_dir(directory) -> dict:
    """Load a directory of IDX train/test archives (plain or .gz)."""
    out = {}
    for key, stems in _IDX_NAMES.items():
        path = None
        for stem in stems:
            for suffix in ("", ".gz"):
                cand = os.path.join(directory, stem + suffix)
                if os.path.exists(cand):
                    path = cand
                    break
            if path:
                break
        if path is None:
            raise IOFormatError(
                f"missing IDX archive for {key} under {directory}")
        out[key] = load_idx(path)
    for split in ("train", "test"):
        n_img = out[f"{split}_images"].shape[0]
        n_lab = out[f"{split}_labels"].shape[0]
        if n_img != n_lab:
            raise CountMismatch(
                f"{split}: {n_img} images but {n_lab} labels")
    return out


# ----------------------------------------------------------------- rotation

def rotate_images(images: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counterclockwise about the pixel-grid center, bilinear, zero fill.

    The convention matches np.rot90: rotate_images(x, 90) lands every
    pixel exactly on out[i, j] = in[j, W-1-i] for square images.
    """
    imgs = np.asarray(images, dtype=np.float64)
    squeeze = (imgs.ndim == 3)
    if squeeze:
        imgs = imgs[..., None]
    n, h, w, c = imgs.shape
    th = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # source = center + R(-theta) (target - center)
    sy = cy + np.cos(th) * (ii - cy) + np.sin(th) * (jj - cx)
    sx = cx - np.sin(th) * (ii - cy) + np.cos(th) * (jj - cx)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    wy = sy - y0
    wx = sx - x0
    out = np.zeros_like(imgs)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            weight = (wy if dy else 1.0 - wy) * (wx if dx else 1.0 - wx)
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            patch = imgs[:, yc, xc, :] * (weight * valid)[None, :, :, None]
            out += patch
    return out[..., 0] if squeeze else out
