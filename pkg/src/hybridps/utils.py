"""Shared helpers: deterministic RNG derivation, image I/O, box arithmetic, atomic files."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------

def _key_words(keys):
    words = []
    for k in keys:
        if isinstance(k, (bool, int, np.integer)):
            v = int(k)
            words.append(v & 0xFFFFFFFF)
            words.append((v >> 32) & 0xFFFFFFFF)
        else:
            digest = hashlib.blake2s(str(k).encode("utf-8")).digest()
            words.append(int.from_bytes(digest[:4], "little"))
            words.append(int.from_bytes(digest[4:8], "little"))
    return words


def rng_for(*keys) -> np.random.Generator:
    """A numpy Generator derived purely from the given keys.

    Identical keys give identical streams on every call, which is what makes
    per-(seed, step, slot) sampling reproducible and resumable without any
    hidden RNG state.
    """
    return np.random.default_rng(np.random.SeedSequence(_key_words(keys)))


def torch_gen_for(*keys) -> torch.Generator:
    """A torch CPU generator seeded from the same key space as rng_for."""
    g = torch.Generator(device="cpu")
    g.manual_seed(int(rng_for(*keys, "torch").integers(0, 2**62)))
    return g


# ---------------------------------------------------------------------------
# Images (numpy float32 HxWx3 in [0, 1] at rest)
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(img: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path, format="PNG")


def image_size(path) -> tuple[int, int]:
    """(width, height) from the file header without decoding pixels."""
    with Image.open(path) as im:
        return im.size


def resize_image(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (antialiased when shrinking); float32 HWC in, same out."""
    h, w = img.shape[:2]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return img.copy()
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    if t.ndim == 2:
        t = t[None, None]
        squeeze = True
    else:
        t = t.permute(2, 0, 1)[None]
        squeeze = False
    anti = oh < h or ow < w
    out = F.interpolate(t, size=(oh, ow), mode="bilinear", align_corners=False, antialias=anti)
    if squeeze:
        return out[0, 0].numpy()
    return out[0].permute(1, 2, 0).contiguous().numpy()


def mean_color(img: np.ndarray) -> np.ndarray:
    return img.reshape(-1, img.shape[-1]).mean(axis=0)


# ---------------------------------------------------------------------------
# Boxes (float (N, 4) arrays, (x0, y0, x1, y1), x1 > x0, y1 > y0)
# ---------------------------------------------------------------------------

def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return arr


def box_area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.maximum(b[:, 2] - b[:, 0], 0) * np.maximum(b[:, 3] - b[:, 1], 0)


def clip_boxes(boxes, width, height) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sets, (len(a), len(b))."""
    a = as_boxes(a)
    b = as_boxes(b)
    x0 = np.maximum(a[:, None, 0], b[None, :, 0])
    y0 = np.maximum(a[:, None, 1], b[None, :, 1])
    x1 = np.minimum(a[:, None, 2], b[None, :, 2])
    y1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(x1 - x0, 0) * np.maximum(y1 - y0, 0)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def box_iou_single(a, b) -> float:
    return float(iou_matrix([a], [b])[0, 0])


# ---------------------------------------------------------------------------
# Canonical JSON, hashing, atomic writes
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_of(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def append_jsonl(path, obj) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(canonical_json(obj) + "\n")


def read_jsonl(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
