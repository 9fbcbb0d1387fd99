"""Synthetic shape corpus, binary PGM/PPM I/O and image/mask manifests."""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import ShapeError, make_rng
from .grid import ConfigError

NOISE_SIGMA = 0.1
JITTER_DRAWS = 5


class FormatError(ValueError):
    """Malformed file contents; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TruncatedFileError(OSError):
    """The file ended before its declared payload."""


@dataclass
class Sample:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    mask: np.ndarray  # [H, W] class indices
    edge: np.ndarray  # [H, W]; {0, 1} from the mask, or consensus fractions in fractional mode


# -- edges -----------------------------------------------------------------------

def derive_edges(mask: np.ndarray) -> np.ndarray:
    """1 where a pixel's class differs from any of its 4-neighbours inside the image."""
    mask = np.asarray(mask)
    e = np.zeros(mask.shape, dtype=bool)
    vert = mask[1:, :] != mask[:-1, :]
    horiz = mask[:, 1:] != mask[:, :-1]
    e[1:, :] |= vert
    e[:-1, :] |= vert
    e[:, 1:] |= horiz
    e[:, :-1] |= horiz
    return e.astype(np.uint8)


# -- synthetic corpus --------------------------------------------------------------

def class_colors(k: int) -> np.ndarray:
    """``[k, 3]`` RGB: a dark grey background and evenly spaced saturated hues."""
    colors = [(0.15, 0.15, 0.15)]
    for c in range(1, k):
        colors.append(colorsys.hsv_to_rgb((c - 1) / max(k - 1, 1), 0.75, 0.9))
    return np.array(colors)


def _shape_params(rng, H: int, W: int) -> tuple:
    kind = int(rng.integers(0, 2))  # 0 ellipse, 1 rectangle
    cy, cx = rng.uniform(0.15 * H, 0.85 * H), rng.uniform(0.15 * W, 0.85 * W)
    ry, rx = rng.uniform(0.08 * H, 0.2 * H), rng.uniform(0.08 * W, 0.2 * W)
    return kind, cy, cx, ry, rx


def _raster(params, H: int, W: int) -> np.ndarray:
    kind, cy, cx, ry, rx = params
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    if kind == 0:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _paint(shapes, H: int, W: int) -> np.ndarray:
    mask = np.zeros((H, W), dtype=np.int64)
    for cls, params in shapes:
        mask[_raster(params, H, W)] = cls
    return mask


def generate_synthetic(n: int, H: int, W: int, K: int, seed: int, fractional: bool = False,
                       draws: int = JITTER_DRAWS) -> list[Sample]:
    """``n`` images with 1-3 ellipses/rectangles per foreground class.

    Each class has its own colour; images get a per-sample brightness
    factor and Gaussian texture noise. With ``fractional`` the edge target
    is the mean over ``draws`` boundary maps of slightly jittered shapes,
    so it takes values in ``{0, 1/draws, ..., 1}``.
    """
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got {K}")
    if H % 32 or W % 32:
        raise ConfigError(f"H and W must be divisible by 32, got {H}x{W}")
    rng = make_rng(seed)
    colors = class_colors(K)
    samples = []
    for _ in range(n):
        shapes = [(c, _shape_params(rng, H, W)) for c in range(1, K) for _ in range(int(rng.integers(1, 4)))]
        mask = _paint(shapes, H, W)
        brightness = rng.uniform(0.8, 1.2)
        image = colors[mask] * brightness + rng.normal(0.0, NOISE_SIGMA, size=(H, W, 3))
        image = np.clip(image, 0.0, 1.0)
        if fractional:
            acc = np.zeros((H, W))
            for _ in range(draws):
                jittered = [(c, (p[0], p[1] + rng.normal(0, 1), p[2] + rng.normal(0, 1),
                                 max(1.0, p[3] + rng.normal(0, 1)), max(1.0, p[4] + rng.normal(0, 1))))
                            for c, p in shapes]
                acc += derive_edges(_paint(jittered, H, W))
            edge = acc / draws
        else:
            edge = derive_edges(mask)
        samples.append(Sample(image, mask, edge))
    return samples


def split_samples(samples: list[Sample], val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    n_val = int(round(len(samples) * val_fraction))
    return samples[: len(samples) - n_val], samples[len(samples) - n_val:]


# -- PGM / PPM ------------------------------------------------------------------------

_WHITESPACE = b" \t\r\n"


def _parse_header(buf: bytes) -> tuple[str, int, int, int]:
    """Returns (magic, width, height, payload offset)."""
    if len(buf) < 2:
        raise TruncatedFileError("file too short for a PNM header")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}, expected P5 or P6", 0)
    pos = 2
    values = []
    while len(values) < 3:
        if pos >= len(buf):
            raise TruncatedFileError("file ended inside the header")
        ch = buf[pos:pos + 1]
        if buf[pos] in _WHITESPACE:
            pos += 1
        elif ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            values.append((int(buf[start:pos]), start))
            if pos < len(buf) and buf[pos] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
                raise FormatError("header fields must be separated by whitespace", pos)
        else:
            raise FormatError(f"unexpected byte {ch!r} in header", pos)
    (w, w_at), (h, h_at), (maxval, m_at) = values
    if w <= 0:
        raise FormatError(f"width must be positive, got {w}", w_at)
    if h <= 0:
        raise FormatError(f"height must be positive, got {h}", h_at)
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}", m_at)
    if pos >= len(buf):
        raise TruncatedFileError("file ended before the payload")
    if buf[pos] not in _WHITESPACE:
        raise FormatError("expected one whitespace byte after maxval", pos)
    return magic.decode(), w, h, pos + 1


def read_pnm(path) -> np.ndarray:
    """Raw 8-bit contents: ``[H, W]`` for P5, ``[H, W, 3]`` for P6."""
    buf = Path(path).read_bytes()
    magic, w, h, off = _parse_header(buf)
    ch = 1 if magic == "P5" else 3
    need = w * h * ch
    if len(buf) - off < need:
        raise TruncatedFileError(f"{path}: payload has {len(buf) - off} bytes, header declares {need}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).copy()
    return data.reshape(h, w) if ch == 1 else data.reshape(h, w, 3)


def read_image(path) -> np.ndarray:
    """``[H, W, C]`` float in ``[0, 1]`` (C = 1 for PGM, 3 for PPM)."""
    raw = read_pnm(path)
    if raw.ndim == 2:
        raw = raw[..., None]
    return raw.astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    """Class-index mask from a P5 file, values unscaled."""
    raw = read_pnm(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: masks must be P5 greyscale", 0)
    return raw.astype(np.int64)


def write_pnm(path, raw: np.ndarray) -> None:
    raw = np.asarray(raw)
    if raw.dtype != np.uint8:
        raise TypeError(f"write_pnm expects uint8 data, got {raw.dtype}")
    if raw.ndim == 3 and raw.shape[2] == 1:
        raw = raw[..., 0]
    if raw.ndim == 2:
        magic = b"P5"
    elif raw.ndim == 3 and raw.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"cannot write array of shape {raw.shape} as PGM/PPM")
    h, w = raw.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(raw).tobytes())


def write_image(path, image: np.ndarray) -> None:
    """Quantise ``[0, 1]`` floats to 8 bits; 3 channels give PPM, 1 gives PGM."""
    image = np.asarray(image, dtype=np.float64)
    write_pnm(path, np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8))


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask values must fit in 8 bits")
    write_pnm(path, mask.astype(np.uint8))


# -- manifests ------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    pairs: list[tuple[Path, Path]]
    split: str = ""
    seed: int | None = None
    meta: dict[str, str] = field(default_factory=dict)


def read_manifest(path) -> DatasetManifest:
    """Parse ``image_path,mask_path`` lines; paths are relative to the manifest's directory.

    Comment lines of the form ``# key: value`` are kept as metadata
    (``split`` and ``seed`` are recognised).
    """
    path = Path(path)
    root = path.parent
    pairs, meta = [], {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            key, sep, value = s[1:].partition(":")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        parts = [p.strip() for p in s.split(",")]
        if len(parts) != 2 or not all(parts):
            raise ValueError(f"{path}:{lineno}: expected 'image_path,mask_path', got {line!r}")
        pairs.append((root / parts[0], root / parts[1]))
    seed = int(meta["seed"]) if meta.get("seed", "").lstrip("-").isdigit() else None
    return DatasetManifest(root, pairs, meta.get("split", ""), seed, meta)


def load_manifest(path) -> list[Sample]:
    """Read every listed pair; edges are derived from the masks."""
    manifest = read_manifest(path)
    samples = []
    for img_path, mask_path in manifest.pairs:
        image = read_image(img_path)
        mask = read_mask(mask_path)
        if image.shape[:2] != mask.shape:
            raise ShapeError(f"{img_path} is {image.shape[:2]} but {mask_path} is {mask.shape}")
        if image.shape[2] == 1:
            image = np.repeat(image, 3, axis=2)
        samples.append(Sample(image, mask, derive_edges(mask)))
    return samples


def save_dataset(samples: list[Sample], out_dir, split: str, seed: int | None = None) -> Path:
    """Write images (PPM), masks (PGM) and ``<split>.txt`` manifest under ``out_dir``."""
    out = Path(out_dir)
    (out / split).mkdir(parents=True, exist_ok=True)
    lines = [f"# split: {split}"]
    if seed is not None:
        lines.append(f"# seed: {seed}")
    for i, s in enumerate(samples):
        img = os.path.join(split, f"{i:05d}_image.ppm")
        msk = os.path.join(split, f"{i:05d}_mask.pgm")
        write_image(out / img, s.image)
        write_mask(out / msk, s.mask)
        lines.append(f"{img},{msk}")
    manifest = out / f"{split}.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
