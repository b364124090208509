"""Grasp datasets, difference images, pair augmentation and a synthetic generator.

Images are channel-first float32 arrays. Raw frames live in ``[0, 1]``; the
difference image ``after - before`` is clamped to ``[-1, 1]`` and every
augmentation below operates on that signed representation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError, FormatError

MANIFEST_HEADER = ["id", "path_before", "path_after", "label", "sensor"]
SENSORS = ("left", "right")

# ITU-R 601 luma, the usual weights for grayscale conversion
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class GraspSample:
    id: str
    image_before: np.ndarray  # frame before contact, 3xHxW in [0, 1]
    image_after: np.ndarray  # frame with the object grasped
    label: int  # 1 = grasp succeeded
    sensor: str = "left"

    def __post_init__(self):
        if self.image_before.shape != self.image_after.shape:
            raise FormatError(
                f"sample {self.id}: before {self.image_before.shape} vs after {self.image_after.shape}"
            )
        if self.image_before.ndim != 3 or self.image_before.shape[0] != 3:
            raise FormatError(f"sample {self.id}: expected 3xHxW images, got {self.image_before.shape}")
        if self.label not in (0, 1):
            raise FormatError(f"sample {self.id}: label {self.label!r} not in {{0, 1}}")
        if self.sensor not in SENSORS:
            raise FormatError(f"sample {self.id}: sensor {self.sensor!r} not in {SENSORS}")
        for img in (self.image_before, self.image_after):
            if img.min() < 0 or img.max() > 1:
                raise FormatError(f"sample {self.id}: pixel values outside [0, 1]")


@dataclass
class DiffImage:
    data: np.ndarray  # 3xHxW, signed, in [-1, 1]
    source_id: str


@dataclass
class AugmentedPair:
    view_a: np.ndarray
    view_b: np.ndarray
    source_id: str
    seed_trace: str


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation knobs. ``paper()`` gives the 256/224 geometry."""

    resize_to: int = 64
    crop_to: int = 56
    jitter_strength: float = 1.0
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.crop_to < 1 or self.resize_to < 1:
            raise ConfigError(f"resize_to={self.resize_to}, crop_to={self.crop_to} must be positive")
        if self.crop_to > self.resize_to:
            raise ConfigError(f"crop_to={self.crop_to} exceeds resize_to={self.resize_to}")
        if self.jitter_strength < 0:
            raise ConfigError(f"jitter_strength={self.jitter_strength} is negative")
        for name in ("grayscale_prob", "blur_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} outside [0, 1]")

    @classmethod
    def paper(cls) -> AugmentConfig:
        return cls(resize_to=256, crop_to=224)


# loading ----------------------------------------------------------------------


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"image file not found: {path}")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(np.float32)) / np.float32(255.0)


def _write_png(path: Path, img: np.ndarray) -> None:
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_dataset(manifest_path) -> list[GraspSample]:
    """Read a manifest CSV; image paths are relative to the manifest's folder."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    samples = []
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"{manifest_path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise FormatError(f"{manifest_path}:{lineno}: expected 5 fields, got {len(row)}")
            sid, pb, pa, label, sensor = row
            try:
                label_i = int(label)
            except ValueError:
                raise FormatError(f"{manifest_path}:{lineno} (id {sid}): label {label!r} is not an integer") from None
            if label_i not in (0, 1):
                raise FormatError(f"{manifest_path}:{lineno} (id {sid}): label {label_i} not in {{0, 1}}")
            try:
                samples.append(GraspSample(sid, _read_png(root / pb), _read_png(root / pa), label_i, sensor))
            except FormatError as exc:
                raise FormatError(f"{manifest_path}:{lineno}: {exc}") from None
    return samples


def make_diff(sample: GraspSample) -> DiffImage:
    data = np.clip(sample.image_after - sample.image_before, -1.0, 1.0).astype(np.float32)
    return DiffImage(data, sample.id)


# augmentation -----------------------------------------------------------------


def sample_stream(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Independent RNG stream for one sample in one epoch."""
    words = np.frombuffer(hashlib.blake2b(sample_id.encode(), digest_size=16).digest(), dtype="<u4")
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, *words.tolist()]))


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a CxHxW image to ``size x size``.

    Uses half-pixel centres (``align_corners=False``): output pixel ``i`` samples
    source coordinate ``(i + 0.5) * in / out - 0.5``, clamped to the border.
    Same-size resize returns an exact copy.
    """
    C, H, W = img.shape
    if H == size and W == size:
        return img.copy()

    def axis(n_in):
        src = (np.arange(size, dtype=np.float64) + 0.5) * (n_in / size) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, wy = axis(H)
    x0, x1, wx = axis(W)
    rows = img[:, y0, :] * (1 - wy)[None, :, None] + img[:, y1, :] * wy[None, :, None]
    out = rows[:, :, x0] * (1 - wx)[None, None, :] + rows[:, :, x1] * wx[None, None, :]
    return out.astype(np.float32)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    _, H, W = img.shape
    top, left = (H - size) // 2, (W - size) // 2
    return img[:, top : top + size, left : left + size].copy()


def preprocess_eval(diff: DiffImage, cfg: AugmentConfig) -> np.ndarray:
    """Deterministic resize + centre crop used for feature extraction."""
    return center_crop(resize_bilinear(diff.data, cfg.resize_to), cfg.crop_to)


def _rgb_to_hsv(x: np.ndarray) -> np.ndarray:
    r, g, b = x
    maxc = x.max(axis=0)
    minc = x.min(axis=0)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0)
    return np.stack([h, s, maxc])


def _hsv_to_rgb(x: np.ndarray) -> np.ndarray:
    h, s, v = x
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.intp) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _jitter(x01: np.ndarray, bright: float, contrast: float, sat: float, hue: float) -> np.ndarray:
    # fixed order: brightness, contrast, saturation, hue
    x = np.clip(x01 * bright, 0, 1)
    m = np.tensordot(_LUMA, x, axes=1).mean()
    x = np.clip((x - m) * contrast + m, 0, 1)
    gray = np.tensordot(_LUMA, x, axes=1)[None]
    x = np.clip(gray + (x - gray) * sat, 0, 1)
    if hue != 0.0:
        hsv = _rgb_to_hsv(x)
        hsv[0] = (hsv[0] + hue) % 1.0
        x = _hsv_to_rgb(hsv)
    return x.astype(np.float32)


def _augment_view(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    # every draw happens unconditionally so the stream layout never depends on outcomes
    R, c = cfg.resize_to, cfg.crop_to
    top, left = rng.integers(0, R - c + 1, size=2)
    s = cfg.jitter_strength
    bright, contrast, sat = rng.uniform(1 - 0.4 * s, 1 + 0.4 * s, size=3)
    hue = rng.uniform(-0.1 * s, 0.1 * s)
    u_flip, u_gray, u_blur = rng.random(3)
    sigma = rng.uniform(0.1, 2.0)

    x = img[:, top : top + c, left : left + c]
    if s > 0:
        x = _jitter((x + 1) * 0.5, bright, contrast, sat, hue) * 2 - 1
    if u_flip < cfg.flip_prob:
        x = x[:, :, ::-1]
    if u_gray < cfg.grayscale_prob:
        x = np.broadcast_to(np.tensordot(_LUMA, x, axes=1)[None], x.shape)
    if u_blur < cfg.blur_prob:
        x = gaussian_filter(x, sigma=(0, sigma, sigma), mode="reflect", truncate=4.0)
    return np.ascontiguousarray(x, dtype=np.float32)


def augment_pair(diff: DiffImage, cfg: AugmentConfig, stream: np.random.Generator, seed_trace: str = "") -> AugmentedPair:
    """Two independent views of one difference image.

    Pipeline: resize -> random crop -> colour jitter -> horizontal flip ->
    grayscale -> gaussian blur. Jitter runs on ``(x + 1) / 2`` and maps back.
    """
    resized = resize_bilinear(diff.data, cfg.resize_to)
    a = _augment_view(resized, cfg, stream)
    b = _augment_view(resized, cfg, stream)
    return AugmentedPair(a, b, diff.source_id, seed_trace)


# synthetic data ---------------------------------------------------------------

_CALIBRATION_SEED = 20240101
_CALIBRATION_DRAWS = 200_000


def _draw_blob_params(rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
    # radii are fractions of the image side; amplitude is the peak intensity
    # contact size carries the label; position and eccentricity are kept mild nuisances
    r = rng.uniform(0.07, 0.22, n)
    aspect = np.exp(rng.uniform(math.log(0.8), math.log(1.25), n))
    return {
        "cx": rng.uniform(0.4, 0.6, n),
        "cy": rng.uniform(0.4, 0.6, n),
        "rx": r * np.sqrt(aspect),
        "ry": r / np.sqrt(aspect),
        "angle": rng.uniform(0.0, math.pi, n),
        "amp": rng.uniform(0.25, 0.45, n),
        "tint": rng.uniform(0.8, 1.2, (n, 3)),
    }


def _contact_score(p: dict[str, np.ndarray], amplitude_scale: float) -> np.ndarray:
    """Integrated blob intensity times contact-ellipse area (image side = 1).

    The blob profile is ``amp * exp(-2 r^2)`` in elliptical radius ``r``, whose
    plane integral is ``amp * pi/2 * rx * ry``; the contact area is ``pi rx ry``.
    """
    area = math.pi * p["rx"] * p["ry"]
    integrated = amplitude_scale * p["amp"] * p["tint"].mean(axis=1) * 0.5 * area
    return integrated * area


def _score_threshold() -> float:
    rng = np.random.default_rng(_CALIBRATION_SEED)
    return float(np.median(_contact_score(_draw_blob_params(rng, _CALIBRATION_DRAWS), 1.0)))


def _smooth_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, size / 10, size / 10), mode="wrap")
    return field / field.std(axis=(1, 2), keepdims=True)


def _blob(size: int, cx, cy, rx, ry, angle) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(coords - cx, coords - cy)  # u along x (columns)
    ca, sa = math.cos(angle), math.sin(angle)
    a = (ca * u + sa * v) / rx
    b = (-sa * u + ca * v) / ry
    return np.exp(-2.0 * (a * a + b * b))


def generate_synthetic(
    n: int,
    image_size: int,
    seed: int,
    out_dir,
    *,
    amplitude_scale: float = 1.0,
    label_noise: float = 0.05,
    id_prefix: str = "g",
) -> Path:
    """Write ``n`` synthetic before/after grasp frames plus ``manifest.csv``.

    "before" is a gel-coloured background with low-amplitude smooth noise;
    "after" adds an elliptical Gaussian contact blob. A grasp counts as a
    success when the contact score (see ``_contact_score``) exceeds the median
    of the score distribution, then ``label_noise`` of the labels are flipped.
    Also writes ``gen_log.json`` with the seed, threshold and label counts.
    """
    if n < 2:
        raise ContractError(f"n={n}: need at least 2 samples")
    if image_size < 32:
        raise ContractError(f"image_size={image_size}: need at least 32")
    if not 0.0 <= label_noise <= 1.0:
        raise ConfigError(f"label_noise={label_noise} outside [0, 1]")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7AC7]))
    params = _draw_blob_params(rng, n)
    threshold = _score_threshold()
    clean = (_contact_score(params, amplitude_scale) > threshold).astype(int)
    flips = rng.random(n) < label_noise
    labels = np.where(flips, 1 - clean, clean)
    base = np.array([0.35, 0.40, 0.45])[:, None, None]

    rows = []
    for i in range(n):
        sid = f"{id_prefix}{seed}_{i:05d}"
        before = np.clip(base + 0.03 * _smooth_noise(rng, image_size), 0, 1)
        blob = _blob(image_size, params["cx"][i], params["cy"][i], params["rx"][i], params["ry"][i], params["angle"][i])
        contact = (amplitude_scale * params["amp"][i] * params["tint"][i])[:, None, None] * blob[None]
        after = np.clip(before + contact, 0, 1)
        pb, pa = f"images/{sid}_before.png", f"images/{sid}_after.png"
        _write_png(out_dir / pb, before)
        _write_png(out_dir / pa, after)
        rows.append([sid, pb, pa, str(int(labels[i])), "left"])

    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    log = {
        "seed": seed,
        "n": n,
        "image_size": image_size,
        "threshold": threshold,
        "amplitude_scale": amplitude_scale,
        "label_noise": label_noise,
        "label_counts": {"0": int((labels == 0).sum()), "1": int((labels == 1).sum())},
        "clean_label_counts": {"0": int((clean == 0).sum()), "1": int((clean == 1).sum())},
        "flipped": int(flips.sum()),
    }
    (out_dir / "gen_log.json").write_text(json.dumps(log, indent=2, sort_keys=True) + "\n")
    return manifest
