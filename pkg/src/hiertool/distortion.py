"""Image degradations: white noise, motion blur, downsampling and cutout.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. Every
random choice is drawn from an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

NOISE, BLUR, DOWNSAMPLE, CUTOUT = "noise", "blur", "downsample", "cutout"
TYPES = (NOISE, BLUR, DOWNSAMPLE, CUTOUT)
BOX_ANCHORS = ("center", "left", "right", "top", "bottom")


class DistortionError(ValueError):
    pass


@dataclass(frozen=True)
class DistortionRanges:
    sigma: tuple[float, float] = (0.1, 0.2)
    eta: tuple[int, int] = (5, 14)
    lambda_rate: tuple[float, float] = (0.4, 0.7)
    delta: tuple[float, float] = (0.02, 0.06)


@dataclass(frozen=True)
class DistortionSpec:
    types: tuple[str, ...]
    sigma: float | None = None
    eta: int | None = None
    blur_angle: float | None = None
    lambda_rate: float | None = None
    delta: float | None = None

    def __post_init__(self):
        if not self.types:
            raise DistortionError("at least one distortion type is required")
        unknown = set(self.types) - set(TYPES)
        if unknown:
            raise DistortionError(f"unknown distortion types {sorted(unknown)}")
        object.__setattr__(self, "types", tuple(t for t in TYPES if t in self.types))
        for kind, names in (
            (NOISE, ("sigma",)),
            (BLUR, ("eta", "blur_angle")),
            (DOWNSAMPLE, ("lambda_rate",)),
            (CUTOUT, ("delta",)),
        ):
            for name in names:
                present = getattr(self, name) is not None
                if present != (kind in self.types):
                    state = "missing" if kind in self.types else "set without its type"
                    raise DistortionError(f"{name} {state}")

    def to_json(self) -> dict:
        """Manifest form: ``{types, sigma, eta, lambda, delta, angle}``."""
        return {
            "types": list(self.types),
            "sigma": self.sigma,
            "eta": self.eta,
            "lambda": self.lambda_rate,
            "delta": self.delta,
            "angle": self.blur_angle,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DistortionSpec":
        return cls(
            types=tuple(d["types"]),
            sigma=d.get("sigma"),
            eta=d.get("eta"),
            blur_angle=d.get("angle"),
            lambda_rate=d.get("lambda"),
            delta=d.get("delta"),
        )


@dataclass(frozen=True)
class RegionAnnotation:
    """Object box ``(x, y, w, h)`` plus optional named part points ``(name, x, y)``."""

    bbox: tuple[float, float, float, float]
    parts: tuple[tuple[str, float, float], ...] = field(default_factory=tuple)

    def validate(self, height: int, width: int) -> None:
        x, y, w, h = self.bbox
        tol = 1e-6
        if w <= 0 or h <= 0 or x < -tol or y < -tol or x + w > width + tol or y + h > height + tol:
            raise DistortionError(f"bbox {self.bbox} outside {width}x{height} image")
        for name, px, py in self.parts:
            if not (x - tol <= px <= x + w + tol and y - tol <= py <= y + h + tol):
                raise DistortionError(f"part {name!r} lies outside the bbox")

    @classmethod
    def full_image(cls, height: int, width: int) -> "RegionAnnotation":
        return cls((0, 0, width, height))

    def scaled(self, sy: float, sx: float) -> "RegionAnnotation":
        x, y, w, h = self.bbox
        return RegionAnnotation(
            (x * sx, y * sy, w * sx, h * sy),
            tuple((n, px * sx, py * sy) for n, px, py in self.parts),
        )


# -- primitives --------------------------------------------------------------


def white_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma <= 0:
        raise DistortionError(f"sigma must be positive, got {sigma}")
    noisy = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(noisy, 0.0, 1.0)


def motion_kernel(eta: int, angle: float) -> np.ndarray:
    """eta x eta kernel holding a 1-D Gaussian (std eta/3) laid along ``angle``.

    Samples are bilinearly splatted onto the grid, so weights stay
    non-negative; the result is normalized to sum to 1.
    """
    k = np.zeros((eta, eta))
    c = (eta - 1) / 2.0
    t = np.arange(eta) - c
    g = np.exp(-0.5 * (t / (eta / 3.0)) ** 2)
    theta = math.radians(angle)
    xs = c + t * math.cos(theta)
    ys = c - t * math.sin(theta)
    for w, x, y in zip(g, xs, ys):
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if wy * wx > 0 and 0 <= yy < eta and 0 <= xx < eta:
                    k[yy, xx] += w * wy * wx
    return k / k.sum()


def motion_blur(
    img: np.ndarray,
    eta: int,
    angle: float,
    rng: np.random.Generator | None = None,
    ranges: DistortionRanges = DistortionRanges(),
) -> np.ndarray:
    lo, hi = ranges.eta
    if int(eta) != eta or not lo <= eta <= hi:
        raise DistortionError(f"eta must be an integer in [{lo}, {hi}], got {eta}")
    if not 0 <= angle < 180:
        raise DistortionError(f"blur angle must be in [0, 180), got {angle}")
    kernel = motion_kernel(int(eta), angle)
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.convolve(img[..., ch], kernel, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling with edge clamping."""
    in_h, in_w = img.shape[:2]
    if out_h < 1 or out_w < 1:
        raise DistortionError(f"output size {out_h}x{out_w} is empty")

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(out_h, in_h)
    x0, x1, fx = coords(out_w, in_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def downsample(
    img: np.ndarray, lambda_rate: float, ranges: DistortionRanges = DistortionRanges()
) -> np.ndarray:
    lo, hi = ranges.lambda_rate
    if not lo <= lambda_rate <= hi:
        raise DistortionError(f"lambda_rate must be in [{lo}, {hi}], got {lambda_rate}")
    return _downsample(img, lambda_rate)


def _downsample(img: np.ndarray, lambda_rate: float) -> np.ndarray:
    h, w = img.shape[:2]
    scale = math.sqrt(lambda_rate)
    out_h, out_w = round(h * scale), round(w * scale)
    if out_h < 1 or out_w < 1:
        raise DistortionError(f"downsampling {h}x{w} by {lambda_rate} leaves no pixels")
    return np.clip(resize_bilinear(img, out_h, out_w), 0.0, 1.0)


def _box_anchor(bbox, which: str) -> tuple[float, float]:
    x, y, w, h = bbox
    cx, cy = x + w / 2, y + h / 2
    return {
        "center": (cx, cy),
        "left": (x + w / 4, cy),
        "right": (x + 3 * w / 4, cy),
        "top": (cx, y + h / 4),
        "bottom": (cx, y + 3 * h / 4),
    }[which]


def cutout_rects(
    shape: Sequence[int],
    region: RegionAnnotation,
    delta: float,
    count: int,
    rng: np.random.Generator,
) -> list[tuple[int, int, int, int]]:
    """Mask rectangles ``(y0, y1, x0, x1)`` (half-open, clipped to the image)."""
    height, width = shape[:2]
    if delta <= 0:
        raise DistortionError(f"delta must be positive, got {delta}")
    if count < 1:
        raise DistortionError("count must be >= 1")
    region.validate(height, width)
    _, _, bw, bh = region.bbox
    if delta * bw * bh < 1:
        raise DistortionError("mask area delta * bbox_area is below one pixel")

    if region.parts:
        idx = rng.choice(len(region.parts), size=count, replace=count > len(region.parts))
        anchors = [region.parts[i][1:] for i in idx]
    else:
        idx = rng.choice(len(BOX_ANCHORS), size=count, replace=count > len(BOX_ANCHORS))
        anchors = [_box_anchor(region.bbox, BOX_ANCHORS[i]) for i in idx]

    # same aspect ratio as the box, area delta * box area
    mw = max(1, round(bw * math.sqrt(delta)))
    mh = max(1, round(bh * math.sqrt(delta)))
    rects = []
    for ax, ay in anchors:
        x0 = int(math.floor(ax - mw / 2 + 0.5))
        y0 = int(math.floor(ay - mh / 2 + 0.5))
        rects.append(
            (max(0, y0), min(height, y0 + mh), max(0, x0), min(width, x0 + mw))
        )
    return rects


def cutout(
    img: np.ndarray,
    region: RegionAnnotation,
    delta: float,
    count: int | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Zero ``count`` rectangles anchored at random parts (or box landmarks).

    ``count`` defaults to 3 when part points exist, 4 otherwise.
    """
    if count is None:
        count = 3 if region.parts else 4
    out = img.copy()
    for y0, y1, x0, x1 in cutout_rects(img.shape, region, delta, count, rng):
        out[y0:y1, x0:x1] = 0.0
    return out


# -- composition ---------------------------------------------------------------


def apply(
    img: np.ndarray,
    spec: DistortionSpec,
    region: RegionAnnotation | None,
    rng: np.random.Generator,
    ranges: DistortionRanges = DistortionRanges(),
    cutout_count: int | None = None,
) -> np.ndarray:
    """Run the selected distortions in the order noise, blur, downsample, cutout."""
    out = np.asarray(img, dtype=np.float64)
    if region is None:
        region = RegionAnnotation.full_image(*out.shape[:2])
    if NOISE in spec.types:
        out = white_noise(out, spec.sigma, rng)
    if BLUR in spec.types:
        out = motion_blur(out, spec.eta, spec.blur_angle, ranges=ranges)
    if DOWNSAMPLE in spec.types:
        h0, w0 = out.shape[:2]
        out = downsample(out, spec.lambda_rate, ranges=ranges)
        region = region.scaled(out.shape[0] / h0, out.shape[1] / w0)
    if CUTOUT in spec.types:
        out = cutout(out, region, spec.delta, cutout_count, rng)
    return out


ALL_SUBSETS = tuple(
    c for r in range(1, len(TYPES) + 1) for c in combinations(TYPES, r)
)


def sample_spec(
    rng: np.random.Generator, ranges: DistortionRanges = DistortionRanges()
) -> DistortionSpec:
    """Uniform non-empty subset of the four types, uniform parameters."""
    types = ALL_SUBSETS[rng.integers(len(ALL_SUBSETS))]
    kw = {}
    if NOISE in types:
        kw["sigma"] = float(rng.uniform(*ranges.sigma))
    if BLUR in types:
        kw["eta"] = int(rng.integers(ranges.eta[0], ranges.eta[1] + 1))
        kw["blur_angle"] = float(rng.uniform(0.0, 180.0))
    if DOWNSAMPLE in types:
        kw["lambda_rate"] = float(rng.uniform(*ranges.lambda_rate))
    if CUTOUT in types:
        lo, hi = ranges.delta
        kw["delta"] = float(lo if lo == hi else rng.uniform(lo, hi))
    return DistortionSpec(types=types, **kw)


def ranges_to_json(ranges: DistortionRanges) -> dict:
    return {k: list(v) for k, v in asdict(ranges).items()}


# -- PNG I/O -------------------------------------------------------------------


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(img)).save(path, format="PNG")
