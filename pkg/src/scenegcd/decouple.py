"""Saliency masks and object extraction with mean-pixel fill.

An image is split into object and scene by a binary foreground mask.
Masked-out scene pixels are replaced with the image's mean pixel value,
which keeps the object image in the same value range and avoids a hard
black border around the cutout.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image


class MaskSource(Enum):
    ORACLE = "oracle"
    FILE = "file"
    HEURISTIC = "heuristic"


@dataclass(frozen=True)
class SaliencyMask:
    """Binary foreground map: 1 marks object pixels, 0 marks scene pixels."""

    data: np.ndarray  # (H, W), values exactly 0 or 1
    source: MaskSource

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"mask must be 2-d (H, W), got shape {self.data.shape}")
        vals = np.unique(self.data)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"mask values must be exactly 0 or 1, found {vals[:8]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def foreground_fraction(self) -> float:
        return float(self.data.mean())


def mean_fill(image: np.ndarray, per_channel: bool = True) -> np.ndarray:
    """Mean pixel value of `image`, used as the fill for masked-out scene pixels.

    Returns a length-3 vector (one value per channel) by default, or a
    broadcastable scalar array when `per_channel` is False.
    """
    if image.size == 0:
        raise ValueError("cannot take the mean of an empty image")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    if per_channel:
        return image.mean(axis=(0, 1))
    return np.full(3, image.mean(), dtype=image.dtype)


def extract_object(image: np.ndarray, mask: SaliencyMask, fill: np.ndarray) -> np.ndarray:
    """Keep masked-in pixels of `image`, replace the rest with `fill`.

    `fill` is broadcast per channel, so both the per-channel and scalar
    modes of :func:`mean_fill` are accepted.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    if image.shape[:2] != mask.data.shape:
        raise ValueError(
            f"image {image.shape[:2]} and mask {mask.data.shape} dimensions differ"
        )
    fill = np.asarray(fill, dtype=image.dtype)
    m = mask.data.astype(image.dtype)[:, :, None]
    return image * m + fill * (1.0 - m)


def load_mask(path: str | Path, expected_shape: tuple[int, int]) -> SaliencyMask:
    """Read an 8-bit grayscale mask file; pixels >= 128 become foreground."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask file not found: {path}")
    try:
        with Image.open(path) as img:
            gray = np.asarray(img.convert("L"))
    except Exception as exc:  # Pillow raises several unrelated types
        raise ValueError(f"cannot read mask file {path}: {exc}") from exc
    if gray.shape != tuple(expected_shape):
        raise ValueError(
            f"mask {path} has shape {gray.shape}, expected {tuple(expected_shape)}"
        )
    data = (gray >= 128).astype(np.uint8)
    return SaliencyMask(data=data, source=MaskSource.FILE)


def heuristic_mask(
    image: np.ndarray, quantile: float = 0.8, ellipse_area: float = 0.5
) -> SaliencyMask:
    """Fallback saliency: contrast against the mean, gated by a center prior.

    Pixels whose color deviates from the image mean beyond the given
    quantile count as salient; the result is intersected with a centered
    ellipse covering `ellipse_area` of the frame. A constant image has no
    contrast signal, in which case the ellipse alone is returned.

    The quantile and area defaults are pragmatic choices, not tuned values.
    """
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    if not 0.0 < ellipse_area <= 0.78:  # pi/4 is the largest inscribed ellipse
        raise ValueError(f"ellipse_area must be in (0, 0.78], got {ellipse_area}")
    mu = mean_fill(image)
    dev = np.abs(image - mu).sum(axis=2)
    h, w = dev.shape
    yy, xx = np.mgrid[0:h, 0:w]
    half = np.sqrt(4.0 * ellipse_area / np.pi) / 2.0
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ellipse = ((yy - cy) / (h * half)) ** 2 + ((xx - cx) / (w * half)) ** 2 <= 1.0
    threshold = np.quantile(dev, quantile)
    contrast = dev > threshold
    data = ellipse if not contrast.any() else contrast & ellipse
    return SaliencyMask(data=data.astype(np.uint8), source=MaskSource.HEURISTIC)


def mask_path_for(image_path: str | Path, suffix: str = "_mask") -> Path:
    """Sibling mask file path for an image: `<stem><suffix>.png`."""
    p = Path(image_path)
    return p.with_name(p.stem + suffix + ".png")


def build_mask_provider(source, suffix: str = "_mask", quantile: float = 0.8,
                        ellipse_area: float = 0.5):
    """Return a callable mapping a sample to its saliency mask.

    `source` is a MaskSource or its string value. Oracle masks must be
    attached to the sample; file masks are resolved next to the sample's
    image file; heuristic masks are computed on the fly.
    """
    source = MaskSource(source)

    def provide(sample) -> SaliencyMask:
        if source is MaskSource.ORACLE:
            if sample.oracle_mask is None:
                raise ValueError(
                    f"sample {sample.id!r} has no oracle mask and no fallback is configured"
                )
            return sample.oracle_mask
        if source is MaskSource.FILE:
            if sample.source_path is None:
                raise ValueError(
                    f"sample {sample.id!r} has no source file, cannot resolve a mask file"
                )
            return load_mask(mask_path_for(sample.source_path, suffix), sample.image.shape[:2])
        return heuristic_mask(sample.image, quantile=quantile, ellipse_area=ellipse_area)

    return provide
