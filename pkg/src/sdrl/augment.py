"""View augmentation: paired geometric transforms for image+mask, photometric
transforms for the image only. No cropping, ever: outputs keep input dims.

Images are float32 HWC arrays in [0,1]; masks are {0,1} uint8 HW arrays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ShapeMismatch

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

JITTER_LO, JITTER_HI = 0.6, 1.4
SIGMA_LO, SIGMA_HI = 0.1, 2.0
BLUR_PROB = 0.5
JITTER_PROB = 0.8


def constants() -> dict:
    """Fixed sampling ranges, exposed so run snapshots can record them."""
    return {"jitter_range": [JITTER_LO, JITTER_HI], "sigma_range": [SIGMA_LO, SIGMA_HI],
            "blur_prob": BLUR_PROB, "jitter_prob": JITTER_PROB}


@dataclass
class AugmentationParams:
    hflip: bool
    vflip: bool
    brightness_factor: float
    contrast_factor: float
    saturation_factor: float
    blur_sigma: float
    apply_blur: bool
    apply_jitter: bool

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationParams":
        return cls(**d)


def identity_params() -> AugmentationParams:
    return AugmentationParams(False, False, 1.0, 1.0, 1.0, SIGMA_LO, False, False)


def sample_params(rng: np.random.Generator) -> AugmentationParams:
    return AugmentationParams(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        brightness_factor=float(rng.uniform(JITTER_LO, JITTER_HI)),
        contrast_factor=float(rng.uniform(JITTER_LO, JITTER_HI)),
        saturation_factor=float(rng.uniform(JITTER_LO, JITTER_HI)),
        blur_sigma=float(rng.uniform(SIGMA_LO, SIGMA_HI)),
        apply_blur=bool(rng.random() < BLUR_PROB),
        apply_jitter=bool(rng.random() < JITTER_PROB),
    )


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with reflect padding, per channel."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    padded = np.pad(image, ((r, r), (0, 0), (0, 0)), mode="reflect")
    rows = np.zeros_like(image)
    for i, w in enumerate(k):
        rows += w * padded[i : i + image.shape[0]]
    padded = np.pad(rows, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(image)
    for i, w in enumerate(k):
        out += w * padded[:, i : i + image.shape[1]]
    return out


def color_jitter(image: np.ndarray, params: AugmentationParams) -> np.ndarray:
    # fixed order: brightness, contrast, saturation
    out = image * np.float32(params.brightness_factor)
    gray_mean = np.float32((out @ LUMA).mean())
    out = gray_mean + (out - gray_mean) * np.float32(params.contrast_factor)
    gray = (out @ LUMA)[..., None]
    out = gray + (out - gray) * np.float32(params.saturation_factor)
    return out


def apply(image: np.ndarray, mask: np.ndarray, params: AugmentationParams) -> Tuple[np.ndarray, np.ndarray]:
    """Return (image', mask'): flips hit both, photometrics hit the image only."""
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask)
    if image.ndim != 3 or mask.shape != image.shape[:2]:
        raise ShapeMismatch(f"image {image.shape} and mask {mask.shape} are not aligned")
    if params.hflip:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    if params.vflip:
        image = image[::-1]
        mask = mask[::-1]
    image = np.ascontiguousarray(image)
    mask = np.ascontiguousarray(mask)
    if params.apply_jitter:
        image = color_jitter(image, params)
    if params.apply_blur:
        image = gaussian_blur(image, params.blur_sigma)
    return np.clip(image, 0.0, 1.0), mask.astype(np.uint8)


@dataclass
class ViewBundle:
    """Two views per temporal image: views[i][j] = (image, mask), i,j in {0,1}.

    The mask source for every view is the single t1-registered mask M,
    carried through each view's geometric transform.
    """

    images: List[List[np.ndarray]]
    masks: List[List[np.ndarray]]
    params: List[List[AugmentationParams]]

    def params_json(self) -> list:
        return [[p.to_dict() for p in row] for row in self.params]


def build_bundle(
    image_t1: np.ndarray,
    image_t2: np.ndarray,
    mask: np.ndarray,
    params: Sequence[Sequence[AugmentationParams]],
) -> ViewBundle:
    """Deterministic bundle from explicit params (replay path)."""
    sources = [image_t1, image_t2]
    images: List[List[np.ndarray]] = [[], []]
    masks: List[List[np.ndarray]] = [[], []]
    for i in range(2):
        for j in range(2):
            img, msk = apply(sources[i], mask, params[i][j])
            images[i].append(img)
            masks[i].append(msk)
    return ViewBundle(images=images, masks=masks, params=[list(row) for row in params])


def make_view_bundle(
    image_t1: np.ndarray,
    image_t2: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
) -> ViewBundle:
    params = [[sample_params(rng) for _ in range(2)] for _ in range(2)]
    return build_bundle(image_t1, image_t2, mask, params)
