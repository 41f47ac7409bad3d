"""
Classical exposure fusion: per-pixel quality weights blended through
Laplacian pyramids. Produces the ground-truth images, the ghost-fused priors
and the standalone `fuse` command output.
"""
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, PositiveFloat
from scipy import ndimage

from image_core import ContractViolation, Image, rgb_to_gray

# 5-tap binomial kernel; borders use whole-sample reflection ("mirror")
KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
BORDER = "mirror"
# quality measures within this many input-precision ulps of zero count as flat
FLAT_ULPS = 16


class FusionParams(BaseModel):
    """Exponents and constants of the quality measures"""

    w_contrast: float = Field(1.0, ge=0)
    w_saturation: float = Field(1.0, ge=0)
    w_exposedness: float = Field(1.0, ge=0)
    sigma: PositiveFloat = 0.2
    epsilon: PositiveFloat = 1e-12
    depth: Optional[int] = Field(None, ge=1)


@dataclass(frozen=True)
class GaussianPyramid:
    levels: List[Image]

    @property
    def depth(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class LaplacianPyramid:
    bands: List[Image]
    residual: Image

    @property
    def depth(self) -> int:
        return len(self.bands) + 1


def max_pyramid_depth(height: int, width: int) -> int:
    """Deepest pyramid whose coarsest level keeps min dimension >= 2"""
    shortest = min(height, width)
    depth = 1
    while math.ceil(shortest / 2**depth) >= 2:
        depth += 1
    return depth


def default_pyramid_depth(height: int, width: int) -> int:
    depth = int(math.floor(math.log2(min(height, width)))) - 1
    return max(1, min(depth, max_pyramid_depth(height, width)))


def _check_depth(height: int, width: int, depth: int) -> None:
    limit = max_pyramid_depth(height, width)
    if not 1 <= depth <= limit:
        raise ContractViolation(
            f"pyramid depth {depth} invalid for {width}x{height} (allowed 1..{limit})"
        )


def _blur(data: np.ndarray, kernel: np.ndarray = KERNEL) -> np.ndarray:
    data = ndimage.convolve1d(data, kernel, axis=0, mode=BORDER)
    return ndimage.convolve1d(data, kernel, axis=1, mode=BORDER)


def _reduce(data: np.ndarray) -> np.ndarray:
    return _blur(data)[::2, ::2]


def _expand(data: np.ndarray, shape) -> np.ndarray:
    """Zero-insert to `shape` (H, W) and blur with 4x the kernel"""
    height, width = shape[:2]
    if (math.ceil(height / 2), math.ceil(width / 2)) != data.shape[:2]:
        raise ContractViolation(
            f"cannot expand level {data.shape[:2]} to {(height, width)}"
        )
    up = np.zeros((height, width) + data.shape[2:], dtype=np.float64)
    up[::2, ::2] = data
    return _blur(up, 2.0 * KERNEL)


def gaussian_pyramid(img: Image, depth: int) -> GaussianPyramid:
    _check_depth(img.height, img.width, depth)
    level = img.data.astype(np.float64)
    levels = [Image(level)]
    for _ in range(depth - 1):
        level = _reduce(level)
        levels.append(Image(level))
    return GaussianPyramid(levels)


def laplacian_decompose(img: Image, depth: int) -> LaplacianPyramid:
    gauss = [level.data for level in gaussian_pyramid(img, depth).levels]
    bands = [
        Image(fine - _expand(coarse, fine.shape))
        for fine, coarse in zip(gauss[:-1], gauss[1:])
    ]
    return LaplacianPyramid(bands=bands, residual=Image(gauss[-1]))


def laplacian_collapse(pyr: LaplacianPyramid) -> Image:
    """Rebuild the image from coarse to fine; the result is not clamped"""
    current = pyr.residual.data.astype(np.float64)
    for band in reversed(pyr.bands):
        if band.channels != current.shape[2]:
            raise ContractViolation("band channel count does not match residual")
        current = _expand(current, band.data.shape) + band.data
    return Image(current)


# Quality measures, each an H x W float64 map

def contrast(img: Image) -> np.ndarray:
    """Absolute response of the 3x3 Laplacian on the gray image"""
    img = img.astype(np.float64)
    gray = rgb_to_gray(img) if img.channels == 3 else img
    return np.abs(ndimage.laplace(gray.data[:, :, 0], mode=BORDER))


def saturation(img: Image) -> np.ndarray:
    """Standard deviation across color channels (zero for gray images)"""
    return np.std(img.data.astype(np.float64), axis=2)


def well_exposedness(img: Image, sigma: float = 0.2) -> np.ndarray:
    """Product over channels of a Gaussian centered on 0.5"""
    data = img.data.astype(np.float64)
    return np.prod(np.exp(-((data - 0.5) ** 2) / (2.0 * sigma**2)), axis=2)


def _check_stack(stack: Sequence[Image]) -> None:
    if len(stack) < 2:
        raise ContractViolation(f"fusion needs at least 2 images, got {len(stack)}")
    shape = stack[0].data.shape
    for img in stack[1:]:
        if img.data.shape != shape:
            raise ContractViolation(
                f"stack images differ in shape: {img.data.shape} vs {shape}"
            )


def flat_tolerance(stack: Sequence[Image]) -> float:
    """Largest measure value still counted as zero for this stack"""
    return FLAT_ULPS * max(float(np.finfo(img.data.dtype).eps) for img in stack)


def quality_weights(stack: Sequence[Image], params: FusionParams) -> List[Image]:
    """Per-image weight maps, normalized to sum to one at every pixel.

    A measure that is zero for every image at a pixel cannot rank the images
    there and is treated as 1 at that pixel. Zero means below the rounding
    noise of the input precision, see `flat_tolerance`.
    """
    _check_stack(stack)
    tolerance = flat_tolerance(stack)
    weights = np.ones((len(stack),) + stack[0].data.shape[:2])
    measures = (
        (contrast, params.w_contrast),
        (saturation, params.w_saturation),
        (lambda img: well_exposedness(img, params.sigma), params.w_exposedness),
    )
    for measure, exponent in measures:
        values = np.stack([measure(img) for img in stack])
        flat = np.all(values <= tolerance, axis=0)
        values[:, flat] = 1.0
        weights *= values**exponent
    weights += params.epsilon
    weights /= weights.sum(axis=0)
    return [Image(w[:, :, None]) for w in weights]


def exposure_fuse(
    stack: Sequence[Image],
    params: Optional[FusionParams] = None,
    clamp: bool = True,
    timings: Optional[Dict[str, float]] = None,
) -> Image:
    """Blend the stack band by band with Gaussian pyramids of the weights.

    With clamp=False the raw float64 collapse is returned.
    """
    params = params or FusionParams()
    _check_stack(stack)
    height, width = stack[0].height, stack[0].width
    depth = params.depth or default_pyramid_depth(height, width)
    _check_depth(height, width, depth)

    started = time.perf_counter()
    weights = quality_weights(stack, params)
    weighted_at = time.perf_counter()

    fused_bands = None
    fused_residual = None
    for img, weight in zip(stack, weights):
        lap = laplacian_decompose(img, depth)
        gauss = gaussian_pyramid(weight, depth).levels
        bands = [g.data * b.data for g, b in zip(gauss[:-1], lap.bands)]
        residual = gauss[-1].data * lap.residual.data
        if fused_bands is None:
            fused_bands, fused_residual = bands, residual
        else:
            fused_bands = [acc + b for acc, b in zip(fused_bands, bands)]
            fused_residual = fused_residual + residual

    fused = laplacian_collapse(
        LaplacianPyramid([Image(b) for b in fused_bands], Image(fused_residual))
    )
    if timings is not None:
        timings["weights"] = weighted_at - started
        timings["blend"] = time.perf_counter() - weighted_at
    if not clamp:
        return fused
    return Image(np.clip(fused.data, 0.0, 1.0).astype(np.float32))


def ghost_fuse(
    reference: Image,
    non_reference: Sequence[Image],
    params: Optional[FusionParams] = None,
    clamp: bool = True,
) -> Image:
    """Exposure fusion of misaligned inputs, ghosts and all"""
    for img in non_reference:
        if img.dims != reference.dims:
            raise ContractViolation(
                f"non-reference {img.dims} does not match reference {reference.dims}"
            )
    return exposure_fuse([reference, *non_reference], params, clamp=clamp)
