"""
Image representation, raster file I/O and the geometric transforms every
other module builds on.

Intensities live in [0, 1] as 32-bit floats, H x W x C, row-major, top-left
origin; loaded rasters are 64-bit. PNG goes through pypng (8/16-bit); binary
PGM/PPM is read and written here directly.
"""
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Literal, Tuple, Union

import numpy as np
import png
from pydantic import BaseModel, ConfigDict, PositiveFloat


class ContractViolation(ValueError):
    """A caller broke an operation's precondition"""


class NonFiniteError(ContractViolation):
    """NaN or Inf found where only finite values are allowed"""


class ImageFormatError(ValueError):
    """Raster file is corrupt or uses an unsupported encoding"""


class View(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    FREE = "free"


class Role(str, Enum):
    UNDER = "under"
    MID = "mid"
    OVER = "over"


class ExposureTag(BaseModel):
    """Relative exposure of a shot plus where it was taken from"""

    model_config = ConfigDict(frozen=True)

    exposure_value: PositiveFloat
    view: View
    role_hint: Role


FlipAxis = Literal["vertical", "horizontal", "diagonal"]
PathLike = Union[str, Path]

_PNM_SUFFIXES = {".ppm", ".pgm", ".pnm"}


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x C raster; channels is 1 or 3.

    float32 is the storage precision. float64 data is accepted for loaded
    rasters and intermediate results (pyramid bands, weights).
    """

    data: np.ndarray

    def __post_init__(self):
        data = self.data
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ContractViolation(
                f"image must be H x W x 1|3, got shape {data.shape}"
            )
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ContractViolation(f"image must be non-empty, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            raise ContractViolation(
                f"image data must be float32/float64, got {data.dtype}"
            )
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("image contains non-finite values")

    @classmethod
    def from_array(cls, array: np.ndarray, dtype=np.float32) -> "Image":
        """Wrap an H x W or H x W x C array, casting to `dtype`"""
        array = np.asarray(array)
        if array.ndim == 2:
            array = array[:, :, None]
        return cls(np.ascontiguousarray(array, dtype=dtype))

    @classmethod
    def constant(
        cls, width: int, height: int, value: float, channels: int = 3
    ) -> "Image":
        return cls.from_array(np.full((height, width, channels), value))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def dims(self) -> Tuple[int, int]:
        """(width, height)"""
        return self.width, self.height

    def astype(self, dtype) -> "Image":
        return Image(self.data.astype(dtype))

    def clamped(self) -> "Image":
        return Image(np.clip(self.data, 0.0, 1.0).astype(self.data.dtype))


# Raster I/O

def load_image(path: PathLike) -> Image:
    """Load a PNG (8/16-bit) or binary PGM/PPM, scaled linearly to [0, 1]"""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return _load_png(path)
    if suffix in _PNM_SUFFIXES:
        return _load_pnm(path)
    raise ImageFormatError(f"unsupported image format: {path.name}")


def save_image(img: Image, path: PathLike, bitdepth: int = 8) -> None:
    """Write `img` as PNG or PGM/PPM, quantized to `bitdepth` bits"""
    if bitdepth not in (8, 16):
        raise ContractViolation(f"bitdepth must be 8 or 16, got {bitdepth}")
    path = Path(path)
    suffix = path.suffix.lower()
    maxval = (1 << bitdepth) - 1
    quantized = np.rint(np.clip(img.data, 0.0, 1.0) * maxval).astype(np.uint32)
    if suffix == ".png":
        _save_png(quantized, path, bitdepth)
    elif suffix in _PNM_SUFFIXES:
        _save_pnm(quantized, path, maxval, suffix)
    else:
        raise ImageFormatError(f"unsupported image format: {path.name}")


def _load_png(path: Path) -> Image:
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        pixels = np.array([np.asarray(row, dtype=np.float64) for row in rows])
    except png.Error as e:
        raise ImageFormatError(f"{path}: {e}") from e

    bitdepth = info["bitdepth"]
    if bitdepth not in (8, 16):
        raise ImageFormatError(f"{path}: unsupported bit depth {bitdepth}")

    planes = info["planes"]
    pixels = pixels.reshape(height, width, planes)
    if info.get("alpha"):
        pixels = pixels[:, :, : planes - 1]
    return Image.from_array(pixels / ((1 << bitdepth) - 1), dtype=np.float64)


def _save_png(quantized: np.ndarray, path: Path, bitdepth: int) -> None:
    height, width, channels = quantized.shape
    writer = png.Writer(
        width=width, height=height, greyscale=(channels == 1), bitdepth=bitdepth
    )
    with open(path, "wb") as f:
        writer.write(f, quantized.reshape(height, width * channels).tolist())


def _pnm_header(raw: bytes, path: Path) -> Tuple[list, int]:
    """Return the four header tokens and the offset of the pixel data"""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise ImageFormatError(f"{path}: truncated PNM header")
        if raw[pos : pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates header and raster
    return tokens, pos + 1


def _load_pnm(path: Path) -> Image:
    raw = path.read_bytes()
    tokens, offset = _pnm_header(raw, path)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(
            f"{path}: only binary P5/P6 are supported, got {magic!r}"
        )
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ImageFormatError(f"{path}: malformed PNM header") from e
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval}")

    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    count = width * height * channels
    if len(raw) - offset < count * dtype.itemsize:
        raise ImageFormatError(f"{path}: truncated PNM raster")
    pixels = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    pixels = pixels.reshape(height, width, channels)
    return Image.from_array(pixels / maxval, dtype=np.float64)


def _save_pnm(quantized: np.ndarray, path: Path, maxval: int, suffix: str) -> None:
    height, width, channels = quantized.shape
    if suffix == ".pgm" and channels != 1:
        raise ContractViolation("PGM requires a single-channel image")
    if suffix == ".ppm" and channels != 3:
        raise ContractViolation("PPM requires a three-channel image")
    magic = "P5" if channels == 1 else "P6"
    dtype = np.uint8 if maxval < 256 else ">u2"
    header = f"{magic}\n{width} {height}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + quantized.astype(dtype).tobytes())


# Geometry and color

def flip(img: Image, axis: FlipAxis) -> Image:
    """Mirror about the vertical/horizontal axis, or transpose (diagonal)"""
    if axis == "vertical":
        data = img.data[::-1, :, :]
    elif axis == "horizontal":
        data = img.data[:, ::-1, :]
    elif axis == "diagonal":
        data = img.data.transpose(1, 0, 2)
    else:
        raise ContractViolation(f"unknown flip axis: {axis}")
    return Image(np.ascontiguousarray(data))


def bilinear_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """n_out x n_in interpolation matrix, half-pixel centers, edge clamped.

    Rows sum to one; the matrix is the identity when n_out == n_in.
    """
    if n_out < 1 or n_in < 1:
        raise ContractViolation(f"sizes must be >= 1, got {n_out} <- {n_in}")
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix.astype(dtype)


def resize(img: Image, w: int, h: int) -> Image:
    """Bilinear resize to w x h"""
    if w < 1 or h < 1:
        raise ContractViolation(f"target size must be >= 1x1, got {w}x{h}")
    if (w, h) == img.dims:
        return img
    dtype = img.data.dtype
    rows = bilinear_matrix(h, img.height, dtype)
    cols = bilinear_matrix(w, img.width, dtype)
    data = np.einsum("oh,hwc->owc", rows, img.data)
    data = np.einsum("pw,owc->opc", cols, data)
    return Image(np.clip(data, 0.0, 1.0).astype(dtype))


LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def rgb_to_gray(img: Image) -> Image:
    """Rec. 601 luma"""
    if img.channels != 3:
        raise ContractViolation(f"rgb_to_gray needs 3 channels, got {img.channels}")
    # elementwise: the same value per pixel for any memory layout
    data = img.data
    r, g, b = LUMA_WEIGHTS.astype(data.dtype)
    gray = r * data[:, :, 0] + g * data[:, :, 1] + b * data[:, :, 2]
    return Image(gray[:, :, None].astype(data.dtype))
