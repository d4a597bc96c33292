"""Image values, PGM I/O, thresholding and bird's-eye perspective warp.

Coordinates: origin top-left, x = column (rightward), y = row (downward).
The bottom row is the one nearest the vehicle.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

DET_EPS = 1e-12


class SingularHomography(ValueError):
    pass


class DegenerateQuad(ValueError):
    pass


class MalformedHeader(ValueError):
    pass


class TruncatedData(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Row-major 8-bit intensities, shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("GrayImage intensities must lie in [0, 255]")
        arr = arr.astype(np.uint8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BinaryImage:
    """Row-major booleans, True marks a lane (white) pixel."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"BinaryImage needs a non-empty 2-D array, got shape {arr.shape}")
        arr = arr.astype(bool, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def blank(cls, width: int, height: int) -> "BinaryImage":
        return cls(np.zeros((height, width), dtype=bool))

    def to_gray(self) -> GrayImage:
        return GrayImage(np.where(self.data, 255, 0).astype(np.uint8))

    def __eq__(self, other):
        return isinstance(other, BinaryImage) and np.array_equal(self.data, other.data)

    __hash__ = None


Image = Union[GrayImage, BinaryImage]


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map normalized so that m[2, 2] == 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise SingularHomography("homography has non-finite entries")
        if abs(m[2, 2]) <= DET_EPS:
            raise SingularHomography("bottom-right entry is zero; cannot normalize")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise SingularHomography(f"|det| = {abs(np.linalg.det(m)):.3e} <= {DET_EPS}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, points) -> np.ndarray:
        """Map an (N, 2) array of (x, y) points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        hom = np.column_stack([pts, np.ones(len(pts))]) @ self.matrix.T
        return hom[:, :2] / hom[:, 2:3]

    def __eq__(self, other):
        return isinstance(other, Homography) and np.array_equal(self.matrix, other.matrix)

    __hash__ = None


def threshold(img: GrayImage, t: float) -> BinaryImage:
    """True where intensity >= t (inclusive)."""
    return BinaryImage(img.data >= t)


def warp_perspective(img: BinaryImage, h: Homography, out_size: tuple[int, int] | None = None) -> BinaryImage:
    """Warp by inverse mapping with nearest-neighbor sampling.

    Output pixel (x, y) takes the input pixel at ``h^-1 (x, y, 1)``;
    samples falling outside the input are False.

    Args:
        img: source image.
        h: forward map from source to output pixel coordinates.
        out_size: (width, height) of the output; defaults to the input size.
    """
    if not isinstance(h, Homography):
        h = Homography(h)
    width, height = out_size if out_size is not None else (img.width, img.height)
    inv = np.linalg.inv(h.matrix)
    ys, xs = np.mgrid[0:height, 0:width]
    src = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)]).astype(float)
    mapped = inv @ src
    w = mapped[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = np.floor(mapped[0] / w + 0.5)
        sy = np.floor(mapped[1] / w + 0.5)
    ok = np.isfinite(sx) & np.isfinite(sy) & (w != 0)
    ok &= (sx >= 0) & (sx < img.width) & (sy >= 0) & (sy < img.height)
    out = np.zeros(xs.size, dtype=bool)
    out[ok] = img.data[sy[ok].astype(int), sx[ok].astype(int)]
    return BinaryImage(out.reshape(height, width))


def _check_no_three_collinear(quad: np.ndarray, name: str) -> None:
    scale = max(float(np.ptp(quad[:, 0])), float(np.ptp(quad[:, 1])), 1e-300)
    for i in range(4):
        a, b, c = (quad[j] for j in range(4) if j != i)
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area2) <= 1e-9 * scale * scale:
            raise DegenerateQuad(f"three {name} points are collinear")


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - centroid, axis=1))
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def homography_from_quads(src: Sequence[Sequence[float]], dst: Sequence[Sequence[float]]) -> Homography:
    """Exact four-point homography (normalized DLT) mapping src[i] -> dst[i]."""
    src = np.asarray(src, dtype=float).reshape(4, 2)
    dst = np.asarray(dst, dtype=float).reshape(4, 2)
    _check_no_three_collinear(src, "src")
    _check_no_three_collinear(dst, "dst")

    t_src = _normalizing_transform(src)
    t_dst = _normalizing_transform(dst)
    ps = np.column_stack([src, np.ones(4)]) @ t_src.T
    pd = np.column_stack([dst, np.ones(4)]) @ t_dst.T

    rows = []
    for (x, y, _), (u, v, _) in zip(ps, pd):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ hn @ t_src
    return Homography(m)


# --- PGM ---------------------------------------------------------------------

def _read_header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments.

    Returns the tokens and the offset just past the last token.
    """
    tokens: list[bytes] = []
    i, n = 0, len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i >= n:
            raise MalformedHeader("unexpected end of file in header")
        if buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        tokens.append(buf[start:i])
    return tokens, i


def load_pgm(path: Union[str, os.PathLike], binary: bool = False) -> Image:
    """Load a P2 or P5 PGM file.

    With ``binary=True`` the result is a BinaryImage (pixel >= 128 is True);
    otherwise a GrayImage. Files with maxval < 255 are rescaled to 0..255.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = _read_header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise MalformedHeader(f"bad magic {magic!r}; expected P2 or P5")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeader(f"non-integer header field: {exc}") from None
    if width < 1 or height < 1:
        raise MalformedHeader(f"invalid dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise MalformedHeader(f"maxval {maxval} outside [1, 255]")

    count = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates the header from the raster
        if pos >= len(buf) or not buf[pos:pos + 1].isspace():
            raise MalformedHeader("missing whitespace after maxval")
        raster = buf[pos + 1:pos + 1 + count]
        if len(raster) < count:
            raise TruncatedData(f"expected {count} bytes, found {len(raster)}")
        values = np.frombuffer(raster, dtype=np.uint8).astype(np.int64)
    else:
        parts = buf[pos:].split()
        if len(parts) < count:
            raise TruncatedData(f"expected {count} samples, found {len(parts)}")
        try:
            values = np.array([int(p) for p in parts[:count]], dtype=np.int64)
        except ValueError as exc:
            raise MalformedHeader(f"non-integer sample: {exc}") from None
    if values.size and values.max() > maxval:
        raise MalformedHeader(f"sample exceeds maxval {maxval}")
    if maxval != 255:
        values = (values * 255 + maxval // 2) // maxval
    data = values.reshape(height, width)
    if binary:
        return BinaryImage(data >= 128)
    return GrayImage(data)


def save_pgm(img: Image, path: Union[str, os.PathLike], format: str = "P5") -> None:
    """Write a PGM with maxval 255. BinaryImage is stored as {0, 255}."""
    if isinstance(img, BinaryImage):
        img = img.to_gray()
    fmt = format.upper()
    header = f"{fmt}\n{img.width} {img.height}\n255\n".encode("ascii")
    if fmt == "P5":
        body = img.data.astype(np.uint8).tobytes()
    elif fmt == "P2":
        body = "".join(" ".join(str(int(v)) for v in row) + "\n" for row in img.data).encode("ascii")
    else:
        raise ValueError(f"unknown PGM format {format!r}")
    with open(path, "wb") as fh:
        fh.write(header + body)
