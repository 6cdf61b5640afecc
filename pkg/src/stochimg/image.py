"""Raw PGM/PPM images, block tiling and partial-image reassembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class ImageBuffer:
    width: int
    height: int
    channels: int
    pixels: bytes

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ImageError(f"bad image size {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise ImageError(f"channels must be 1 or 3, got {self.channels}")
        if len(self.pixels) != self.width * self.height * self.channels:
            raise ImageError(
                f"pixel buffer has {len(self.pixels)} bytes, expected "
                f"{self.width * self.height * self.channels}")

    def array(self) -> np.ndarray:
        """Read-only ``(height, width, channels)`` uint8 view."""
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr) -> ImageBuffer:
        arr = np.asarray(arr, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(w, h, c, np.ascontiguousarray(arr).tobytes())


# ---------------------------------------------------------------------------
# netpbm


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in b" \t\r\n":
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in b" \t\r\n#":
            pos += 1
        if start == pos:
            raise ImageError("malformed header: unexpected end of data")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or data[pos] not in b" \t\r\n":
        raise ImageError("malformed header: missing separator before pixel data")
    return tokens, pos + 1


def load_image(data: bytes) -> ImageBuffer:
    """Parse a binary PGM (P5) or PPM (P6) file with maxval 255."""
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise ImageError("malformed header: expected P5 or P6 magic")
    if len(data) < 3 or data[2] not in b" \t\r\n":
        raise ImageError("malformed header: no whitespace after magic")
    channels = 1 if data[:2] == b"P5" else 3
    tokens, offset = _header_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageError("malformed header: non-integer field") from None
    if width < 1 or height < 1:
        raise ImageError(f"malformed header: size {width}x{height}")
    if maxval != 255:
        raise ImageError(f"unsupported maxval {maxval} (only 255)")
    raster = data[2 + offset:]
    need = width * height * channels
    if len(raster) < need:
        raise ImageError(f"truncated payload: {len(raster)} of {need} bytes")
    return ImageBuffer(width, height, channels, bytes(raster[:need]))


def dump_image(image: ImageBuffer) -> bytes:
    magic = b"P5" if image.channels == 1 else b"P6"
    return b"%s\n%d %d\n255\n" % (magic, image.width, image.height) + image.pixels


def read_image(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        return load_image(fh.read())


def write_image(path, image: ImageBuffer) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_image(image))


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class BlockGrid:
    width: int
    height: int
    channels: int
    block_width: int
    block_height: int

    def __post_init__(self):
        if self.block_width < 1 or self.block_height < 1:
            raise ImageError("block dimensions must be positive")
        if self.width % self.block_width or self.height % self.block_height:
            raise ImageError(
                f"{self.width}x{self.height} image is not divisible into "
                f"{self.block_width}x{self.block_height} blocks")

    @classmethod
    def for_image(cls, image: ImageBuffer, block_width: int, block_height: int) -> BlockGrid:
        return cls(image.width, image.height, image.channels, block_width, block_height)

    @property
    def cols(self) -> int:
        return self.width // self.block_width

    @property
    def rows(self) -> int:
        return self.height // self.block_height

    @property
    def count(self) -> int:
        return self.cols * self.rows

    @property
    def block_pixels(self) -> int:
        return self.block_width * self.block_height

    @property
    def block_bytes(self) -> int:
        return self.block_pixels * self.channels

    @property
    def image_bytes(self) -> int:
        return self.width * self.height * self.channels

    def cell(self, block_id: int) -> tuple[int, int]:
        """(column, row) of a block; ids run row-major."""
        if not 0 <= block_id < self.count:
            raise ImageError(f"block id {block_id} outside 0..{self.count - 1}")
        return block_id % self.cols, block_id // self.cols

    def _blocks_view(self, arr: np.ndarray) -> np.ndarray:
        # (rows, cols, bh, bw, c) view of a (h, w, c) array
        return arr.reshape(self.rows, self.block_height, self.cols,
                           self.block_width, self.channels).swapaxes(1, 2)


@dataclass(frozen=True)
class BlockPayload:
    block_id: int
    data: bytes


def tile(image: ImageBuffer, block_width: int, block_height: int
         ) -> tuple[BlockGrid, list[BlockPayload]]:
    grid = BlockGrid.for_image(image, block_width, block_height)
    blocks = grid._blocks_view(image.array()).reshape(grid.count, grid.block_bytes)
    return grid, [BlockPayload(i, blocks[i].tobytes()) for i in range(grid.count)]


def untile(grid: BlockGrid, payloads: Iterable[BlockPayload]) -> ImageBuffer:
    """Inverse of :func:`tile`; every block must be present."""
    partial = reassemble(grid, payloads)
    if len(partial.received) != grid.count:
        raise ImageError(f"untile needs all {grid.count} blocks, got {len(partial.received)}")
    return partial.image


@dataclass(frozen=True)
class PartialImage:
    grid: BlockGrid
    received: frozenset
    pixels: bytes
    fill: int = 0

    @property
    def image(self) -> ImageBuffer:
        g = self.grid
        return ImageBuffer(g.width, g.height, g.channels, self.pixels)


def reassemble(grid: BlockGrid, received: Iterable[BlockPayload], fill: int = 0) -> PartialImage:
    if not 0 <= fill <= 255:
        raise ImageError(f"fill value {fill} outside 0..255")
    out = np.full((grid.height, grid.width, grid.channels), fill, dtype=np.uint8)
    view = grid._blocks_view(out)
    shape = (grid.block_height, grid.block_width, grid.channels)
    got = set()
    for payload in received:
        col, row = grid.cell(payload.block_id)
        if len(payload.data) != grid.block_bytes:
            raise ImageError(
                f"block {payload.block_id}: payload is {len(payload.data)} bytes, "
                f"expected {grid.block_bytes}")
        view[row, col] = np.frombuffer(payload.data, dtype=np.uint8).reshape(shape)
        got.add(payload.block_id)
    return PartialImage(grid, frozenset(got), out.tobytes(), fill)


# ---------------------------------------------------------------------------
# metrics


def pixel_filling_rate(partial: PartialImage) -> float:
    """Fraction of pixels covered by uniquely received blocks."""
    g = partial.grid
    return len(partial.received) * g.block_pixels / (g.width * g.height)


class Coverage(NamedTuple):
    fraction: float
    full: bool


def region_coverage(partial: PartialImage, region: Iterable[int]) -> Coverage:
    region = set(int(b) for b in region)
    if not region:
        raise ImageError("empty region")
    bad = [b for b in region if not 0 <= b < partial.grid.count]
    if bad:
        raise ImageError(f"region block ids out of range: {sorted(bad)[:5]}")
    hit = len(region & partial.received)
    return Coverage(hit / len(region), hit == len(region))


def received_from_pixels(grid: BlockGrid, original: ImageBuffer, output: ImageBuffer,
                         fill: int = 0) -> tuple[frozenset, frozenset]:
    """Recover the received block set by comparing an output image to its source.

    Returns ``(received, ambiguous)``. A block is received when its output
    bytes equal the source bytes and differ from a uniform fill; source
    blocks that are themselves uniformly ``fill`` cannot be told apart and
    are reported as ambiguous instead.
    """
    if (output.width, output.height, output.channels) != (original.width, original.height,
                                                          original.channels):
        raise ImageError("output and original image dimensions differ")
    src = grid._blocks_view(original.array()).reshape(grid.count, grid.block_bytes)
    out = grid._blocks_view(output.array()).reshape(grid.count, grid.block_bytes)
    same = (src == out).all(axis=1)
    src_is_fill = (src == fill).all(axis=1)
    received = frozenset(np.flatnonzero(same & ~src_is_fill).tolist())
    ambiguous = frozenset(np.flatnonzero(src_is_fill).tolist())
    return received, ambiguous
