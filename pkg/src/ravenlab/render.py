"""Deterministic rasterizer from factor assignments to pixel arrays.

Images are numpy float32 arrays of shape (H, W, C), values in [0, 1],
C in {1, 3}.  Shapes are drawn by signed-distance tests on pixel centers
with no anti-aliasing, so identical inputs always give identical bytes.
Persisted form is binary PPM (P6) for color, PGM (P5) for grayscale.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .space import FactorSpace

SUPPORTED_SIZES = (16, 32, 64)

# half-extent of the largest object as a fraction of the image side; also
# the margin that keeps every object fully inside the frame
_R_MAX = 0.22
_R_MIN = 0.10

_SHAPES = ("square", "ellipse", "triangle")


@dataclass(frozen=True)
class Palette:
    """Ordered object / background colors, RGB triples in [0, 1]."""

    object_colors: tuple[tuple[float, float, float], ...]
    background_colors: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        for name in ("object_colors", "background_colors"):
            colors = getattr(self, name)
            if len(set(colors)) != len(colors):
                raise ValueError(f"{name} entries must be pairwise distinct")


def _hue_ring(n: int, lightness: float, saturation: float):
    return tuple(
        tuple(round(c, 6) for c in colorsys.hls_to_rgb(i / n, lightness, saturation))
        for i in range(n)
    )


def default_palette(n_object: int = 10, n_background: int = 10) -> Palette:
    """Equally spaced hue rings; objects bright, backgrounds dark and muted."""
    return Palette(
        object_colors=_hue_ring(n_object, 0.55, 0.90),
        background_colors=_hue_ring(n_background, 0.22, 0.45),
    )


def _shape_mask(shape: str, cx, cy, r, size: int) -> np.ndarray:
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    x = coords[None, :]
    y = coords[:, None]
    if shape == "square":
        return np.maximum(np.abs(x - cx), np.abs(y - cy)) <= r
    if shape == "ellipse":
        return ((x - cx) / r) ** 2 + ((y - cy) / (0.62 * r)) ** 2 <= 1.0
    if shape == "triangle":
        # apex up: vertices at center + r * {(0,-1), (-1,1), (1,1)}
        vx = (cx, cx - r, cx + r)
        vy = (cy - r, cy + r, cy + r)
        pos = np.zeros((size, size), dtype=bool)
        neg = np.zeros((size, size), dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            cross = (vx[j] - vx[i]) * (y - vy[i]) - (vy[j] - vy[i]) * (x - vx[i])
            pos |= cross > 0
            neg |= cross < 0
        return ~(pos & neg)
    raise ValueError(f"unknown shape {shape!r}")


def _grid_positions(card: int) -> np.ndarray:
    """Equally spaced centers in [margin, 1-margin]."""
    return _R_MAX + np.arange(card) * (1.0 - 2 * _R_MAX) / (card - 1)


def _half_extents(card: int) -> np.ndarray:
    return _R_MIN + np.arange(card) * (_R_MAX - _R_MIN) / (card - 1)


def image_channels(space: FactorSpace) -> int:
    """1 unless the space carries a color factor."""
    has_color = (
        space.factor_by_role("object_color") is not None
        or space.factor_by_role("background_color") is not None
    )
    return 3 if has_color else 1


def render(
    space: FactorSpace,
    assignment,
    size: int = 64,
    palette: Palette | None = None,
) -> np.ndarray:
    """Rasterize one assignment; deterministic in all arguments."""
    if size not in SUPPORTED_SIZES:
        raise ValueError(f"size must be one of {SUPPORTED_SIZES}, got {size}")
    values = space.validate_assignment(assignment)
    palette = palette or default_palette()

    def role_value(role):
        k = space.factor_by_role(role)
        return None if k is None else (values[k], space.factors[k].cardinality)

    shape_v = role_value("shape")
    shape = "square" if shape_v is None else _SHAPES[shape_v[0] % len(_SHAPES)]

    size_v = role_value("size")
    r = _R_MAX if size_v is None else float(_half_extents(size_v[1])[size_v[0]])

    px = role_value("pos_x")
    cx = 0.5 if px is None else float(_grid_positions(px[1])[px[0]])
    py = role_value("pos_y")
    cy = 0.5 if py is None else float(_grid_positions(py[1])[py[0]])

    mask = _shape_mask(shape, cx, cy, r, size)

    channels = image_channels(space)
    if channels == 1:
        img = np.zeros((size, size, 1), dtype=np.float32)
        img[mask] = 1.0
        return img

    oc = role_value("object_color")
    fg = (1.0, 1.0, 1.0) if oc is None else palette.object_colors[oc[0]]
    bc = role_value("background_color")
    bg = (0.0, 0.0, 0.0) if bc is None else palette.background_colors[bc[0]]
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = np.asarray(bg, dtype=np.float32)
    img[mask] = np.asarray(fg, dtype=np.float32)
    return img


class PanelCache:
    """Memoized renderer for one (space, size, palette) combination.

    Small factor grids (a few thousand combinations) are what training
    loops iterate over; those are pre-rasterized into one dense array so a
    batch lookup is a single fancy-index.
    """

    def __init__(self, space: FactorSpace, size: int, palette=None, limit: int = 4096):
        self.space = space
        self.size = size
        self.palette = palette
        self._cache: dict[tuple, np.ndarray] = {}
        self._enabled = space.total_combinations <= limit
        self._full: np.ndarray | None = None
        self._strides = np.array(
            [int(np.prod(space.cardinalities[i + 1 :])) for i in range(space.num_factors)],
            dtype=np.int64,
        )

    def get(self, assignment) -> np.ndarray:
        key = tuple(int(v) for v in assignment)
        if not self._enabled:
            return render(self.space, key, self.size, self.palette)
        img = self._cache.get(key)
        if img is None:
            img = render(self.space, key, self.size, self.palette)
            self._cache[key] = img
        return img

    def batch(self, assignments) -> np.ndarray:
        """Render an (..., num_factors) assignment array to (..., H, W, C)."""
        arr = np.asarray(assignments, dtype=np.int64)
        if self._enabled:
            return self.full_array()[self.flat_indices(arr)]
        flat = arr.reshape(-1, arr.shape[-1])
        out = np.stack([self.get(a) for a in flat])
        return out.reshape(arr.shape[:-1] + out.shape[1:])

    def flat_indices(self, assignments) -> np.ndarray:
        """Row-major grid indices for an (..., num_factors) assignment array."""
        return np.asarray(assignments, dtype=np.int64) @ self._strides

    def full_array(self) -> np.ndarray:
        """All renders stacked in row-major grid order (small spaces only)."""
        if not self._enabled:
            raise RuntimeError("factor grid too large to pre-rasterize")
        if self._full is None:
            from .space import index_to_assignment

            self._full = np.stack(
                [
                    render(self.space, index_to_assignment(self.space, i), self.size, self.palette)
                    for i in range(self.space.total_combinations)
                ]
            )
        return self._full


_SEPARATOR_VALUE = 0.5


def render_grid(space: FactorSpace, puzzle, cell: int = 64, palette=None) -> np.ndarray:
    """Composite view: 3x3 context (missing cell blank) over the 6-choice strip.

    Canvas width is 6*cell + 5 (six choices with 1-pixel separators); the
    context block is centered above a 1-pixel divider.
    """
    channels = image_channels(space)
    width = 6 * cell + 5
    grid_side = 3 * cell + 2
    height = grid_side + 1 + cell
    canvas = np.zeros((height, width, channels), dtype=np.float32)

    # separator scaffolding
    left = (width - grid_side) // 2
    block = np.full((grid_side, grid_side, channels), _SEPARATOR_VALUE, dtype=np.float32)
    for row in range(3):
        for col in range(3):
            y = row * (cell + 1)
            x = col * (cell + 1)
            if row == 2 and col == 2:
                block[y : y + cell, x : x + cell] = 0.0  # withheld cell stays blank
                continue
            panel = render(space, puzzle.grid[row * 3 + col], cell, palette)
            block[y : y + cell, x : x + cell] = panel
    canvas[:grid_side, left : left + grid_side] = block

    canvas[grid_side, :] = _SEPARATOR_VALUE
    strip_y = grid_side + 1
    for k, choice in enumerate(puzzle.choices):
        x = k * (cell + 1)
        canvas[strip_y:, x : x + cell] = render(space, choice, cell, palette)
        if k < 5:
            canvas[strip_y:, x + cell] = _SEPARATOR_VALUE
    return canvas


def save_image(path, img: np.ndarray) -> None:
    """Write binary PGM (1 channel) or PPM (3 channels), maxval 255."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    h, w, c = img.shape
    magic = b"P5" if c == 1 else b"P6"
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def load_image(path) -> np.ndarray:
    """Inverse of save_image (values quantized to the 255 grid)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported netpbm magic {magic!r}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError("only maxval 255 supported")
        c = 1 if magic == b"P5" else 3
        raw = fh.read(w * h * c)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c)
    return (arr / 255.0).astype(np.float32)
