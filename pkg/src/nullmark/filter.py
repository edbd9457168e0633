"""Ternary filter patterns and the input filter ``x (+) [p, lambda]``.

A pattern is an H x W grid of GRAY / BLACK / WHITE cells. Only one square
block of side ``n`` is non-gray. Applying a pattern with extreme value
``lam`` writes ``+lam`` at white cells and ``-lam`` at black cells and leaves
gray cells untouched.

Cell encoding follows ``GRAY = -1``, ``BLACK = 0``, ``WHITE = 1``.

Bits map to block cells row-major, most significant bit first: block cell
``(i, j)`` reads bit ``n*n - 1 - (i*n + j)`` of the integer.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError, PatternError

GRAY = -1
BLACK = 0
WHITE = 1


@dataclass(frozen=True)
class FilterPattern:
    height: int
    width: int
    block_size: int
    block_pos: tuple[int, int]
    bits: int

    def __post_init__(self):
        n = self.block_size
        # n == 0 is the all-gray pattern, which filters nothing
        if n < 0:
            raise PatternError(f"block_size must be >= 0, got {n}")
        if n > min(self.height, self.width):
            raise DimensionError(
                f"block_size {n} exceeds input size {self.height}x{self.width}"
            )
        if not 0 <= self.bits < (1 << (n * n)):
            raise PatternError(f"bits out of range for a {n}x{n} block")
        row, col = self.block_pos
        if not (0 <= row <= self.height - n and 0 <= col <= self.width - n):
            raise PatternError(f"block position {self.block_pos} out of bounds")
        object.__setattr__(self, "block_pos", (int(row), int(col)))

    @cached_property
    def block(self) -> np.ndarray:
        """The n x n block of BLACK/WHITE values."""
        n = self.block_size
        shifts = np.arange(n * n - 1, -1, -1, dtype=object)
        flat = [(self.bits >> int(s)) & 1 for s in shifts]
        return np.array(flat, dtype=np.int8).reshape(n, n)

    @cached_property
    def cells(self) -> np.ndarray:
        grid = np.full((self.height, self.width), GRAY, dtype=np.int8)
        r, c = self.block_pos
        n = self.block_size
        grid[r:r + n, c:c + n] = self.block
        grid.flags.writeable = False
        return grid

    @property
    def mask(self) -> np.ndarray:
        """Boolean H x W array, True on the non-gray block."""
        return self.cells != GRAY

    def to_record(self) -> dict:
        nhex = (self.block_size ** 2 + 3) // 4
        return {
            "H": self.height,
            "W": self.width,
            "n": self.block_size,
            "pos": list(self.block_pos),
            "bits_hex": format(self.bits, f"0{nhex}x"),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FilterPattern":
        return cls(
            height=int(rec["H"]),
            width=int(rec["W"]),
            block_size=int(rec["n"]),
            block_pos=tuple(rec["pos"]),
            bits=int(rec["bits_hex"], 16),
        )

    def ascii(self) -> str:
        glyph = {GRAY: ".", BLACK: "B", WHITE: "W"}
        return "\n".join("".join(glyph[int(v)] for v in row) for row in self.cells)


def make_pattern(bits: int, pos: tuple[int, int], n: int, height: int, width: int) -> FilterPattern:
    return FilterPattern(height=height, width=width, block_size=n, block_pos=tuple(pos), bits=bits)


def invert(p: FilterPattern) -> FilterPattern:
    """Swap WHITE and BLACK inside the block; gray cells are untouched."""
    full = (1 << (p.block_size ** 2)) - 1
    return FilterPattern(p.height, p.width, p.block_size, p.block_pos, p.bits ^ full)


def _spatial_view(x: np.ndarray, p: FilterPattern) -> tuple[int, ...]:
    # accepted layouts: (H, W), (H, W, C), (N, H, W, C)
    if x.ndim == 2:
        hw = x.shape
    elif x.ndim == 3:
        hw = x.shape[:2]
    elif x.ndim == 4:
        hw = x.shape[1:3]
    else:
        raise DimensionError(f"expected 2-4 dims, got shape {x.shape}")
    if tuple(hw) != (p.height, p.width):
        raise DimensionError(
            f"input spatial size {tuple(hw)} != pattern size {(p.height, p.width)}"
        )
    return hw


def apply(x: np.ndarray, p: FilterPattern, lam: float) -> np.ndarray:
    """Return a filtered copy of ``x``.

    ``x`` is channel-last: ``(H, W)``, ``(H, W, C)`` or ``(N, H, W, C)``.
    The replacement is broadcast over every channel at a block position.
    """
    if lam <= 0:
        raise ValueError(f"extreme value must be positive, got {lam}")
    x = np.asarray(x)
    _spatial_view(x, p)
    out = x.copy()
    r, c = p.block_pos
    n = p.block_size
    block = np.where(p.block == WHITE, lam, -lam).astype(out.dtype)
    if x.ndim == 2:
        out[r:r + n, c:c + n] = block
    elif x.ndim == 3:
        out[r:r + n, c:c + n, :] = block[:, :, None]
    else:
        out[:, r:r + n, c:c + n, :] = block[None, :, :, None]
    return out
