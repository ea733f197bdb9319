"""Grid masks for mixing.

Cell convention: 1 keeps the primary image, 0 is filled from the partner.
Ratios passed to the generators count the filled (0) cells; ``lam`` counts
the kept (1) cells.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mixmask.rng import as_generator, stream

LOG_ASPECT = (math.log(0.3), math.log(1 / 0.3))
MIN_BLOCK_CELLS = 4
MAX_ATTEMPTS = 10
DEFAULT_GRID = {32: 2, 64: 4, 224: 8}


@dataclass
class GridMask:
    cells: np.ndarray
    seed: int | None = None
    # (top, left, height, width) of each rectangle the blocked generator placed
    blocks: list[tuple[int, int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.ndim != 2 or self.cells.shape[0] != self.cells.shape[1]:
            raise ValueError(f"mask cells must be a square matrix, got shape {self.cells.shape}")
        if self.cells.shape[0] < 1:
            raise ValueError("grid_n must be >= 1")
        if not np.isin(self.cells, (0, 1)).all():
            raise ValueError("mask cells must be 0 or 1")

    @property
    def grid_n(self) -> int:
        return self.cells.shape[0]

    @property
    def lam(self) -> float:
        return lambda_of(self)

    def complement(self) -> "GridMask":
        return GridMask(1 - self.cells, seed=self.seed)

    def expand(self, height: int, width: int) -> np.ndarray:
        return expand_to_pixels(self, height, width)


@dataclass(frozen=True)
class RatioPolicy:
    """Filled-cell ratio: ``fixed`` uses ``lo``; ``uniform`` draws from [lo, hi] each batch."""

    kind: str = "fixed"
    lo: float = 0.5
    hi: float = 0.5

    def __post_init__(self):
        if self.kind == "fixed":
            if not 0.0 <= self.lo <= 1.0:
                raise ValueError(f"fixed ratio must lie in [0, 1], got {self.lo}")
        elif self.kind == "uniform":
            if not 0.0 <= self.lo <= self.hi <= 1.0:
                raise ValueError(f"uniform ratio needs 0 <= lo <= hi <= 1, got ({self.lo}, {self.hi})")
        else:
            raise ValueError(f"unknown ratio policy {self.kind!r}")

    @classmethod
    def fixed(cls, r: float) -> "RatioPolicy":
        return cls("fixed", r, r)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "RatioPolicy":
        return cls("uniform", lo, hi)

    @classmethod
    def parse(cls, text) -> "RatioPolicy":
        """Accepts ``0.5``, ``fixed(0.5)``, ``uniform(0.25, 0.75)`` or ``uniform:0.25,0.75``."""
        if isinstance(text, (int, float)):
            return cls.fixed(float(text))
        s = str(text).strip().replace(" ", "")
        for name in ("fixed", "uniform"):
            if s.startswith(name):
                args = s[len(name):].strip("():")
                vals = [float(v) for v in args.split(",") if v]
                if name == "fixed" and len(vals) == 1:
                    return cls.fixed(vals[0])
                if name == "uniform" and len(vals) == 2:
                    return cls.uniform(*vals)
                raise ValueError(f"cannot parse ratio policy {text!r}")
        return cls.fixed(float(s))

    def sample(self, rng) -> float:
        if self.kind == "fixed":
            return self.lo
        return float(as_generator(rng).uniform(self.lo, self.hi))

    def __str__(self):
        if self.kind == "fixed":
            return f"fixed({self.lo:g})"
        return f"uniform({self.lo:g},{self.hi:g})"


def _seed_of(rng) -> int | None:
    if rng is None or isinstance(rng, np.random.Generator):
        return None
    return int(rng)


def _target_count(ratio: float, grid_n: int) -> int:
    # round half up, not banker's rounding
    return int(math.floor(ratio * grid_n * grid_n + 0.5))


def gen_discrete_mask(grid_n: int, ratio: float, rng) -> GridMask:
    """Fill exactly ``round(ratio * n^2)`` cells chosen uniformly without replacement."""
    if grid_n < 1:
        raise ValueError(f"grid_n must be >= 1, got {grid_n}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    gen = as_generator(rng)
    total = grid_n * grid_n
    flat = np.ones(total, dtype=np.uint8)
    flat[gen.choice(total, size=_target_count(ratio, grid_n), replace=False)] = 0
    return GridMask(flat.reshape(grid_n, grid_n), seed=_seed_of(rng))


def gen_blocked_mask(grid_n: int, target_ratio: float, rng) -> GridMask:
    """Fill rectangles until at least ``round(target_ratio * n^2)`` cells are filled.

    Each block's area is drawn between a per-attempt minimum and the remaining
    deficit with a log-uniform aspect ratio. A block is accepted on its first
    ``MAX_ATTEMPTS`` tries only if it adds cells without exceeding the deficit;
    after that any block adding at least one cell is taken, so the result can
    overshoot the target by at most one block.
    """
    if grid_n < 2:
        raise ValueError(f"blocked masks need grid_n >= 2, got {grid_n}")
    if not 0.0 < target_ratio < 1.0:
        raise ValueError(f"target_ratio must lie in (0, 1), got {target_ratio}")
    gen = as_generator(rng)
    cells = np.ones((grid_n, grid_n), dtype=np.uint8)
    target = _target_count(target_ratio, grid_n)
    min_cells = min(MIN_BLOCK_CELLS, max(1, grid_n * grid_n // 4))
    blocks = []
    filled = 0
    while filled < target:
        deficit = target - filled
        lo = min(min_cells, deficit)
        attempt = 0
        while True:
            attempt += 1
            area = gen.uniform(lo, deficit)
            aspect = math.exp(gen.uniform(*LOG_ASPECT))
            h = int(round(math.sqrt(area * aspect)))
            w = int(round(math.sqrt(area / aspect)))
            if h < 1 or w < 1 or h > grid_n or w > grid_n or h * w < lo:
                continue
            top = int(gen.integers(0, grid_n - h + 1))
            left = int(gen.integers(0, grid_n - w + 1))
            new = int(cells[top:top + h, left:left + w].sum())
            if new == 0:
                continue
            if attempt <= MAX_ATTEMPTS and (h * w > deficit or new > deficit):
                continue
            cells[top:top + h, left:left + w] = 0
            blocks.append((top, left, h, w))
            filled += new
            break
    return GridMask(cells, seed=_seed_of(rng), blocks=blocks)


def lambda_of(mask) -> float:
    """Kept fraction: count of 1-cells over area. Works on GridMask or any 0/1 array."""
    cells = mask.cells if isinstance(mask, GridMask) else np.asarray(mask)
    return float(np.count_nonzero(cells)) / cells.size


def expand_to_pixels(mask: GridMask, height: int, width: int) -> np.ndarray:
    n = mask.grid_n
    if height % n or width % n:
        raise ValueError(f"grid {n}x{n} does not divide image size {height}x{width}")
    return np.kron(mask.cells, np.ones((height // n, width // n), dtype=np.uint8))


def default_grid(image_size: int) -> int:
    if image_size in DEFAULT_GRID:
        return DEFAULT_GRID[image_size]
    return max(g for s, g in DEFAULT_GRID.items() if s <= image_size) if image_size >= 32 else 2


def make_mask(pattern: str, grid_n: int, ratio: float, rng) -> GridMask:
    if pattern == "discrete":
        return gen_discrete_mask(grid_n, ratio, rng)
    if pattern == "blocked":
        return gen_blocked_mask(grid_n, ratio, rng)
    raise ValueError(f"unknown mask pattern {pattern!r}; expected 'discrete' or 'blocked'")


def generate_masks(count: int, grid_n: int, ratio: float, pattern: str,
                   base_seed: int, workers: int = 1) -> list[GridMask]:
    """``count`` masks, mask ``i`` drawn from stream ``(base_seed, "mask", i)``."""
    def one(i):
        return make_mask(pattern, grid_n, ratio, stream(base_seed, "mask", i))

    if workers <= 1:
        return [one(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(count)))
