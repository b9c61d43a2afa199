"""Adaptive quadrilateral mesh of the unit square.

The mesh is a quadtree rooted at the unit cell [0,1]^2.  A cell at level L
is the axis-aligned square of edge length 2**-L with lower-left corner
(ix * 2**-L, iy * 2**-L), so every cell is identified exactly by the integer
key ``(level, ix, iy)``.  The active (leaf) cells tile the square without
overlap.  Refinement replaces a cell by its four quadrant children and then
closes the mesh so that edge-adjacent active cells never differ by more than
one level (1-irregularity).  There is no coarsening.

Meshes are immutable; ``refine`` and ``uniform_refine`` return new objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

CellKey = tuple[int, int, int]

_EDGE_DIRS = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass(frozen=True)
class Cell:
    """One quadtree cell, identified by (level, ix, iy)."""

    level: int
    ix: int
    iy: int
    active: bool = True

    @property
    def key(self) -> CellKey:
        return (self.level, self.ix, self.iy)

    # the key doubles as the opaque id
    id = key

    @property
    def size(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def origin(self) -> tuple[float, float]:
        h = self.size
        return (self.ix * h, self.iy * h)

    @property
    def center(self) -> tuple[float, float]:
        h = self.size
        return ((self.ix + 0.5) * h, (self.iy + 0.5) * h)

    @property
    def parent(self) -> CellKey | None:
        if self.level == 0:
            return None
        return (self.level - 1, self.ix // 2, self.iy // 2)

    @property
    def children(self) -> tuple[CellKey, CellKey, CellKey, CellKey]:
        L, i, j = self.level + 1, 2 * self.ix, 2 * self.iy
        return ((L, i, j), (L, i + 1, j), (L, i, j + 1), (L, i + 1, j + 1))


def _children(key: CellKey) -> tuple[CellKey, CellKey, CellKey, CellKey]:
    L, i, j = key
    return ((L + 1, 2 * i, 2 * j), (L + 1, 2 * i + 1, 2 * j),
            (L + 1, 2 * i, 2 * j + 1), (L + 1, 2 * i + 1, 2 * j + 1))


@dataclass(frozen=True)
class Mesh:
    """Immutable 1-irregular quadtree mesh of (0,1)^2.

    ``active`` lists the leaf cells in the canonical iteration order,
    lexicographic by (level, ix, iy).
    """

    active: tuple[CellKey, ...]
    generation: int = 0
    _active_set: frozenset[CellKey] = field(repr=False, default=None)

    def __post_init__(self):
        if self._active_set is None:
            object.__setattr__(self, "_active_set", frozenset(self.active))

    @property
    def n_active(self) -> int:
        return len(self.active)

    @property
    def max_level(self) -> int:
        return max(k[0] for k in self.active)

    def is_active(self, key: CellKey) -> bool:
        return key in self._active_set

    def cell(self, key: CellKey) -> Cell:
        return Cell(key[0], key[1], key[2], active=key in self._active_set)

    def cells(self):
        """Active cells in iteration order."""
        for key in self.active:
            yield Cell(*key, active=True)

    def index_of(self, key: CellKey) -> int:
        """Position of an active cell in the iteration order."""
        return self.active.index(key)

    def active_ancestor(self, key: CellKey) -> CellKey | None:
        """Nearest active cell that is `key` or one of its ancestors."""
        L, i, j = key
        while L >= 0:
            if (L, i, j) in self._active_set:
                return (L, i, j)
            L, i, j = L - 1, i // 2, j // 2
        return None

    def total_area(self) -> float:
        return sum(4.0 ** (-k[0]) for k in self.active)


def _as_key(flag) -> CellKey:
    if isinstance(flag, Cell):
        return flag.key
    level, ix, iy = flag
    return (int(level), int(ix), int(iy))


def new_uniform(n: int) -> Mesh:
    """Uniform mesh with n x n active cells, n a power of two (n >= 1)."""
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"cells-per-axis must be a power of two >= 1, got {n}")
    level = n.bit_length() - 1
    keys = tuple((level, i, j) for j in range(n) for i in range(n))
    return Mesh(active=tuple(sorted(keys)), generation=0)


def refine(mesh: Mesh, flags) -> Mesh:
    """Replace each flagged active cell by its four children, then close.

    Closure refines further cells until every pair of edge-adjacent active
    cells differs by at most one level.  Flagging an inactive cell is an
    error.
    """
    flagged = {_as_key(f) for f in flags}
    for key in flagged:
        if not mesh.is_active(key):
            raise ValueError(f"cannot refine inactive cell {key}")
    active = set(mesh.active)
    for key in flagged:
        active.remove(key)
        active.update(_children(key))
    _close(active)
    return Mesh(active=tuple(sorted(active)), generation=mesh.generation + 1)


def uniform_refine(mesh: Mesh) -> Mesh:
    """Refine every active cell (no closure needed)."""
    return refine(mesh, mesh.active)


def _close(active: set[CellKey]) -> None:
    """Repeated sweeps splitting too-coarse neighbors until 1-irregular."""
    while True:
        to_split = set()
        for (L, i, j) in active:
            n = 1 << L
            for di, dj in _EDGE_DIRS:
                ni, nj = i + di, j + dj
                if not (0 <= ni < n and 0 <= nj < n):
                    continue
                anc = _ancestor_in(active, (L, ni, nj))
                if anc is not None and L - anc[0] > 1:
                    to_split.add(anc)
        if not to_split:
            return
        for key in to_split:
            active.remove(key)
            active.update(_children(key))


def _ancestor_in(active: set[CellKey], key: CellKey) -> CellKey | None:
    L, i, j = key
    while L >= 0:
        if (L, i, j) in active:
            return (L, i, j)
        L, i, j = L - 1, i // 2, j // 2
    return None


def to_svg(mesh: Mesh, path, scores: dict[CellKey, float] | None = None) -> None:
    """Write the active-cell wireframe as an SVG file.

    The drawing spans the unit square with the mathematical orientation
    (y upward).  If ``scores`` maps cell keys to nonnegative values, cells
    are shaded by score relative to the maximum.
    """
    smax = max(scores.values()) if scores else 0.0
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 1 1" '
        'width="640" height="640">',
    ]
    for key in mesh.active:
        c = Cell(*key)
        h = c.size
        x, y = c.origin
        fill = "none"
        if scores and smax > 0:
            rel = max(0.0, min(1.0, scores.get(key, 0.0) / smax))
            shade = int(round(255 * (1.0 - 0.75 * rel)))
            fill = f"rgb(255,{shade},{shade})"
        # SVG y runs downward; flip the cell into math orientation
        lines.append(
            f'<rect x="{x:.10g}" y="{1.0 - y - h:.10g}" width="{h:.10g}" '
            f'height="{h:.10g}" fill="{fill}" stroke="black" '
            'stroke-width="0.002"/>'
        )
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
