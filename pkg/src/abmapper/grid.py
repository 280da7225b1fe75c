"""Static grid maps, the text map format, and the action set."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import MalformedHeader, RaggedRows, UnknownGlyph

FREE = "."
OBSTACLE = "#"


class Action(IntEnum):
    STAY = 0
    UP = 1
    DOWN = 2
    LEFT = 3
    RIGHT = 4


# (drow, dcol) indexed by Action
MOVES = np.array([(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)
N_ACTIONS = len(Action)


def action_between(a, b) -> Action:
    """Action that moves from cell `a` to the 4-adjacent (or equal) cell `b`."""
    d = (b[0] - a[0], b[1] - a[1])
    for act in Action:
        if tuple(MOVES[act]) == d:
            return act
    raise ValueError(f"cells {a} and {b} are not adjacent")


@dataclass(frozen=True, eq=False)
class GridMap:
    """Immutable occupancy grid. ``cells[r, c]`` is True for a static obstacle."""

    width: int
    height: int
    cells: np.ndarray

    def __post_init__(self):
        cells = np.array(self.cells, dtype=bool)
        if cells.shape != (self.height, self.width):
            raise ValueError(f"cells shape {cells.shape} != ({self.height}, {self.width})")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    def __eq__(self, other):
        return (
            isinstance(other, GridMap)
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self):
        return hash((self.width, self.height, self.cells.tobytes()))

    @property
    def shape(self):
        return (self.height, self.width)

    def in_bounds(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def is_free(self, cell) -> bool:
        return self.in_bounds(cell) and not self.cells[cell[0], cell[1]]

    def free_cells(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(~self.cells)
        return list(zip(rows.tolist(), cols.tolist()))

    def render(self) -> str:
        lines = [f"{self.width} {self.height}"]
        for row in self.cells:
            lines.append("".join(OBSTACLE if v else FREE for v in row))
        return "\n".join(lines) + "\n"


def load_map(text: str) -> GridMap:
    """Parse the ``width height`` + glyph-rows map format.

    A single trailing newline is accepted so that ``load_map(m.render())``
    round-trips; anything else out of shape raises with the offending
    1-based line (and column for glyph errors).
    """
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedHeader("empty map text", line=1)
    parts = lines[0].split()
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise MalformedHeader(f"expected 'width height', got {lines[0]!r}", line=1)
    width, height = int(parts[0]), int(parts[1])
    if width < 1 or height < 1:
        raise MalformedHeader("dimensions must be positive", line=1)
    rows = lines[1:]
    if len(rows) != height:
        first_bad = len(lines) + 1 if len(rows) < height else height + 2
        raise RaggedRows(f"expected {height} rows, found {len(rows)}", line=first_bad)
    cells = np.zeros((height, width), dtype=bool)
    for r, row in enumerate(rows):
        lineno = r + 2
        if len(row) != width:
            raise RaggedRows(f"expected {width} columns, found {len(row)}", line=lineno)
        for c, ch in enumerate(row):
            if ch == OBSTACLE:
                cells[r, c] = True
            elif ch != FREE:
                raise UnknownGlyph(f"unknown glyph {ch!r}", line=lineno, col=c + 1)
    return GridMap(width, height, cells)
