"""Packaged experiment scenarios and the map generator that produced them.

The four full-size environments follow the published agent counts, map sizes
and neighbour counts; ``mini-*`` variants halve each map side (a quarter of
the area), scale agents and dynamic obstacles by 1/4 and use ``ceil(z/2)``.
Static layouts are synthetic: random wall segments at 15% density that never
disconnect the free space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import ndimage

from .grid import GridMap, load_map

STATIC_DENSITY = 0.15


def generate_map(height: int, width: int, density: float = STATIC_DENSITY, seed: int = 0,
                 keep_clear=None) -> GridMap:
    """Random wall segments until ``density`` of the cells are blocked.

    A wall cell is only added if the free cells stay one 4-connected region.
    ``keep_clear`` is an optional ``(r0, c0, r1, c1)`` half-open rectangle
    that never receives walls.
    """
    rng = np.random.default_rng(seed)
    cells = np.zeros((height, width), dtype=bool)
    target = int(round(density * height * width))
    placed = 0
    max_len = max(3, min(height, width) // 2)
    attempts = 0
    while placed < target and attempts < 100 * height * width:
        attempts += 1
        horizontal = rng.random() < 0.5
        length = int(rng.integers(2, max_len + 1))
        r, c = int(rng.integers(height)), int(rng.integers(width))
        dr, dc = (0, 1) if horizontal else (1, 0)
        for k in range(length):
            rr, cc = r + k * dr, c + k * dc
            if placed >= target or not (0 <= rr < height and 0 <= cc < width) or cells[rr, cc]:
                break
            if keep_clear is not None:
                r0, c0, r1, c1 = keep_clear
                if r0 <= rr < r1 and c0 <= cc < c1:
                    break
            cells[rr, cc] = True
            _, count = ndimage.label(~cells)
            if count != 1:
                cells[rr, cc] = False
                break
            placed += 1
    return GridMap(width, height, cells)


def central_block(height: int, width: int):
    bh, bw = -(-height // 3), -(-width // 3)
    r0, c0 = (height - bh) // 2, (width - bw) // 2
    return r0, c0, r0 + bh, c0 + bw


@dataclass(frozen=True)
class ScenarioBundle:
    name: str
    height: int
    width: int
    n_agents: int
    z: int
    n_dyn: int = 30
    init_mode: str = "uniform"
    map_seed: int = 0

    @property
    def map_filename(self) -> str:
        return f"{self.name}.map"

    def generate(self) -> GridMap:
        keep = central_block(self.height, self.width) if self.init_mode == "clustered" else None
        return generate_map(self.height, self.width, seed=self.map_seed, keep_clear=keep)

    def map_text(self) -> str:
        return resources.files("abmapper").joinpath("maps", self.map_filename).read_text(encoding="utf-8")

    def grid(self) -> GridMap:
        return load_map(self.map_text())

    def defaults(self) -> dict:
        return {
            "scenario": self.name,
            "n_agents": self.n_agents,
            "n_dyn": self.n_dyn,
            "init_mode": self.init_mode,
            "z": self.z,
        }


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _mini(b: ScenarioBundle, seed: int) -> ScenarioBundle:
    return ScenarioBundle(
        name=f"mini-{b.name}",
        height=-(-b.height // 2),
        width=-(-b.width // 2),
        n_agents=_round_half_up(b.n_agents / 4),
        z=-(-b.z // 2),
        n_dyn=_round_half_up(b.n_dyn / 4),
        init_mode=b.init_mode,
        map_seed=seed,
    )


_FULL = [
    ScenarioBundle("I", 25, 31, 35, 3, map_seed=101),
    ScenarioBundle("II", 20, 20, 35, 5, init_mode="clustered", map_seed=102),
    ScenarioBundle("III", 60, 65, 175, 15, map_seed=103),
    ScenarioBundle("non", 60, 65, 70, 6, map_seed=104),
]

BUNDLES: dict[str, ScenarioBundle] = {b.name: b for b in _FULL}
BUNDLES.update({m.name: m for m in (_mini(b, b.map_seed + 100) for b in _FULL)})


def get_bundle(name: str) -> ScenarioBundle:
    try:
        return BUNDLES[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(BUNDLES)}") from None


def write_maps(directory) -> None:
    """Regenerate every packaged map file into ``directory``."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for b in BUNDLES.values():
        (d / b.map_filename).write_text(b.generate().render(), encoding="utf-8")
