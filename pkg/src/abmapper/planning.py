"""Single-agent planners: A* over static obstacles and local-repair A* (LRA*)
for the roaming dynamic obstacles."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import NoPath
from .grid import MOVES, Action, GridMap, action_between

Cell = tuple[int, int]

# expansion order: Up, Down, Left, Right
_EXPAND = [tuple(int(v) for v in MOVES[a]) for a in (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)]


def astar(grid: GridMap, start: Cell, goal: Cell, blocked=frozenset()) -> list[Cell]:
    """Shortest 4-connected path from `start` to `goal`, both inclusive.

    `blocked` cells are treated as extra obstacles (the start itself is never
    blocked). Equal-f nodes are popped in the order they were pushed, and
    neighbours are pushed Up, Down, Left, Right, so the result is a pure
    function of the inputs.
    """
    start = (int(start[0]), int(start[1]))
    goal = (int(goal[0]), int(goal[1]))
    if not grid.is_free(start) or not grid.is_free(goal) or goal in blocked:
        raise NoPath(f"{start} -> {goal}")
    if start == goal:
        return [start]
    cells = grid.cells
    h, w = grid.height, grid.width
    gr, gc = goal
    g_cost = {start: 0}
    parent: dict[Cell, Cell] = {}
    counter = 0
    heap = [(abs(start[0] - gr) + abs(start[1] - gc), counter, start)]
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while cur in parent:
                cur = parent[cur]
                path.append(cur)
            return path[::-1]
        closed.add(cur)
        g_next = g_cost[cur] + 1
        r, c = cur
        for dr, dc in _EXPAND:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w) or cells[nr, nc]:
                continue
            nb = (nr, nc)
            if nb in blocked or nb in closed:
                continue
            if g_next < g_cost.get(nb, 1 << 60):
                g_cost[nb] = g_next
                parent[nb] = cur
                counter += 1
                heapq.heappush(heap, (g_next + abs(nr - gr) + abs(nc - gc), counter, nb))
    raise NoPath(f"{start} -> {goal}")


def reference_path(grid: GridMap, start: Cell, goal: Cell) -> list[Cell]:
    """The static route an agent is penalised for leaving: A* ignoring every
    other entity."""
    return astar(grid, start, goal)


@dataclass
class LraAgent:
    pos: Cell
    goal: Cell
    plan: list[Cell] = field(default_factory=list)
    rng: np.random.Generator | None = None


def draw_goal(grid: GridMap, pos: Cell, rng: np.random.Generator, free=None) -> Cell:
    free = free if free is not None else grid.free_cells()
    while True:
        cand = free[int(rng.integers(len(free)))]
        if cand != pos or len(free) == 1:
            return cand


def lra_step(grid: GridMap, agent: LraAgent, occupied, free=None) -> Action:
    """Advance `agent` one step and return the action taken.

    Replans around `occupied` only when the plan is empty or its next cell is
    taken; if no route exists this step the agent stays (and, when the goal
    cell itself is occupied, picks a new goal for the next step). Arriving at the goal
    draws a fresh uniformly random free goal from ``agent.rng``.
    """
    occupied = set(occupied)
    occupied.discard(agent.pos)
    if len(agent.plan) < 2 or agent.plan[1] in occupied:
        if agent.pos == agent.goal:
            agent.goal = draw_goal(grid, agent.pos, agent.rng, free)
        try:
            agent.plan = astar(grid, agent.pos, agent.goal, blocked=occupied)
        except NoPath:
            agent.plan = []
            if agent.goal in occupied:
                # a parked entity would otherwise pin this obstacle forever
                agent.goal = draw_goal(grid, agent.pos, agent.rng, free)
            return Action.STAY
        if len(agent.plan) < 2:
            return Action.STAY
    nxt = agent.plan[1]
    act = action_between(agent.pos, nxt)
    agent.pos = nxt
    agent.plan = agent.plan[1:]
    if agent.pos == agent.goal:
        agent.goal = draw_goal(grid, agent.pos, agent.rng, free)
        agent.plan = []
    return act
