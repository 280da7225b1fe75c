"""Multi-agent grid world with roaming dynamic obstacles.

Entities live on a static :class:`GridMap`. Each step the dynamic obstacles
move first (LRA*, each treating every other entity as a temporary obstacle),
then the agents' joint action is resolved simultaneously:

* moves into walls, off the map or onto a dynamic obstacle are cancelled;
* several agents aiming at one cell: the lowest id moves, the rest stay;
* two agents swapping cells both stay;
* moving onto an agent that ends up staying is cancelled;

every cancelled move is flagged as a collision. An agent that reaches its goal
is done, keeps its cell for the rest of the episode and is rewarded once.

Rewards are ``step_penalty + goal_reward*reached + collision_penalty*collided
- deviation_weight * offroute_distance``, where the off-route distance is the
Manhattan distance to the agent's static A* reference path.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import EpisodeFinished, InsufficientFreeCells, InvalidActionIndex
from .grid import MOVES, N_ACTIONS, Action, GridMap, load_map  # noqa: F401
from .planning import LraAgent, lra_step, reference_path

FOV = 11
N_CHANNELS = 4


class InitMode(str, Enum):
    UNIFORM = "uniform"
    CLUSTERED = "clustered"


@dataclass(frozen=True)
class RewardConfig:
    step_penalty: float = -0.01
    goal_reward: float = 10.0
    collision_penalty: float = -0.1
    deviation_weight: float = 0.3
    discount: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if self.deviation_weight < 0:
            raise ValueError("deviation_weight must be >= 0")


@dataclass
class StepResult:
    rewards: np.ndarray
    dones: np.ndarray
    collisions: np.ndarray
    all_done: bool
    # reward split into step / goal / collision / deviation terms
    components: dict = field(default_factory=dict)
    # agents that were still live when the step began
    live: np.ndarray | None = None


def free_regions(grid: GridMap) -> np.ndarray:
    """Label array of 4-connected free regions (0 on obstacles)."""
    labels, _ = ndimage.label(~grid.cells)
    return labels


class GridWorld:
    """Mutable episode state. Build with :func:`reset`."""

    def __init__(self, grid, agent_pos, agent_goals, dyn, ref_paths, rewards, max_steps, rng):
        self.grid = grid
        self.pos = np.asarray(agent_pos, dtype=np.int64).reshape(-1, 2)
        self.goals = np.asarray(agent_goals, dtype=np.int64).reshape(-1, 2)
        self.done = np.zeros(len(self.pos), dtype=bool)
        self.dyn: list[LraAgent] = dyn
        self.ref_paths = ref_paths
        self.rewards = rewards
        self.max_steps = max_steps
        self.rng = rng
        self.t = 0
        self._free = grid.free_cells()
        self._offroute = np.stack([_path_distance_field(grid.shape, p) for p in ref_paths]) if ref_paths else np.zeros((0,) + grid.shape)
        # observation planes, padded by the window radius so every window is a slice
        rad = FOV // 2
        self._layers = np.zeros((3, grid.height + 2 * rad, grid.width + 2 * rad), dtype=np.float32)
        self._layers[0] = np.pad(grid.cells.astype(np.float32), rad, constant_values=1.0)
        # path planes hold each cell's index along the reference path (-1 off
        # the path); _anchor is the index of the path cell nearest to every
        # grid cell, so channel 3 can show only the stretch still ahead
        self._paths = np.full((len(ref_paths),) + self._layers.shape[1:], -1, dtype=np.int32)
        self._anchor = np.zeros((len(ref_paths),) + grid.shape, dtype=np.int32)
        for i, p in enumerate(ref_paths):
            rr, cc = zip(*p)
            self._paths[i, np.add(rr, rad), np.add(cc, rad)] = np.arange(len(p))
            self._anchor[i] = _nearest_path_index(grid.shape, p)

    @property
    def n_agents(self) -> int:
        return len(self.pos)

    @property
    def all_done(self) -> bool:
        return bool(self.done.all())

    @property
    def finished(self) -> bool:
        return self.all_done or self.t >= self.max_steps

    def dyn_positions(self) -> np.ndarray:
        if not self.dyn:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array([d.pos for d in self.dyn], dtype=np.int64)

    def offroute_distance(self, agent_id: int) -> int:
        r, c = self.pos[agent_id]
        return int(self._offroute[agent_id, r, c])

    def step(self, actions) -> StepResult:
        if self.finished:
            raise EpisodeFinished("episode already finished")
        acts = np.asarray(actions).reshape(-1)
        if len(acts) != self.n_agents:
            raise InvalidActionIndex(f"expected {self.n_agents} actions, got {len(acts)}")
        for i, a in enumerate(acts):
            if not (0 <= int(a) < N_ACTIONS) or int(a) != a:
                raise InvalidActionIndex(f"agent {i}: action {a!r}")
        acts = acts.astype(np.int64)
        grid = self.grid

        # (1) dynamic obstacles, in id order, against the live occupancy
        occupied = {tuple(p) for p in self.pos.tolist()} | {d.pos for d in self.dyn}
        for d in self.dyn:
            occupied.discard(d.pos)
            lra_step(grid, d, occupied, self._free)
            occupied.add(d.pos)
        dyn_cells = {d.pos for d in self.dyn}

        live = ~self.done
        n = self.n_agents
        acts = np.where(live, acts, Action.STAY)
        cur = [tuple(p) for p in self.pos.tolist()]
        target = [(r + int(MOVES[a][0]), c + int(MOVES[a][1])) for (r, c), a in zip(cur, acts)]
        collided = np.zeros(n, dtype=bool)

        # (2) walls, bounds, dynamic obstacles
        for i in range(n):
            if target[i] != cur[i] and (not grid.is_free(target[i]) or target[i] in dyn_cells):
                target[i] = cur[i]
                collided[i] = True

        # (3)-(4) agent/agent conflicts, to a fixed point
        changed = True
        while changed:
            changed = False
            claims: dict = {}
            for i in range(n):
                claims.setdefault(target[i], []).append(i)
            for cell, ids in claims.items():
                if len(ids) < 2:
                    continue
                stayers = [i for i in ids if target[i] == cur[i]]
                keep = stayers[0] if stayers else min(ids)
                for i in ids:
                    if i != keep and target[i] != cur[i]:
                        target[i] = cur[i]
                        collided[i] = True
                        changed = True
            where = {c: i for i, c in enumerate(cur)}
            for i in range(n):
                if target[i] == cur[i]:
                    continue
                j = where.get(target[i])
                if j is not None and j != i and target[j] == cur[i]:
                    target[i], target[j] = cur[i], cur[j]
                    collided[i] = collided[j] = True
                    changed = True

        self.pos = np.array(target, dtype=np.int64).reshape(-1, 2)
        self.t += 1

        # (5) goals
        at_goal = np.all(self.pos == self.goals, axis=1)
        reached = live & at_goal
        self.done = self.done | reached

        # (6) rewards for agents live at the start of the step
        rc = self.rewards
        dev = np.array([self.offroute_distance(i) for i in range(n)], dtype=np.float64)
        comp = {
            "step": np.where(live, rc.step_penalty, 0.0),
            "goal": np.where(reached, rc.goal_reward, 0.0),
            "collision": np.where(live & collided, rc.collision_penalty, 0.0),
            "deviation": np.where(live, -rc.deviation_weight * dev, 0.0),
        }
        rewards = comp["step"] + comp["goal"] + comp["collision"] + comp["deviation"]
        return StepResult(
            rewards=rewards,
            dones=self.done.copy(),
            collisions=collided & live,
            all_done=self.all_done,
            components=comp,
            live=live,
        )

    # observations -------------------------------------------------------
    def observe(self, agent_id: int) -> np.ndarray:
        return self.observe_all()[agent_id]

    def observe_all(self) -> np.ndarray:
        """Egocentric ``[n, 4, FOV, FOV]`` windows for every agent.

        Channels: static obstacles (off-map counts as obstacle), other agents,
        dynamic obstacles, and the part of the agent's reference path from
        its nearest path cell onward plus the goal clipped onto the window
        border. Dropping the stretch already behind the agent tells the two
        ends of a path apart.
        """
        rad = FOV // 2
        n = self.n_agents
        layers = self._layers
        layers[1:] = 0.0
        layers[1, self.pos[:, 0] + rad, self.pos[:, 1] + rad] = 1.0
        dp = self.dyn_positions()
        if len(dp):
            layers[2, dp[:, 0] + rad, dp[:, 1] + rad] = 1.0
        r, c = self.pos[:, 0], self.pos[:, 1]
        out = np.empty((n, N_CHANNELS, FOV, FOV), dtype=np.float32)
        out[:, :3] = sliding_window_view(layers, (FOV, FOV), axis=(1, 2))[:, r, c].transpose(1, 0, 2, 3)
        ids = np.arange(n)
        ahead = sliding_window_view(self._paths, (FOV, FOV), axis=(1, 2))[ids, r, c]
        out[:, 3] = ahead >= self._anchor[ids, r, c][:, None, None]
        out[:, 1, rad, rad] = 0.0
        gr = np.clip(self.goals[:, 0] - r, -rad, rad) + rad
        gc = np.clip(self.goals[:, 1] - c, -rad, rad) + rad
        out[ids, 3, gr, gc] = 1.0
        return out

    # tracing ------------------------------------------------------------
    def render_frame(self) -> str:
        rows = [["#" if v else "." for v in row] for row in self.grid.cells]
        for (r, c) in self.goals.tolist():
            rows[r][c] = "g"
        for d in self.dyn:
            rows[d.pos[0]][d.pos[1]] = "d"
        for i, (r, c) in enumerate(self.pos.tolist()):
            rows[r][c] = "A" if self.done[i] else "a"
        return "\n".join("".join(r) for r in rows)

    def state_bytes(self) -> bytes:
        return (
            self.pos.astype("<i8").tobytes()
            + self.dyn_positions().astype("<i8").tobytes()
            + self.done.tobytes()
            + np.int64(self.t).tobytes()
        )

    def state_hash(self) -> str:
        return hashlib.sha256(self.state_bytes()).hexdigest()


def _path_distance_field(shape, path) -> np.ndarray:
    """Manhattan distance from every cell to the nearest path cell."""
    h, w = shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = np.asarray(path)
    d = np.abs(rr[..., None] - pts[:, 0]) + np.abs(cc[..., None] - pts[:, 1])
    return d.min(axis=-1)


def _nearest_path_index(shape, path) -> np.ndarray:
    """Index of the path cell nearest (Manhattan) to every cell; ties go to
    the later index."""
    h, w = shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = np.asarray(path)[::-1]
    d = np.abs(rr[..., None] - pts[:, 0]) + np.abs(cc[..., None] - pts[:, 1])
    return (len(pts) - 1 - d.argmin(axis=-1)).astype(np.int32)


def default_max_steps(grid: GridMap) -> int:
    return 4 * (grid.height + grid.width)


def _take(rng, candidates, used):
    # re-sample on collision with an already placed entity
    while True:
        cell = candidates[int(rng.integers(len(candidates)))]
        if cell not in used:
            return cell


def reset(
    grid: GridMap,
    n_agents: int,
    n_dyn: int = 0,
    init_mode: InitMode | str = InitMode.UNIFORM,
    seed: int = 0,
    rewards: RewardConfig | None = None,
    max_steps: int | None = None,
) -> GridWorld:
    """Place agents, goals and dynamic obstacles for a new episode.

    Agent starts and goals are pairwise distinct (so no agent starts on any
    goal), each goal lies in its agent's connected region, and dynamic
    obstacles start on the remaining cells. With ``clustered`` the agent
    starts come from the central third of the map in each dimension.
    """
    init_mode = InitMode(init_mode)
    rng = np.random.default_rng(seed)
    free = grid.free_cells()
    if 2 * n_agents + n_dyn > len(free):
        raise InsufficientFreeCells(
            f"{len(free)} free cells for {n_agents} agents (start+goal) and {n_dyn} dynamic obstacles"
        )
    if init_mode is InitMode.CLUSTERED:
        h, w = grid.shape
        bh, bw = -(-h // 3), -(-w // 3)
        r0, c0 = (h - bh) // 2, (w - bw) // 2
        start_pool = [(r, c) for (r, c) in free if r0 <= r < r0 + bh and c0 <= c < c0 + bw]
        if len(start_pool) < n_agents:
            raise InsufficientFreeCells(f"central block has {len(start_pool)} free cells for {n_agents} agents")
    else:
        start_pool = free
    labels = free_regions(grid)
    by_label: dict[int, list] = {}
    for cell in free:
        by_label.setdefault(int(labels[cell]), []).append(cell)

    used: set = set()
    starts, goals = [], []
    for _ in range(n_agents):
        s = _take(rng, start_pool, used)
        used.add(s)
        starts.append(s)
    for s in starts:
        region = by_label[int(labels[s])]
        if all(c in used for c in region):
            raise InsufficientFreeCells(f"no free goal cell reachable from {s}")
        g = _take(rng, region, used)
        used.add(g)
        goals.append(g)
    dyn = []
    for _ in range(n_dyn):
        s = _take(rng, free, used)
        used.add(s)
        g = free[int(rng.integers(len(free)))]
        dyn.append(LraAgent(pos=s, goal=g, rng=rng))
    refs = [reference_path(grid, s, g) for s, g in zip(starts, goals)]
    return GridWorld(
        grid,
        starts,
        goals,
        dyn,
        refs,
        rewards or RewardConfig(),
        max_steps if max_steps is not None else default_max_steps(grid),
        rng,
    )


def success_rate(done) -> float:
    """Fraction of agents that reached their goals."""
    done = np.asarray(done, dtype=bool)
    if done.size == 0:
        raise ValueError("success rate needs at least one agent")
    return float(done.mean())


def trace_text(frames) -> str:
    return "\n\n".join(frames) + "\n"
