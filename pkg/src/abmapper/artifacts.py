"""Run directories, self-describing checkpoints and rendered traces."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import neural as nn
from .config import RunConfig, _fmt, parse_config
from .environment import trace_text
from .errors import CorruptManifest
from .grid import GridMap, load_map
from .models import build_model_sets
from .scenarios import get_bundle
from .training import dims_from, make_world, policy_fn, sample_actions

CONFIG_FILE = "config.txt"
MAP_FILE = "map.txt"


def grid_for(cfg: RunConfig) -> GridMap:
    """The map of a run: ``map_path`` if set, else the scenario's packaged map."""
    if cfg.map_path:
        return load_map(Path(cfg.map_path).read_text(encoding="utf-8"))
    return get_bundle(cfg.scenario).grid()


def save_run_checkpoint(path, cfg: RunConfig, grid: GridMap, sets, episode: int) -> Path:
    """Parameters of every model set plus the config and map needed to
    rebuild them. Prefixes are ``set<k>.actor``, ``set<k>.critic``,
    ``set<k>.target``."""
    meta = {"episode": episode, "n_sets": len(sets), "map": grid.render().rstrip("\n").replace("\n", "/")}
    meta.update({f"cfg.{k}": _fmt(v) for k, v in cfg.to_dict().items()})
    stores = {}
    for k, s in enumerate(sets):
        for role, store in s.stores().items():
            stores[f"set{k}.{role}"] = store
    return nn.save_checkpoint(path, stores, meta)


def load_run_checkpoint(path):
    """Inverse of :func:`save_run_checkpoint`: ``(cfg, grid, sets, meta)``.

    The architecture is rebuilt from the stored config; every stored tensor
    must match it by name and shape.
    """
    stores, meta = nn.load_checkpoint(path)
    try:
        text = "\n".join(f"{k[4:]}={v}" for k, v in meta.items() if k.startswith("cfg."))
        cfg = parse_config(text)
        grid = load_map(meta["map"].replace("/", "\n") + "\n")
        n_sets = int(meta["n_sets"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptManifest(f"{path}: incomplete metadata ({exc})") from exc
    sets = build_model_sets(cfg.mode, cfg.n_agents, np.random.default_rng(0), dims_from(cfg),
                            shared_critic=cfg.shared_critic(), query_from=cfg.query_from)
    if len(sets) != n_sets:
        raise CorruptManifest(f"{path}: {n_sets} model sets stored, mode {cfg.mode} needs {len(sets)}")
    for k, s in enumerate(sets):
        for role, store in s.stores().items():
            key = f"set{k}.{role}"
            if key not in stores:
                raise CorruptManifest(f"{path}: missing parameters for {key}")
            store.set_values(stores[key].values())
    return cfg, grid, sets, meta


def render_trace(cfg: RunConfig, grid: GridMap, sets, seed: int) -> str:
    """Greedy episode on the world seeded by ``seed``, one text frame per step
    (including the initial state)."""
    world = make_world(cfg, grid, seed)
    probs_of = policy_fn(sets)
    frames = [world.render_frame()]
    while not world.finished:
        acts = sample_actions(probs_of(world.observe_all()), None, greedy=True)
        world.step(np.where(world.done, 0, acts))
        frames.append(world.render_frame())
    return trace_text(frames)
