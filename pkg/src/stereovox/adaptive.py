"""Early-exit controller: pick the decode depth for each frame from what the
previous frame saw in the region in front of the robot."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .macs import count_macs


def default_front_region(resolution: int) -> tuple[slice, slice, slice]:
    """Central half in x, full height, nearest half in z."""
    q = resolution // 4
    return slice(q, resolution - q), slice(0, resolution), slice(0, resolution // 2)


@dataclass
class ExitState:
    n_levels: int
    level: int = 0
    t: int = 0
    threshold: float = 0.5
    regions: dict = field(default_factory=dict)  # resolution -> index box override

    def __post_init__(self):
        if self.level == 0:
            self.level = self.n_levels
        self.level = int(np.clip(self.level, 1, self.n_levels))

    def region(self, resolution: int):
        return self.regions.get(resolution) or default_front_region(resolution)

    def front_occupied(self, grid) -> int:
        g = np.asarray(grid)
        box = self.region(g.shape[-1])
        return int(np.count_nonzero(g[box] >= self.threshold))


def next_exit_level(state: ExitState, prev_levels) -> int:
    """Step the exit level given the previous frame's per-level outputs.

    Lowers the level by one when the previous exit level saw nothing in the
    front region, raises it by one otherwise, clamped to [1, n_levels].
    """
    i = state.level
    if len(prev_levels) < i:
        raise ValueError(f"previous output has {len(prev_levels)} levels, need {i}")
    occupied = state.front_occupied(prev_levels[i - 1])
    nxt = i - 1 if occupied == 0 else i + 1
    return int(min(max(nxt, 1), state.n_levels))


def decode_to_level(model, latent, level: int, gt_levels=None):
    """Decode only through ``level``; returns the DecodeResult of the truncated run."""
    n = model.cfg.decoder.n_levels
    if not 1 <= level <= n:
        raise ValueError(f"level {level} outside [1, {n}]")
    return model.decode(latent, gt_levels=gt_levels, max_level=level)


def run_controller(model, latents, state: ExitState | None = None, trace_path=None):
    """Run the early-exit loop over a sequence of per-frame latents (each (1, n_latent)).

    Returns the trace rows (t, exit_level, front_occupied, decoder_macs).
    """
    import torch

    state = state or ExitState(model.cfg.decoder.n_levels)
    rows = []
    with torch.no_grad():
        for t, z in enumerate(latents):
            level = state.level
            res = decode_to_level(model, z, level)
            grids = [p[0].numpy() for p in res.probs]
            macs = count_macs(model.cfg, res, batch_size=z.shape[0])["decoder"]
            occ = state.front_occupied(grids[level - 1])
            rows.append({"t": t, "exit_level": level, "front_occupied": occ, "decoder_macs": macs})
            state.level = next_exit_level(state, grids)
            state.t = t + 1
    if trace_path is not None:
        write_trace(trace_path, rows)
    return rows


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["t", "exit_level", "front_occupied", "decoder_macs"])
        w.writeheader()
        w.writerows(rows)
