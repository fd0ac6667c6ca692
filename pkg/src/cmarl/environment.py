"""Partially observable search environment over a 3D volume.

Each agent occupies an integer voxel position, observes a strided cube of
samples (ROI) centered on itself with a 4-frame history, and moves along
one of the six axis directions. Step size and ROI spacing shrink through
the configured scales when the agent oscillates; rewards are clipped
distance deltas toward the agent's target landmark.

Action ids: 0:+x 1:-x 2:+y 3:-y 4:+z 5:-z.

Observations are a pure function of (position, scale, volume): the target
landmark is read only for rewards and termination bookkeeping, never to
build observations, so greedy evaluation cannot leak target information
through the state.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import AllAgentsTerminal, UnknownLandmark, VolumeTooSmall
from .rng import Rng
from .volume_io import Volume3D

N_ACTIONS = 6

ACTION_DELTAS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.int64)

CAUSE_OSCILLATION = "oscillation"
CAUSE_FOUND = "found"
CAUSE_STEP_CAP = "step_cap"


@dataclass
class EnvConfig:
    roi_size: int = 45            # odd, voxels per ROI side
    history_len: int = 4
    scales_mm: tuple[int, ...] = (3, 2, 1)   # strictly descending
    max_steps: int = 200
    start_inner_fraction: float = 0.8
    osc_window: int = 20
    osc_repeat: int = 4
    found_radius_mm: float = 1.0

    def validate(self) -> None:
        if self.roi_size < 1 or self.roi_size % 2 == 0:
            raise ValueError(f"roi_size must be odd and positive, got {self.roi_size}")
        if self.history_len < 1 or self.max_steps < 1:
            raise ValueError("history_len and max_steps must be positive")
        scales = tuple(self.scales_mm)
        if not scales or any(s2 >= s1 for s1, s2 in zip(scales, scales[1:])):
            raise ValueError(f"scales_mm must be strictly descending, got {scales}")
        if scales[-1] < 1:
            raise ValueError("finest scale must be >= 1")
        if not 0.0 < self.start_inner_fraction <= 1.0:
            raise ValueError("start_inner_fraction must be in (0, 1]")
        if self.osc_window < 1 or self.osc_repeat < 1:
            raise ValueError("oscillation parameters must be positive")
        if self.found_radius_mm <= 0.0:
            raise ValueError("found_radius_mm must be positive")


@dataclass
class AgentState:
    position: np.ndarray          # int64 voxel coords, always in bounds
    scale_index: int
    history: deque                # newest last, always history_len deep
    trace: deque                  # positions at the current scale
    terminal: bool
    target: str
    steps: int = 0                # live steps taken by this agent
    cause: str | None = None      # set when terminal


@dataclass
class StepOutcome:
    obs: np.ndarray               # (history_len, roi, roi, roi) float32
    reward: float                 # clipped to [-1, 1]
    terminal: bool
    scale_changed: bool


def start_bounds(dim: int, fraction: float) -> tuple[int, int]:
    """Inclusive start-coordinate range on one axis.

    The margin is floor(((1 - fraction) / 2) * dim) on each side, e.g.
    dim 64 at fraction 0.8 gives [6, 57].
    """
    margin = int(np.floor((1.0 - fraction) / 2.0 * dim))
    return margin, dim - 1 - margin


def distance_mm(pos, target, spacing) -> float:
    d = (np.asarray(pos, dtype=np.float64) - np.asarray(target, dtype=np.float64)) \
        * np.asarray(spacing, dtype=np.float64)
    return float(np.sqrt((d * d).sum()))


def extract_roi(volume: Volume3D, center, scale_mm: int, roi_size: int) -> np.ndarray:
    """Sample a roi_size^3 cube at stride scale_mm voxels around center.

    Offsets run -(r-1)/2*s .. +(r-1)/2*s per axis; samples outside the
    volume are zero.
    """
    half = (roi_size - 1) // 2
    offsets = (np.arange(roi_size, dtype=np.int64) - half) * int(scale_mm)
    out_axes = []
    masks = []
    for axis in range(3):
        idx = int(center[axis]) + offsets
        valid = (idx >= 0) & (idx < volume.meta.dims[axis])
        out_axes.append(np.clip(idx, 0, volume.meta.dims[axis] - 1))
        masks.append(valid)
    roi = volume.voxels[np.ix_(out_axes[0], out_axes[1], out_axes[2])]
    mask = (masks[0][:, None, None] & masks[1][None, :, None]
            & masks[2][None, None, :])
    return np.where(mask, roi, np.float32(0.0)).astype(np.float32, copy=False)


def reset(volume: Volume3D, targets: list[str], cfg: EnvConfig,
          rng: Rng) -> list[AgentState]:
    """Spawn one agent per target at a random start in the inner region.

    History is filled with history_len copies of the initial ROI.
    """
    cfg.validate()
    if not targets:
        raise ValueError("need at least one agent target")
    for t in targets:
        if t not in volume.landmarks:
            raise UnknownLandmark(f"landmark {t!r} not annotated on volume")
    if min(volume.meta.dims) < cfg.roi_size:
        raise VolumeTooSmall(
            f"volume dims {volume.meta.dims} cannot contain a "
            f"{cfg.roi_size}^3 ROI at the finest scale")

    bounds = [start_bounds(volume.meta.dims[a], cfg.start_inner_fraction)
              for a in range(3)]
    states = []
    for target in targets:
        pos = np.array([lo + rng.randrange(hi - lo + 1) for lo, hi in bounds],
                       dtype=np.int64)
        roi = extract_roi(volume, pos, cfg.scales_mm[0], cfg.roi_size)
        history = deque(maxlen=cfg.history_len)
        for _ in range(cfg.history_len):
            history.append(roi)
        trace = deque(maxlen=cfg.osc_window)
        trace.append(tuple(int(c) for c in pos))
        states.append(AgentState(position=pos, scale_index=0, history=history,
                                 trace=trace, terminal=False, target=target))
    return states


def observation(state: AgentState) -> np.ndarray:
    """Stack the ROI history, oldest frame first."""
    return np.stack(state.history, axis=0)


def apply_action(state: AgentState, action: int, volume: Volume3D,
                 cfg: EnvConfig) -> np.ndarray:
    """New position after one move; out-of-bounds moves clamp to the edge."""
    step_voxels = int(cfg.scales_mm[state.scale_index])
    pos = state.position + ACTION_DELTAS[action] * step_voxels
    hi = np.asarray(volume.meta.dims, dtype=np.int64) - 1
    return np.clip(pos, 0, hi)


def reward(d_prev: float, d_curr: float) -> float:
    return float(np.clip(d_prev - d_curr, -1.0, 1.0))


def detect_oscillation(trace, cfg: EnvConfig) -> bool:
    """Current position seen >= osc_repeat times in the trace window."""
    if len(trace) < cfg.osc_repeat:
        return False
    current = trace[-1]
    return sum(1 for p in trace if p == current) >= cfg.osc_repeat


def _mode_position(trace) -> np.ndarray:
    """Most frequently visited position; ties go to the most recent."""
    counts: dict[tuple, int] = {}
    last_seen: dict[tuple, int] = {}
    for i, p in enumerate(trace):
        counts[p] = counts.get(p, 0) + 1
        last_seen[p] = i
    best = max(counts.items(), key=lambda kv: (kv[1], last_seen[kv[0]]))
    return np.asarray(best[0], dtype=np.int64)


def step(states: list[AgentState], actions, volume: Volume3D,
         cfg: EnvConfig, mode: str = "train") -> list[StepOutcome]:
    """Advance every live agent one move.

    Mutates the AgentState objects. Terminal agents are frozen: they keep
    their state and get a zero-reward outcome. Oscillation below the
    finest scale drops to the next scale and clears the trace; at the
    finest scale it terminates the agent at the most-visited trace
    position. In train mode an agent also terminates on reaching within
    found_radius_mm of its target at the finest scale.
    """
    if len(states) != len(actions):
        raise ValueError(f"{len(states)} states vs {len(actions)} actions")
    if all(s.terminal for s in states):
        raise AllAgentsTerminal("no live agent to step")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    spacing = volume.meta.spacing_mm
    finest = len(cfg.scales_mm) - 1
    outcomes = []
    for state, action in zip(states, actions):
        if state.terminal:
            outcomes.append(StepOutcome(obs=observation(state), reward=0.0,
                                        terminal=True, scale_changed=False))
            continue

        target = volume.landmarks[state.target]
        d_prev = distance_mm(state.position, target, spacing)
        state.position = apply_action(state, int(action), volume, cfg)
        d_curr = distance_mm(state.position, target, spacing)
        r = reward(d_prev, d_curr)

        roi = extract_roi(volume, state.position,
                          cfg.scales_mm[state.scale_index], cfg.roi_size)
        state.history.append(roi)
        state.trace.append(tuple(int(c) for c in state.position))
        state.steps += 1

        scale_changed = False
        if detect_oscillation(state.trace, cfg):
            if state.scale_index < finest:
                state.scale_index += 1
                state.trace.clear()
                state.trace.append(tuple(int(c) for c in state.position))
                scale_changed = True
            else:
                state.position = _mode_position(state.trace)
                state.terminal = True
                state.cause = CAUSE_OSCILLATION
        if (not state.terminal and mode == "train"
                and state.scale_index == finest
                and d_curr <= cfg.found_radius_mm):
            state.terminal = True
            state.cause = CAUSE_FOUND

        outcomes.append(StepOutcome(obs=observation(state), reward=r,
                                    terminal=state.terminal,
                                    scale_changed=scale_changed))
    return outcomes


def episode_done(states: list[AgentState], step_count: int,
                 cfg: EnvConfig) -> bool:
    return all(s.terminal for s in states) or step_count >= cfg.max_steps
