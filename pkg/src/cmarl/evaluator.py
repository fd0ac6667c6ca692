"""Greedy-policy evaluation, error statistics, and experiment protocols.

Evaluation runs fully greedy (no exploration) episodes in eval mode, so
an agent terminates only by oscillating at the finest scale or hitting
the step cap. Start positions are seeded per (volume, episode index) so
different methods evaluated with the same seed share identical starts.

Experiment kinds map agents onto landmarks:
  multi_landmark          one agent per distinct landmark
  ensemble_same_landmark  k agents on one landmark, final positions averaged
  hybrid                  two dedicated agents per landmark
  single_agent_baseline   independent 1-agent runs, one per landmark
  collab_baseline         multi_landmark shape with communication disabled
"""

from __future__ import annotations

import csv
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import environment as env
from . import qnet
from .errors import ConfigMismatch, EmptyInput, UnknownLandmark
from .qnet import NetConfig, QNetParams
from .rng import Rng, derive_seed
from .volume_io import DatasetSplit, Volume3D

EXPERIMENT_KINDS = ("multi_landmark", "ensemble_same_landmark", "hybrid",
                    "single_agent_baseline", "collab_baseline")

RESULTS_FIELDS = ("experiment", "landmark", "volume_id", "agent",
                  "final_x", "final_y", "final_z", "error_mm", "steps",
                  "cause")
SUMMARY_FIELDS = ("experiment", "landmark", "n", "mean_mm", "std_mm",
                  "median_mm", "max_mm")


@dataclass
class AgentResult:
    agent: int
    target: str
    final_position: np.ndarray
    error_mm: float
    steps: int
    cause: str


@dataclass
class EnsembleResult:
    target: str
    position: np.ndarray      # mean of member final positions
    error_mm: float
    members: list


@dataclass
class EpisodeReport:
    volume_id: str
    agents: list
    ensembles: dict = field(default_factory=dict)  # target -> EnsembleResult


@dataclass
class SummaryRow:
    landmark: str
    n: int
    mean_mm: float
    std_mm: float      # population (divide by n)
    median_mm: float
    max_mm: float


def episode_seed(eval_seed: int, volume_id: str, episode_idx: int) -> int:
    """Fixed start seed per (volume, episode index)."""
    digest = hashlib.blake2b(str(volume_id).encode("utf-8"),
                             digest_size=8).digest()
    return derive_seed(eval_seed, int.from_bytes(digest, "little"),
                       episode_idx)


def run_episode(params: QNetParams, volume: Volume3D, targets: list[str],
                env_cfg: env.EnvConfig, net_cfg: NetConfig,
                episode_seed: int = 0, volume_id: str = "") -> EpisodeReport:
    """One greedy episode; reports per-agent errors and ensemble positions.

    Landmarks shared by several agents get an ensemble entry whose
    position is the arithmetic mean of the members' final positions.
    """
    for t in targets:
        if t not in volume.landmarks:
            raise UnknownLandmark(f"landmark {t!r} not annotated on volume")
    if len(targets) != net_cfg.n_agents:
        raise ConfigMismatch(
            f"{len(targets)} targets for a {net_cfg.n_agents}-agent network")

    rng = Rng(episode_seed)
    states = env.reset(volume, list(targets), env_cfg, rng)
    step_count = 0
    while not env.episode_done(states, step_count, env_cfg):
        obs = np.stack([env.observation(s) for s in states])[None]
        q, _ = qnet.forward(params, net_cfg, obs)
        actions = np.argmax(q[0], axis=-1)
        env.step(states, actions, volume, env_cfg, mode="eval")
        step_count += 1

    spacing = volume.meta.spacing_mm
    agents = []
    for i, s in enumerate(states):
        cause = s.cause if s.terminal else env.CAUSE_STEP_CAP
        target_pos = volume.landmarks[s.target]
        agents.append(AgentResult(
            agent=i,
            target=s.target,
            final_position=s.position.astype(np.float64),
            error_mm=env.distance_mm(s.position, target_pos, spacing),
            steps=s.steps,
            cause=cause,
        ))

    ensembles = {}
    by_target: dict[str, list[int]] = {}
    for i, s in enumerate(states):
        by_target.setdefault(s.target, []).append(i)
    for target, members in by_target.items():
        if len(members) < 2:
            continue
        mean_pos = np.mean([agents[i].final_position for i in members], axis=0)
        ensembles[target] = EnsembleResult(
            target=target,
            position=mean_pos,
            error_mm=env.distance_mm(mean_pos, volume.landmarks[target],
                                     spacing),
            members=list(members),
        )
    return EpisodeReport(volume_id=volume_id, agents=agents,
                         ensembles=ensembles)


def summarize(reports: list[EpisodeReport]) -> list[SummaryRow]:
    """Per-landmark error statistics over episodes; ensemble rows get a
    "/ensemble" suffix. Permutation-invariant over the report list."""
    if not reports:
        raise EmptyInput("no episode reports to summarize")
    groups: dict[str, list[float]] = {}
    for rep in reports:
        for a in rep.agents:
            groups.setdefault(a.target, []).append(a.error_mm)
        for target, ens in rep.ensembles.items():
            groups.setdefault(target + "/ensemble", []).append(ens.error_mm)
    rows = []
    for landmark in sorted(groups):
        errs = np.asarray(groups[landmark], dtype=np.float64)
        rows.append(SummaryRow(
            landmark=landmark,
            n=len(errs),
            mean_mm=float(errs.mean()),
            std_mm=float(errs.std()),     # population std
            median_mm=float(np.median(errs)),
            max_mm=float(errs.max()),
        ))
    return rows


def build_agent_map(kind: str, landmarks: list[str],
                    n_agents: int | None = None) -> list[str]:
    """Target landmark per agent index for an experiment kind."""
    if kind not in EXPERIMENT_KINDS:
        raise ValueError(f"unknown experiment kind {kind!r}")
    if not landmarks:
        raise ValueError("experiment needs at least one landmark")
    if kind in ("multi_landmark", "collab_baseline"):
        return list(landmarks)
    if kind == "ensemble_same_landmark":
        if len(landmarks) != 1:
            raise ValueError("ensemble_same_landmark takes exactly one landmark")
        if not n_agents or n_agents < 2:
            raise ValueError("ensemble_same_landmark needs n_agents >= 2")
        return [landmarks[0]] * n_agents
    if kind == "hybrid":
        return [name for name in landmarks for _ in range(2)]
    # single_agent_baseline: one independent map per landmark
    raise ValueError("single_agent_baseline runs one map per landmark; "
                     "use build_agent_map('multi_landmark', [name])")


def _worker_count(n_jobs: int) -> int:
    raw = os.environ.get("CMARL_THREADS", "1")
    try:
        cap = max(1, int(raw))
    except ValueError:
        cap = 1
    return max(1, min(cap, n_jobs))


@dataclass
class ExperimentResult:
    kind: str
    reports: list
    summary: list
    results_rows: list = field(default_factory=list)
    summary_rows: list = field(default_factory=list)


def evaluate_split(kind: str, params: QNetParams, volumes: dict,
                   volume_ids: list, targets: list[str],
                   env_cfg: env.EnvConfig, net_cfg: NetConfig,
                   eval_seed: int = 0,
                   episodes_per_volume: int = 1) -> ExperimentResult:
    """Greedy sweep of one agent-landmark map over a list of volumes.

    Episodes are independent; CMARL_THREADS caps how many run at once.
    Results are merged in (volume, episode) order regardless of worker
    count.
    """
    jobs = [(vid, ep) for vid in volume_ids
            for ep in range(episodes_per_volume)]

    def one(job):
        vid, ep = job
        return run_episode(params, volumes[vid], targets, env_cfg, net_cfg,
                           episode_seed=episode_seed(eval_seed, vid, ep),
                           volume_id=str(vid))

    workers = _worker_count(len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, jobs))
    else:
        reports = [one(job) for job in jobs]

    summary = summarize(reports)
    result = ExperimentResult(kind=kind, reports=reports, summary=summary)
    result.results_rows = results_csv_rows(kind, reports)
    result.summary_rows = summary_csv_rows(kind, summary)
    return result


def run_experiment(kind: str, volumes: dict, split: DatasetSplit,
                   landmarks: list[str], env_cfg: env.EnvConfig,
                   net_cfg: NetConfig, params: QNetParams | None = None,
                   train_cfg=None, eval_seed: int = 0,
                   episodes_per_volume: int = 1) -> ExperimentResult:
    """Configure the agent-landmark map for ``kind`` and evaluate it on
    the test split; trains first when given a train config instead of
    parameters."""
    if kind == "single_agent_baseline":
        merged = ExperimentResult(kind=kind, reports=[], summary=[])
        for name in landmarks:
            sub_net = NetConfig(**{**net_cfg.__dict__, "n_agents": 1})
            sub = run_experiment("multi_landmark", volumes, split, [name],
                                 env_cfg, sub_net, params=params,
                                 train_cfg=train_cfg, eval_seed=eval_seed,
                                 episodes_per_volume=episodes_per_volume)
            merged.reports.extend(sub.reports)
        merged.summary = summarize(merged.reports)
        merged.results_rows = results_csv_rows(kind, merged.reports)
        merged.summary_rows = summary_csv_rows(kind, merged.summary)
        return merged

    targets = build_agent_map(kind, landmarks, n_agents=net_cfg.n_agents)
    if kind == "collab_baseline" and net_cfg.comm_enabled:
        raise ConfigMismatch("collab_baseline requires comm_enabled=false")
    if len(targets) != net_cfg.n_agents:
        raise ConfigMismatch(
            f"map of {len(targets)} agents vs n_agents={net_cfg.n_agents}")

    if params is None:
        if train_cfg is None:
            raise ValueError("need params or a train config")
        from .trainer import TrainRun, train  # circular-safe local import

        run = TrainRun(volumes=volumes, split=split, targets=targets,
                       env=env_cfg, net=net_cfg, train=train_cfg,
                       eval_seed=eval_seed)
        params = train(run).best_params

    return evaluate_split(kind, params, volumes, list(split.test), targets,
                          env_cfg, net_cfg, eval_seed=eval_seed,
                          episodes_per_volume=episodes_per_volume)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def results_csv_rows(kind: str, reports: list) -> list[dict]:
    rows = []
    for rep in reports:
        for a in rep.agents:
            rows.append({
                "experiment": kind,
                "landmark": a.target,
                "volume_id": rep.volume_id,
                "agent": a.agent,
                "final_x": f"{a.final_position[0]:.3f}",
                "final_y": f"{a.final_position[1]:.3f}",
                "final_z": f"{a.final_position[2]:.3f}",
                "error_mm": f"{a.error_mm:.6f}",
                "steps": a.steps,
                "cause": a.cause,
            })
        for target in sorted(rep.ensembles):
            ens = rep.ensembles[target]
            rows.append({
                "experiment": kind,
                "landmark": target,
                "volume_id": rep.volume_id,
                "agent": "ensemble",
                "final_x": f"{ens.position[0]:.3f}",
                "final_y": f"{ens.position[1]:.3f}",
                "final_z": f"{ens.position[2]:.3f}",
                "error_mm": f"{ens.error_mm:.6f}",
                "steps": "",
                "cause": "",
            })
    return rows


def summary_csv_rows(kind: str, summary: list) -> list[dict]:
    return [{
        "experiment": kind,
        "landmark": row.landmark,
        "n": row.n,
        "mean_mm": f"{row.mean_mm:.6f}",
        "std_mm": f"{row.std_mm:.6f}",
        "median_mm": f"{row.median_mm:.6f}",
        "max_mm": f"{row.max_mm:.6f}",
    } for row in summary]


def write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
