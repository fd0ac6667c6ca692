"""Command-line front end and on-disk run-config / checkpoint formats.

Subcommands:
  generate   write a synthetic RAW3D corpus + landmark JSONs + split manifest
  train      train per the run config, save best checkpoint + log CSV
  eval       evaluate a checkpoint on the test split, write result CSVs
  inspect    print checkpoint metadata and verify its checksum

The run config is one JSON file (schema in README.md). Checkpoints are
binary: magic "CMRLCKPT", u32 version, u64 config-blob length, UTF-8
config blob (JSON carrying the run config, training step, and best
validation error), u64 parameter count, float32 little-endian parameters
in canonical order, and a trailing CRC-64/XZ checksum over all preceding
bytes.

Exit codes: 0 success, 2 invalid config, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import evaluator, qnet, trainer, volume_io
from .environment import EnvConfig
from .errors import (
    ChecksumMismatch,
    CmarlError,
    ConfigMismatch,
    InvalidConfig,
    IoFailure,
    UnsupportedVersion,
)
from .qnet import NetConfig, QNetParams
from .trainer import TrainConfig, TrainRun
from .volume_io import SEED_FAMILY_BLOCK, DatasetSplit

CHECKPOINT_MAGIC = b"CMRLCKPT"
CHECKPOINT_VERSION = 1

EXIT_OK = 0
EXIT_INVALID_CONFIG = 2
EXIT_DATA_ERROR = 3
EXIT_CHECKPOINT_ERROR = 4


# ---------------------------------------------------------------------------
# CRC-64/XZ (poly 0x42F0E1EBA9EA3693 reflected, init/xorout all-ones)
# ---------------------------------------------------------------------------

_CRC64_POLY_REFLECTED = 0xC96C5795D7870F42


def _crc64_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = i
        for _ in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ _CRC64_POLY_REFLECTED
            else:
                crc >>= 1
        table[i] = crc
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    crc = np.uint64(0xFFFFFFFFFFFFFFFF)
    table = _CRC64_TABLE
    eight = np.uint64(8)
    mask = np.uint64(0xFF)
    for b in data:
        crc = table[int((crc ^ np.uint64(b)) & mask)] ^ (crc >> eight)
    return int(crc ^ np.uint64(0xFFFFFFFFFFFFFFFF))


# ---------------------------------------------------------------------------
# Run config
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    dir: str
    n_volumes: int = 40
    dims: tuple[int, int, int] = (64, 64, 64)
    landmarks: list = None            # [(name, blob_sigma)]
    family_seed: int = 1              # volume i uses seed family*4096 + i
    split_seed: int = 0

    def __post_init__(self):
        if self.landmarks is None:
            self.landmarks = [["lm0", 8.0], ["lm1", 9.0], ["lm2", 10.0]]
        self.landmarks = [(str(n), float(s)) for n, s in self.landmarks]
        self.dims = tuple(int(d) for d in self.dims)


@dataclass
class ExperimentConfig:
    kind: str = "multi_landmark"
    landmarks: list = None            # names; default: all dataset landmarks
    eval_seed: int = 0
    episodes_per_volume: int = 1

    def __post_init__(self):
        if self.landmarks is not None:
            self.landmarks = [str(n) for n in self.landmarks]


@dataclass
class RunConfig:
    env: EnvConfig
    net: NetConfig
    train: TrainConfig
    dataset: DatasetConfig
    experiment: ExperimentConfig
    out_dir: str = "runs/out"
    seed: int = 0

    def agent_map(self) -> list[str]:
        names = self.experiment.landmarks
        if names is None:
            names = [n for n, _ in self.dataset.landmarks]
        if self.experiment.kind == "single_agent_baseline":
            return names  # one independent 1-agent run per name
        return evaluator.build_agent_map(self.experiment.kind, names,
                                         n_agents=self.net.n_agents)

    def validate(self) -> None:
        try:
            self.env.validate()
            self.net.validate()
            self.train.validate()
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from exc
        if self.net.in_frames != self.env.history_len:
            raise InvalidConfig(
                f"net.in_frames={self.net.in_frames} must equal "
                f"env.history_len={self.env.history_len}")
        if self.net.roi_size != self.env.roi_size:
            raise InvalidConfig(
                f"net.roi_size={self.net.roi_size} must equal "
                f"env.roi_size={self.env.roi_size}")
        if self.experiment.kind not in evaluator.EXPERIMENT_KINDS:
            raise InvalidConfig(
                f"unknown experiment kind {self.experiment.kind!r}")
        if self.experiment.kind == "collab_baseline" and self.net.comm_enabled:
            raise InvalidConfig("collab_baseline requires net.comm_enabled=false")
        if self.experiment.kind == "single_agent_baseline":
            if self.net.n_agents != 1:
                raise InvalidConfig("single_agent_baseline requires n_agents=1")
        else:
            try:
                n_mapped = len(self.agent_map())
            except ValueError as exc:
                raise InvalidConfig(str(exc)) from exc
            if n_mapped != self.net.n_agents:
                raise InvalidConfig(
                    f"agent-landmark map has {n_mapped} agents but "
                    f"net.n_agents={self.net.n_agents}")
        if not 1 <= len(self.dataset.landmarks) <= 8:
            raise InvalidConfig("dataset needs 1..8 landmarks")
        if self.dataset.n_volumes < 3:
            raise InvalidConfig("dataset needs at least 3 volumes")
        if self.dataset.n_volumes > SEED_FAMILY_BLOCK:
            raise InvalidConfig(
                f"at most {SEED_FAMILY_BLOCK} volumes per seed family")


def _dataclass_from(cls, data: dict, section: str):
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidConfig(f"bad '{section}' section: {exc}") from exc


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise InvalidConfig("run config must be a JSON object")
    env_cfg = _dataclass_from(EnvConfig, doc.get("env", {}), "env")
    env_cfg.scales_mm = tuple(int(s) for s in env_cfg.scales_mm)
    net_doc = dict(doc.get("net", {}))
    if "pool_after" in net_doc:
        net_doc["pool_after"] = frozenset(int(i) for i in net_doc["pool_after"])
    net_cfg = _dataclass_from(NetConfig, net_doc, "net")
    net_cfg.conv_channels = tuple(int(c) for c in net_cfg.conv_channels)
    net_cfg.conv_kernels = tuple(int(k) for k in net_cfg.conv_kernels)
    net_cfg.fc_sizes = tuple(int(s) for s in net_cfg.fc_sizes)
    net_cfg.pool_after = frozenset(net_cfg.pool_after)
    train_cfg = _dataclass_from(TrainConfig, doc.get("train", {}), "train")
    if "dataset" not in doc or "dir" not in doc.get("dataset", {}):
        raise InvalidConfig("config must give dataset.dir")
    dataset = _dataclass_from(DatasetConfig, doc["dataset"], "dataset")
    experiment = _dataclass_from(ExperimentConfig, doc.get("experiment", {}),
                                 "experiment")
    return RunConfig(env=env_cfg, net=net_cfg, train=train_cfg,
                     dataset=dataset, experiment=experiment,
                     out_dir=str(doc.get("out_dir", "runs/out")),
                     seed=int(doc.get("seed", 0)))


def run_config_to_dict(cfg: RunConfig) -> dict:
    doc = {
        "env": asdict(cfg.env),
        "net": asdict(cfg.net),
        "train": asdict(cfg.train),
        "dataset": asdict(cfg.dataset),
        "experiment": asdict(cfg.experiment),
        "out_dir": cfg.out_dir,
        "seed": cfg.seed,
    }
    doc["env"]["scales_mm"] = list(cfg.env.scales_mm)
    doc["net"]["conv_channels"] = list(cfg.net.conv_channels)
    doc["net"]["conv_kernels"] = list(cfg.net.conv_kernels)
    doc["net"]["fc_sizes"] = list(cfg.net.fc_sizes)
    doc["net"]["pool_after"] = sorted(cfg.net.pool_after)
    doc["dataset"]["dims"] = list(cfg.dataset.dims)
    doc["dataset"]["landmarks"] = [[n, s] for n, s in cfg.dataset.landmarks]
    return doc


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(doc)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: RunConfig, params: QNetParams,
                    train_step: int, best_val_error: float) -> None:
    blob = json.dumps(
        {
            "run_config": run_config_to_dict(cfg),
            "train_step": int(train_step),
            "best_val_error_mm": None if np.isnan(best_val_error)
                                 else float(best_val_error),
        },
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    vec = qnet.flatten_params(params)
    body = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<Q", len(blob)),
        blob,
        struct.pack("<Q", vec.size),
        vec.astype("<f4").tobytes(),
    ])
    try:
        with open(path, "wb") as fh:
            fh.write(body)
            fh.write(struct.pack("<Q", crc64(body)))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


@dataclass
class Checkpoint:
    version: int
    config: RunConfig
    params_vec: np.ndarray
    train_step: int
    best_val_error: float


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 8 + 8 + 8 \
            or raw[:8] != CHECKPOINT_MAGIC:
        raise ChecksumMismatch(f"{path}: not a checkpoint file")
    body, (stored_crc,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if crc64(body) != stored_crc:
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    version = struct.unpack_from("<I", raw, 8)[0]
    if version > CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"{path}: version {version} > "
                                 f"{CHECKPOINT_VERSION}")
    blob_len = struct.unpack_from("<Q", raw, 12)[0]
    blob_end = 20 + blob_len
    doc = json.loads(raw[20:blob_end].decode("utf-8"))
    cfg = run_config_from_dict(doc["run_config"])
    count = struct.unpack_from("<Q", raw, blob_end)[0]
    vec = np.frombuffer(raw, dtype="<f4", count=count, offset=blob_end + 8)
    expected = qnet.count_params(cfg.net)
    if count != expected:
        raise ConfigMismatch(
            f"{path}: {count} parameters but config implies {expected}")
    best = doc.get("best_val_error_mm")
    return Checkpoint(version=version, config=cfg,
                      params_vec=vec.copy(),
                      train_step=int(doc.get("train_step", 0)),
                      best_val_error=float("nan") if best is None else best)


# ---------------------------------------------------------------------------
# Dataset on disk
# ---------------------------------------------------------------------------

def volume_paths(data_dir: Path, vid: str) -> tuple[Path, Path]:
    return data_dir / f"{vid}.raw3d", data_dir / f"{vid}.json"


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {path}: {exc}") from exc


def generate_dataset(cfg: RunConfig, out_dir: Path) -> DatasetSplit:
    ds = cfg.dataset
    _ensure_dir(out_dir)
    ids = []
    for i in range(ds.n_volumes):
        seed = ds.family_seed * SEED_FAMILY_BLOCK + i
        vol = volume_io.generate_synthetic_volume(seed, ds.dims, ds.landmarks)
        vid = f"vol_{i:03d}"
        raw_path, lm_path = volume_paths(out_dir, vid)
        volume_io.write_raw3d(raw_path, vol)
        volume_io.write_landmarks(lm_path, vid, vol.landmarks)
        ids.append(vid)
    split = volume_io.split_dataset(ids, ds.split_seed)
    try:
        with open(out_dir / "split.json", "w", encoding="utf-8") as fh:
            json.dump({"seed": split.seed, "train": split.train,
                       "validation": split.validation, "test": split.test},
                      fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write split manifest: {exc}") from exc
    return split


def load_dataset(data_dir: Path) -> tuple[dict, DatasetSplit]:
    split_path = data_dir / "split.json"
    try:
        with open(split_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"missing split manifest: {exc}") from exc
    split = DatasetSplit(train=list(doc["train"]),
                         validation=list(doc["validation"]),
                         test=list(doc["test"]), seed=int(doc["seed"]))
    volumes = {}
    for vid in split.train + split.validation + split.test:
        raw_path, lm_path = volume_paths(data_dir, vid)
        _, landmarks = volume_io.read_landmarks(lm_path)
        volumes[vid] = volume_io.read_raw3d(raw_path, landmarks)
    return volumes, split


def _check_dataset_landmarks(volumes: dict, targets: list[str]) -> None:
    for vid, vol in volumes.items():
        missing = [t for t in set(targets) if t not in vol.landmarks]
        if missing:
            raise ConfigMismatch(
                f"volume {vid} lacks landmarks {sorted(missing)}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_run_config(args.config)
    _apply_overrides(cfg, args)
    cfg.validate()
    out = Path(args.out) if args.out else Path(cfg.dataset.dir)
    split = generate_dataset(cfg, out)
    print(f"wrote {cfg.dataset.n_volumes} volumes to {out} "
          f"(train {len(split.train)} / val {len(split.validation)} "
          f"/ test {len(split.test)})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _apply_overrides(cfg, args)
    cfg.validate()
    data_dir = Path(cfg.dataset.dir)
    volumes, split = load_dataset(data_dir)
    targets = cfg.agent_map()
    _check_dataset_landmarks(volumes, targets)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    _ensure_dir(out)

    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as log_stream:
        run = TrainRun(volumes=volumes, split=split, targets=targets,
                       env=cfg.env, net=cfg.net, train=cfg.train,
                       eval_seed=cfg.experiment.eval_seed)
        result = trainer.train(run, log_stream=log_stream)

    ckpt_path = out / "best.ckpt"
    save_checkpoint(ckpt_path, cfg, result.best_params,
                    result.env_steps, result.best_val_error)
    best = ("n/a" if np.isnan(result.best_val_error)
            else f"{result.best_val_error:.3f} mm")
    print(f"trained {result.episodes} episodes / {result.env_steps} env steps "
          f"/ {result.updates} updates; best validation error {best}")
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.experiment:
        cfg.experiment.kind = args.experiment
    if args.seed is not None:
        cfg.experiment.eval_seed = args.seed
    cfg.validate()
    volumes, split = load_dataset(Path(cfg.dataset.dir))
    targets = cfg.agent_map()
    _check_dataset_landmarks(volumes, targets)
    if cfg.experiment.kind != "single_agent_baseline" \
            and len(targets) != cfg.net.n_agents:
        raise ConfigMismatch(
            f"checkpoint is a {cfg.net.n_agents}-agent model; experiment "
            f"{cfg.experiment.kind!r} maps {len(targets)} agents")
    params = qnet.unflatten_params(cfg.net, ckpt.params_vec)

    result = evaluator.run_experiment(
        cfg.experiment.kind, volumes, split,
        targets if cfg.experiment.kind == "single_agent_baseline"
        else (cfg.experiment.landmarks
              or [n for n, _ in cfg.dataset.landmarks]),
        cfg.env, cfg.net, params=params,
        eval_seed=cfg.experiment.eval_seed,
        episodes_per_volume=cfg.experiment.episodes_per_volume)

    out = Path(args.out) if args.out else Path(cfg.out_dir)
    _ensure_dir(out)
    evaluator.write_csv(out / "results.csv", evaluator.RESULTS_FIELDS,
                        result.results_rows)
    evaluator.write_csv(out / "summary.csv", evaluator.SUMMARY_FIELDS,
                        result.summary_rows)
    for row in result.summary:
        print(f"{row.landmark}: mean {row.mean_mm:.3f} mm "
              f"(std {row.std_mm:.3f}, median {row.median_mm:.3f}, "
              f"max {row.max_mm:.3f}, n={row.n})")
    print(f"results: {out / 'results.csv'}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    best = ("n/a" if np.isnan(ckpt.best_val_error)
            else f"{ckpt.best_val_error:.6f} mm")
    print(f"checkpoint version: {ckpt.version}")
    print(f"parameters: {ckpt.params_vec.size} "
          f"(count_params: {qnet.count_params(cfg.net)})")
    print(f"training env steps: {ckpt.train_step}")
    print(f"best validation error: {best}")
    print(f"agents: {cfg.net.n_agents}, comm: {cfg.net.comm_enabled}, "
          f"roi: {cfg.net.roi_size}, frames: {cfg.net.in_frames}")
    print(f"experiment: {cfg.experiment.kind}")
    print(f"dataset: {cfg.dataset.dir}")
    return EXIT_OK


def _apply_overrides(cfg: RunConfig, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "experiment", None):
        cfg.experiment.kind = args.experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmarl",
        description="Multi-agent landmark localization: dataset generation, "
                    "training, evaluation, checkpoint inspection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic dataset")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", default=None)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(fn=cmd_generate)

    p_train = sub.add_parser("train", help="train and save the best checkpoint")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--experiment", default=None,
                        choices=evaluator.EXPERIMENT_KINDS)
    p_eval.set_defaults(fn=cmd_eval)

    p_ins = sub.add_parser("inspect", help="print checkpoint metadata")
    p_ins.add_argument("--checkpoint", required=True)
    p_ins.set_defaults(fn=cmd_inspect)
    return parser


def classify_error(exc: Exception) -> int:
    if isinstance(exc, (ChecksumMismatch, UnsupportedVersion, ConfigMismatch)):
        return EXIT_CHECKPOINT_ERROR
    if isinstance(exc, (InvalidConfig, ValueError)):
        return EXIT_INVALID_CONFIG
    if isinstance(exc, CmarlError):
        return EXIT_DATA_ERROR
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = classify_error(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
