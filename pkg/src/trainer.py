"""Training loop, rotation augmentation and checkpoints."""

import csv
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .cell_types import CellInstance, instances_to_batch
from .config import ConfigError, DataError, NumericError, TrainingConfig, debug_log, training_config_from_dict
from .gan_losses import CSV_HEADER, LossReport, auxiliary_loss, discriminator_loss, generator_loss
from .nn import AdamState, GanNetworks, adam_step, build_networks, frozen, sample_noise

MAGIC = b"CGAN"
FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
TAG_OF_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2, np.dtype(np.int64): 3}
ROTATIONS = (0, 90, 180, 270)


class CheckpointError(DataError):
    """A checkpoint could not be written or read."""


def augment_rotations(dataset: Sequence[CellInstance]) -> List[CellInstance]:
    """
    Add 90, 180 and 270 degree rotations of every instance.

    Returns:
        List[CellInstance]: Four entries per input, the original first

    Raises:
        DataError: If an instance is not square
    """
    out = []
    for inst in dataset:
        if not inst.is_square:
            raise DataError(f"{inst.instance_id}: cannot rotate non-square image {inst.image.shape}")
        for angle in ROTATIONS:
            image = inst.image if angle == 0 else np.ascontiguousarray(np.rot90(inst.image, k=angle // 90))
            out.append(replace(inst, image=image, rotation=(inst.rotation + angle) % 360))
    return out


class BatchSampler:
    """
    Draws real batches without replacement within a pass over the data.

    A short final batch is topped up from the next shuffled pass.
    """

    def __init__(self, data: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(data) == 0:
            raise DataError("cannot sample batches from an empty dataset")
        self.data = data
        self.batch_size = batch_size
        self.rng = rng
        self.order = rng.permutation(len(data))
        self.position = 0
        self.passes = 0

    def next_indices(self) -> np.ndarray:
        picked: List[np.ndarray] = []
        needed = self.batch_size
        while needed > 0:
            if self.position >= len(self.order):
                self.order = self.rng.permutation(len(self.data))
                self.position = 0
                self.passes += 1
                debug_log(f"Sampler reshuffled (pass {self.passes})")
            take = self.order[self.position:self.position + needed]
            picked.append(take)
            self.position += len(take)
            needed -= len(take)
        return np.concatenate(picked)

    def next_batch(self) -> np.ndarray:
        return self.data[self.next_indices()]

    def get_state(self) -> Dict:
        return {
            "rng": self.rng.bit_generator.state,
            "order": self.order.astype(np.int64),
            "position": self.position,
            "passes": self.passes,
        }

    def set_state(self, state: Dict) -> None:
        if len(state["order"]) != len(self.data):
            raise CheckpointError(
                f"sampler state covers {len(state['order'])} instances, dataset has {len(self.data)}"
            )
        self.rng.bit_generator.state = state["rng"]
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.position = int(state["position"])
        self.passes = int(state["passes"])


@dataclass
class TrainingRunState:
    """Everything needed to continue training bit-exactly."""
    config: TrainingConfig
    networks: GanNetworks
    adam_g: AdamState
    adam_d: AdamState
    adam_q: AdamState
    rng: np.random.Generator
    iteration: int = 0
    epoch: int = 0
    history: List[LossReport] = field(default_factory=list)
    sampler_state: Optional[Dict] = None
    update_log: List[str] = field(default_factory=list)

    def adam_states(self) -> Dict[str, Tuple[AdamState, list]]:
        nets = self.networks
        return {
            "G": (self.adam_g, nets.generator.parameters()),
            "D": (self.adam_d, nets.discriminator.parameters()),
            "Q": (self.adam_q, nets.auxiliary.parameters()),
        }


def sampler_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def init_state(cfg: TrainingConfig) -> TrainingRunState:
    """Fresh networks, zero Adam moments and seeded generators."""
    networks = build_networks(cfg)
    return TrainingRunState(
        config=cfg,
        networks=networks,
        adam_g=AdamState.zeros_like(networks.generator.parameters()),
        adam_d=AdamState.zeros_like(networks.discriminator.parameters()),
        adam_q=AdamState.zeros_like(networks.auxiliary.parameters()),
        rng=np.random.default_rng([cfg.seed, 2]),
    )


def _check_finite(state: TrainingRunState, report: LossReport) -> None:
    if not report.is_finite():
        raise NumericError(f"non-finite loss at iteration {state.iteration}: {report}")
    for prefix, module in state.networks.modules().items():
        for name, p in module.named_parameters():
            if not np.all(np.isfinite(p.values)):
                raise NumericError(f"non-finite parameter {prefix}.{name} at iteration {state.iteration}")


def train_iteration(state: TrainingRunState, sampler: BatchSampler, cfg: TrainingConfig) -> LossReport:
    """
    One generator iteration: d_steps critic updates, one G update, one joint G,Q update.

    Raises:
        NumericError: If a loss or parameter becomes NaN/Inf
    """
    nets = state.networks
    G, D, Q = nets.generator, nets.discriminator, nets.auxiliary
    state.update_log = []

    for _ in range(cfg.d_steps):
        real = sampler.next_batch()
        noise = sample_noise(cfg.batch_size, cfg.K, cfg.dim_z, state.rng)
        with ad.Graph(differentiable=True):
            d_out = discriminator_loss(D, G, real, noise, cfg.lambda1, cfg.p, state.rng)
            grads = ad.backward(d_out.loss)
        adam_step(D.parameters(), grads, state.adam_d, cfg.adam)
        state.update_log.append("D")

    noise = sample_noise(cfg.batch_size, cfg.K, cfg.dim_z, state.rng)
    with ad.Graph():
        l_g = generator_loss(D, G, noise)
        grads = ad.backward(l_g)
    adam_step(G.parameters(), grads, state.adam_g, cfg.adam)
    state.update_log.append("G")

    noise = sample_noise(cfg.batch_size, cfg.K, cfg.dim_z, state.rng)
    with ad.Graph(), frozen(D):
        l_q = auxiliary_loss(Q, G, noise, cfg.lambda2)
        grads = ad.backward(l_q)
    # G keeps one Adam state for both of its updates, so adam_g.t advances twice per iteration
    adam_step(G.parameters(), grads, state.adam_g, cfg.adam)
    adam_step(Q.parameters(), grads, state.adam_q, cfg.adam)
    state.update_log.append("Q")

    report = LossReport(
        L_D=float(d_out.loss.values),
        L_G=float(l_g.values),
        L_Q=float(l_q.values),
        wasserstein_estimate=d_out.wasserstein_estimate,
        penalty_mean=d_out.penalty_mean,
        grad_norm_mean=d_out.grad_norm_mean,
    )
    state.iteration += 1
    _check_finite(state, report)
    state.history.append(report)
    debug_log(
        f"iter {state.iteration}: L_D={report.L_D:.4f} L_G={report.L_G:.4f} "
        f"L_Q={report.L_Q:.4f} |grad|={report.grad_norm_mean:.3f}"
    )
    return report


def iterations_per_epoch(augmented_size: int, batch_size: int) -> int:
    return math.ceil(augmented_size / batch_size)


def write_loss_csv(history: Sequence[LossReport], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for i, report in enumerate(history, start=1):
            writer.writerow(report.to_row(i))


def read_loss_csv(path: Path) -> List[LossReport]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != CSV_HEADER:
        raise DataError(f"{path}: not a loss CSV")
    return [LossReport.from_row(row) for row in rows[1:]]


@dataclass
class TrainingResult:
    state: TrainingRunState
    checkpoint: Path
    losses: Path


RESUMABLE_FIELDS = ("epochs",)


def check_resume_config(saved: TrainingConfig, requested: TrainingConfig, path: Path) -> None:
    """
    Reject a resume whose configuration differs from the checkpoint's in anything but the epoch count.

    Raises:
        ConfigError: Naming every field that differs
    """
    saved_fields, requested_fields = (json.loads(json.dumps(asdict(c))) for c in (saved, requested))
    changed = sorted(
        name for name in saved_fields
        if name not in RESUMABLE_FIELDS and saved_fields[name] != requested_fields[name]
    )
    if changed:
        details = ", ".join(f"{name}: {saved_fields[name]!r} -> {requested_fields[name]!r}" for name in changed)
        raise ConfigError(f"{path} was trained with a different configuration ({details})")


EpochCallback = Callable[[TrainingRunState, int], None]
ProgressCallback = Callable[[int, int, LossReport], None]


def train_run(dataset: Sequence[CellInstance], cfg: TrainingConfig, out_dir: Path,
              resume: Optional[Path] = None, epoch_callback: Optional[EpochCallback] = None,
              progress: Optional[ProgressCallback] = None) -> TrainingResult:
    """
    Train for ``cfg.epochs`` epochs, checkpointing at every epoch end.

    Args:
        dataset: Real cell instances (augmented here with rotations)
        cfg: Training configuration
        out_dir: Directory receiving ``epoch_{n}.ckpt`` and ``losses.csv``
        resume: Checkpoint to continue from
        epoch_callback: Called as (state, epoch) after each checkpoint
        progress: Called as (iteration, total, report) after each iteration

    Raises:
        ConfigError: If the resumed checkpoint was trained with a different configuration
        DataError: If the dataset is empty
        CheckpointError: If a checkpoint cannot be written or read
    """
    if not dataset:
        raise DataError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    augmented = augment_rotations(dataset)
    data = instances_to_batch(augmented, np.dtype(cfg.precision).type)
    per_epoch = iterations_per_epoch(len(augmented), cfg.batch_size)
    debug_log(f"{len(dataset)} instances, {len(augmented)} after augmentation, {per_epoch} iterations/epoch")

    if resume is not None:
        state = load_checkpoint(resume)
        check_resume_config(state.config, cfg, resume)
    else:
        state = init_state(cfg)
    sampler = BatchSampler(data, cfg.batch_size, sampler_rng(cfg.seed))
    if state.sampler_state is not None:
        sampler.set_state(state.sampler_state)

    losses_path = out_dir / "losses.csv"
    checkpoint = Path(resume) if resume is not None else out_dir / "epoch_0.ckpt"
    total = per_epoch * cfg.epochs
    while state.epoch < cfg.epochs:
        for _ in range(per_epoch):
            report = train_iteration(state, sampler, cfg)
            if progress is not None:
                progress(state.iteration, total, report)
        state.epoch += 1
        state.sampler_state = sampler.get_state()
        checkpoint = out_dir / f"epoch_{state.epoch}.ckpt"
        save_checkpoint(state, checkpoint)
        write_loss_csv(state.history, losses_path)
        if epoch_callback is not None:
            epoch_callback(state, state.epoch)

    return TrainingResult(state, checkpoint, losses_path)


# Checkpoint format (little-endian):
#   b"CGAN", u32 version, u32 record count, then per record
#   u32 name length, name, u8 dtype tag, u32 rank, u64 dims[rank], raw data

def _encode_record(name: str, values: np.ndarray) -> bytes:
    arr = np.asarray(values)
    tag = TAG_OF_DTYPE.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    header = struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<BI", tag, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + dims + np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()


def _json_record(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def checkpoint_records(state: TrainingRunState) -> Dict[str, np.ndarray]:
    records: Dict[str, np.ndarray] = {"meta.config": _json_record(asdict(state.config))}
    records.update(state.networks.named_arrays())
    for prefix, (adam, _) in state.adam_states().items():
        records[f"adam.{prefix}.t"] = np.array(adam.t, dtype=np.int64)
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            records[f"adam.{prefix}.m.{i}"] = m
            records[f"adam.{prefix}.v.{i}"] = v
    records["rng"] = _json_record(state.rng.bit_generator.state)
    records["state.iteration"] = np.array(state.iteration, dtype=np.int64)
    records["state.epoch"] = np.array(state.epoch, dtype=np.int64)
    records["history"] = np.array([r.as_array() for r in state.history], dtype=np.float64).reshape(-1, 6)
    if state.sampler_state is not None:
        s = state.sampler_state
        records["sampler.rng"] = _json_record(s["rng"])
        records["sampler.order"] = np.asarray(s["order"], dtype=np.int64)
        records["sampler.position"] = np.array(s["position"], dtype=np.int64)
        records["sampler.passes"] = np.array(s["passes"], dtype=np.int64)
    return records


def save_checkpoint(state: TrainingRunState, path: Path) -> Path:
    """
    Write a checkpoint atomically (temp file, then rename).

    Raises:
        CheckpointError: If the file cannot be written
    """
    path = Path(path)
    records = checkpoint_records(state)
    payload = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
    payload.extend(_encode_record(name, arr) for name, arr in records.items())
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(b"".join(payload))
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}")
    debug_log(f"Saved checkpoint {path} ({len(records)} records)")
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_records(path: Path) -> Dict[str, np.ndarray]:
    """
    Parse every record of a checkpoint file.

    Raises:
        CheckpointError: On foreign magic, unsupported version, truncation or bad tags
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    reader = _Reader(data, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        tag, rank = reader.unpack("<BI")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"{path}: record {name} has unknown dtype tag {tag}")
        dims = reader.unpack(f"<{rank}Q") if rank else ()
        dtype = DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        records[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(dims).copy()
    if reader.offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - reader.offset} trailing bytes")
    return records


def _json_from(records: Dict[str, np.ndarray], name: str, path: Path):
    if name not in records:
        raise CheckpointError(f"{path}: missing record {name}")
    return json.loads(records[name].tobytes().decode("utf-8"))


def _require(records: Dict[str, np.ndarray], name: str, path: Path) -> np.ndarray:
    if name not in records:
        raise CheckpointError(f"{path}: missing record {name}")
    return records[name]


def load_checkpoint(path: Path) -> TrainingRunState:
    """
    Rebuild a TrainingRunState from a checkpoint; nothing is returned on failure.

    Raises:
        CheckpointError: If the file is invalid or incomplete
    """
    path = Path(path)
    records = read_checkpoint_records(path)
    try:
        cfg = training_config_from_dict(_json_from(records, "meta.config", path))
    except Exception as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: invalid embedded config: {e}")
    state = init_state(cfg)

    for prefix, module in state.networks.modules().items():
        try:
            module.load_state_dict({
                name[len(prefix) + 1:]: arr for name, arr in records.items() if name.startswith(prefix + ".")
            })
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: network {prefix}: {e}")

    for prefix, (adam, params) in state.adam_states().items():
        adam.t = int(_require(records, f"adam.{prefix}.t", path))
        adam.m = [_require(records, f"adam.{prefix}.m.{i}", path) for i in range(len(params))]
        adam.v = [_require(records, f"adam.{prefix}.v.{i}", path) for i in range(len(params))]
        for i, p in enumerate(params):
            if adam.m[i].shape != p.shape or adam.v[i].shape != p.shape:
                raise CheckpointError(f"{path}: adam.{prefix} moment {i} does not match parameter shape")

    state.rng.bit_generator.state = _json_from(records, "rng", path)
    state.iteration = int(_require(records, "state.iteration", path))
    state.epoch = int(_require(records, "state.epoch", path))
    state.history = [LossReport.from_array(row) for row in _require(records, "history", path)]
    if "sampler.order" in records:
        state.sampler_state = {
            "rng": _json_from(records, "sampler.rng", path),
            "order": records["sampler.order"],
            "position": int(_require(records, "sampler.position", path)),
            "passes": int(_require(records, "sampler.passes", path)),
        }
    debug_log(f"Loaded checkpoint {path}: iteration {state.iteration}, epoch {state.epoch}")
    return state
