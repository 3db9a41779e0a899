"""Joint training of the flow and latent process on slice sequences.

The per-sequence loss is the negative exchangeable sequence log-likelihood:
each slice is mapped to a latent by the flow, scored under the current
posterior predictive, then folded into the conditioning state. A config
flag selects whether every position contributes (full autoregressive
likelihood, the default) or only the final query term.

Checkpoints are a binary container: magic "BRNC", a version word, a JSON
metadata block (config, step, loss tail, parameter table) and a raw
little-endian float32 parameter blob.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .flow import ConditionalFlow, FlowConfig
from .optim import Adam
from .process import ExchangeableProcess, ProcessState, predictive_logpdf, update_state
from .volumes import Volume, downsample, extract_slices

CHECKPOINT_MAGIC = b"BRNC"
CHECKPOINT_VERSION = 1
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """Training loss became non-finite or exceeded the divergence limit."""

    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CheckpointError(ValueError):
    """Malformed checkpoint container or incompatible configuration."""


@dataclass
class ModelConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    process_mode: str = "student-t"
    init_variance: float = 1.0
    init_covariance: float = 0.1
    init_dof: float = 1000.0
    slices_per_volume: int = 24  # K
    middle_fraction: float = 0.75
    sequence_length: int = 5  # M
    batch_size: int = 16
    epochs: int = 50
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_terms: str = "full"  # "full" or "last"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.flow, dict):
            self.flow = FlowConfig.from_dict(self.flow)
        if self.sequence_length < 2:
            raise ValueError("sequence_length must be at least 2")
        if self.slices_per_volume < self.sequence_length:
            raise ValueError("slices_per_volume must be >= sequence_length")
        if self.loss_terms not in ("full", "last"):
            raise ValueError("loss_terms must be 'full' or 'last'")
        if self.flow.pose_dim != self.slices_per_volume:
            raise ValueError(
                f"flow pose_dim {self.flow.pose_dim} must equal slices_per_volume {self.slices_per_volume}"
            )

    def to_dict(self) -> dict:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "flow"}
        doc["flow"] = self.flow.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


class SequenceModel:
    """Flow plus exchangeable process over the flow's latent dimensions."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.flow = ConditionalFlow(config.flow, rng=rng)
        self.process = ExchangeableProcess(
            dim=config.flow.latent_dim,
            mode=config.process_mode,
            init_variance=config.init_variance,
            init_covariance=config.init_covariance,
            init_dof=config.init_dof,
        )

    def parameters(self):
        return self.flow.parameters() + self.process.parameters()

    def parameter_items(self):
        return self.flow.parameter_items() + self.process.parameter_items()

    def batch_nll(self, images: np.ndarray, poses: np.ndarray):
        """Mean sequence NLL over a batch; images [B,M,H,W], poses [B,M,K].

        Returns a tracked scalar when a tape is active, so one call serves
        both training and evaluation.
        """
        images = np.asarray(images)
        poses = np.asarray(poses)
        if images.ndim != 4 or poses.ndim != 3 or images.shape[:2] != poses.shape[:2]:
            raise ValueError("expected images [B,M,H,W] with matching poses [B,M,K]")
        b, m = images.shape[:2]
        h, w = self.config.flow.image_shape
        d = self.config.flow.latent_dim

        z, logdet = self.flow.forward_batch(
            images.reshape(b * m, h, w), poses.reshape(b * m, -1)
        )
        z_seq = z.reshape(b, m, d)
        ld_seq = logdet.reshape(b, m)

        params = self.process.constrained()
        state = init_state_like(params, batch=b, dtype=self.flow.dtype)
        use_all = self.config.loss_terms == "full"
        total_lp = None
        for step in range(m):
            z_m = z_seq[:, step]
            if use_all or step == m - 1:
                lp = predictive_logpdf(z_m, state, params)
                total_lp = lp if total_lp is None else total_lp + lp
            state = update_state(state, z_m, params)

        ld_part = ld_seq.sum(axis=1) if use_all else ld_seq[:, m - 1]
        return -((total_lp + ld_part).mean())

    def sequence_nll(self, sequence) -> float:
        """Plain-float NLL of one SequenceSample (or (images, poses) arrays)."""
        if hasattr(sequence, "entries"):
            images = np.stack([sp.image for sp in sequence.entries])
            poses = np.stack([sp.pose for sp in sequence.entries])
        else:
            images, poses = sequence
            images, poses = np.asarray(images), np.asarray(poses)
        loss = self.batch_nll(images[None], poses[None])
        value = float(loss.data) if isinstance(loss, Tensor) else float(loss)
        if not np.isfinite(value):
            raise DivergenceError("sequence NLL is not finite")
        return value


def init_state_like(params, batch: int, dtype) -> ProcessState:
    dim = params.mean.data.shape[-1] if isinstance(params.mean, Tensor) else len(params.mean)
    zeros = np.zeros((batch, dim), dtype=dtype)
    return ProcessState(count=0, obs_sum=zeros, obs_sq_sum=zeros.copy())


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def volume_to_arrays(vol: Volume, config: ModelConfig):
    """Slice stack of one volume as (images [K,H,W], poses [K,K]) at model resolution."""
    stack = extract_slices(vol, config.middle_fraction, config.slices_per_volume)
    h, w = config.flow.image_shape
    images = np.stack(
        [sp.image if sp.image.shape == (h, w) else downsample(sp.image, (h, w)) for sp in stack]
    )
    poses = np.stack([sp.pose for sp in stack])
    return images.astype(np.float32), poses.astype(np.float32)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)  # entries may be None

    def rows(self):
        return list(zip(self.epochs, self.train_nll, self.val_nll))

    def write_csv(self, path) -> None:
        lines = ["epoch,train_nll,val_nll"]
        for epoch, tr, va in self.rows():
            lines.append(f"{epoch},{tr:.6f}," + ("" if va is None else f"{va:.6f}"))
        Path(path).write_text("\n".join(lines) + "\n")


def train(
    volumes,
    config: ModelConfig,
    out_dir=None,
    val_volumes=None,
    resume_from=None,
    progress=None,
) -> tuple:
    """Train on a list of volumes; returns (model, history).

    Deterministic for a given config seed. When ``out_dir`` is given a
    checkpoint is rewritten after every epoch; on divergence the last good
    checkpoint survives and a DivergenceError pointing at it is raised.
    """
    volumes = list(volumes)
    if len(volumes) < 2:
        raise ValueError("need at least two training volumes")
    seed_seq = np.random.SeedSequence(config.seed)
    init_rng, sample_rng, val_rng = (np.random.default_rng(s) for s in seed_seq.spawn(3))

    if resume_from is not None:
        model = load_checkpoint(resume_from)
        if model.config.to_dict() != config.to_dict():
            raise CheckpointError("resume checkpoint config does not match the requested config")
        start_step = _checkpoint_meta(resume_from)["step"]
    else:
        model = SequenceModel(config, rng=init_rng)
        start_step = 0

    data = [volume_to_arrays(v, config) for v in volumes]
    val_batches = None
    if val_volumes:
        val_arrays = [volume_to_arrays(v, config) for v in val_volumes]
        val_batches = _fixed_sequences(val_arrays, config, val_rng)

    params = model.parameters()
    opt = Adam(
        params,
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
    )

    m_len = config.sequence_length
    k_total = config.slices_per_volume
    history = TrainHistory()
    ckpt_path = Path(out_dir) / "model.brnc" if out_dir is not None else None
    step = start_step

    for epoch in range(1, config.epochs + 1):
        order = sample_rng.permutation(len(data))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch_idx = order[lo : lo + config.batch_size]
            img_rows, pose_rows = [], []
            for i in batch_idx:
                picks = sample_rng.choice(k_total, m_len, replace=False)
                img_rows.append(data[i][0][picks])
                pose_rows.append(data[i][1][picks])
            images = np.stack(img_rows)
            poses = np.stack(pose_rows)

            with Tape() as tape:
                loss = model.batch_nll(images, poses)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val) or loss_val > DIVERGENCE_LIMIT:
                last = ckpt_path if (ckpt_path is not None and epoch > 1) else None
                raise DivergenceError(
                    f"training diverged at step {step + 1} (loss={loss_val!r})"
                    + (f"; last good checkpoint: {last}" if last else ""),
                    last_checkpoint=last,
                )
            opt.step(tape.grad(loss, params))
            step += 1
            losses.append(loss_val)

        train_nll = float(np.mean(losses))
        val_nll = None
        if val_batches is not None:
            val_nll = float(np.mean([model.batch_nll(vi, vp).item() for vi, vp in val_batches]))
        history.epochs.append(epoch)
        history.train_nll.append(train_nll)
        history.val_nll.append(val_nll)
        if ckpt_path is not None:
            save_checkpoint(model, ckpt_path, step=step, loss_tail=history.train_nll[-50:])
        if progress is not None:
            progress(epoch, train_nll, val_nll)

    return model, history


def _fixed_sequences(arrays, config: ModelConfig, rng: np.random.Generator, per_volume: int = 2):
    """Deterministic held-out sequences, comparable across epochs."""
    img_rows, pose_rows = [], []
    for images, poses in arrays:
        for _ in range(per_volume):
            picks = rng.choice(config.slices_per_volume, config.sequence_length, replace=False)
            img_rows.append(images[picks])
            pose_rows.append(poses[picks])
    return [(np.stack(img_rows), np.stack(pose_rows))]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: SequenceModel, path, step: int = 0, loss_tail=()) -> None:
    """Write magic + version + JSON metadata + little-endian float32 blob."""
    table, blobs, offset = [], [], 0
    for name, p in model.parameter_items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")  # note: promotes 0-d to 1-d
        table.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    meta = {
        "config": model.config.to_dict(),
        "step": int(step),
        "loss_tail": [float(x) for x in loss_tail],
        "params": table,
        "total_floats": offset,
    }
    meta_bytes = json.dumps(meta).encode("utf-8")
    payload = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<Q", len(meta_bytes))
        + meta_bytes
        + b"".join(blobs)
    )
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(target.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(target)  # the previous good checkpoint survives a crash mid-write


def _read_container(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta_len = struct.unpack("<Q", raw[8:16])[0]
    if len(raw) < 16 + meta_len:
        raise CheckpointError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(raw[16 : 16 + meta_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed metadata: {exc}") from exc
    blob = raw[16 + meta_len :]
    if len(blob) != meta.get("total_floats", -1) * 4:
        raise CheckpointError(
            f"{path}: parameter blob is {len(blob)} bytes, expected {meta.get('total_floats', 0) * 4}"
        )
    return meta, blob


def checkpoint_meta(path) -> dict:
    return _read_container(path)[0]


def _checkpoint_meta(path) -> dict:
    return checkpoint_meta(path)


def _assign_parameters(model: SequenceModel, meta: dict, blob: bytes) -> None:
    flat = np.frombuffer(blob, dtype="<f4")
    by_name = dict(model.parameter_items())
    seen = set()
    for entry in meta["params"]:
        name = entry["name"]
        p = by_name.get(name)
        if p is None:
            raise CheckpointError(f"checkpoint parameter {name!r} does not exist in the model")
        shape = tuple(entry["shape"])
        if shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {shape} vs model shape {p.data.shape}"
            )
        size = int(np.prod(shape)) if shape else 1
        chunk = flat[entry["offset"] : entry["offset"] + size]
        if chunk.size != size:
            raise CheckpointError(f"parameter {name!r}: offset outside the blob")
        p.data[...] = chunk.reshape(shape).astype(p.data.dtype)
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")


def load_checkpoint(path) -> SequenceModel:
    """Rebuild the model from its stored config and restore every parameter bit."""
    meta, blob = _read_container(path)
    config = ModelConfig.from_dict(meta["config"])
    model = SequenceModel(config)
    _assign_parameters(model, meta, blob)
    return model


def restore_parameters(model: SequenceModel, path) -> None:
    """Load parameters into an existing model; the configs must match exactly."""
    meta, blob = _read_container(path)
    if meta["config"] != model.config.to_dict():
        raise CheckpointError(
            "config mismatch: checkpoint was trained with a different configuration"
        )
    _assign_parameters(model, meta, blob)
