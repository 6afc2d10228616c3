"""Training loop: per-batch dispatch between positive learning on normal
data and negative learning on labeled abnormal data, with an adversarial
regularization round (discriminator step, then encoder-generator step) on
every normal batch.

Batch order, weight init and prior sampling all derive from the config
seed, so single-threaded runs are exactly reproducible. Checkpoints store
parameters, optimizer moments, RNG state and history; resuming is
bit-identical to an uninterrupted run at the evaluation level.
"""

from __future__ import annotations

import base64
import csv
import json
import math
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Union

import numpy as np
import torch

from . import evaluate, losses
from .datasets import DatasetSplit, PreprocessedPartition, batch_iterator, preprocess_partition
from .model import ModelParameters, init_model

CHECKPOINT_MAGIC = b"ADNL1"

NEGATIVE_MODES = ("none", "naive", "scaled")
PHASE_SCHEDULES = ("interleaved", "sequential")
BEST_SELECTORS = ("val_auc", "last")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, loss_name: str, value: float):
        super().__init__(
            f"non-finite {loss_name} ({value}) at epoch {epoch}, batch {batch_index}"
        )
        self.epoch = epoch
        self.batch_index = batch_index
        self.loss_name = loss_name


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    """File does not carry the expected magic string."""


class CheckpointCorruptError(CheckpointError):
    """Checksum mismatch or truncated payload."""


@dataclass
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    negative_mode: str = "naive"
    negative_weight: float = 1.0
    phase_schedule: str = "interleaved"
    grad_clip_norm: float = 5.0
    latent_dim: int = 128
    input_shape: tuple[int, int, int] = (3, 64, 64)
    seed: int = 0
    checkpoint_dir: str | None = None
    select_best_by: str = "val_auc"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            beta = getattr(self, name)
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {beta}")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ValueError(f"negative_mode must be one of {NEGATIVE_MODES}")
        if self.phase_schedule not in PHASE_SCHEDULES:
            raise ValueError(f"phase_schedule must be one of {PHASE_SCHEDULES}")
        if self.select_best_by not in BEST_SELECTORS:
            raise ValueError(f"select_best_by must be one of {BEST_SELECTORS}")
        if self.grad_clip_norm <= 0:
            raise ValueError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        self.input_shape = tuple(int(v) for v in self.input_shape)


@dataclass
class BestSnapshot:
    epoch: int
    auc: float
    arrays: dict[str, np.ndarray]


@dataclass
class TrainState:
    params: ModelParameters
    opt_ae: torch.optim.Adam
    opt_neg: torch.optim.Adam
    opt_disc: torch.optim.Adam
    opt_gen: torch.optim.Adam
    prior_generator: torch.Generator
    epoch: int = 0
    auc_history: list[tuple[int, float]] = field(default_factory=list)
    best: BestSnapshot | None = None
    log_rows: list[dict] = field(default_factory=list)
    sample_reads: dict[str, int] = field(
        default_factory=lambda: {"train_normal": 0, "train_abnormal": 0}
    )
    determinism_eligible: bool = True
    caches: dict[str, PreprocessedPartition] = field(default_factory=dict)


def _derived_seeds(seed: int) -> dict[str, int]:
    words = np.random.SeedSequence(seed).generate_state(4)
    return {
        "model": int(words[0]),
        "prior": int(words[1]),
        "shuffle": int(words[2]),
        "order": int(words[3]),
    }


def _make_optimizer(parameters, config: TrainingConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        parameters,
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_epsilon,
    )


def init_train_state(config: TrainingConfig) -> TrainState:
    seeds = _derived_seeds(config.seed)
    params = init_model(config.latent_dim, config.input_shape, seed=seeds["model"])
    prior_gen = torch.Generator().manual_seed(seeds["prior"])
    return TrainState(
        params=params,
        opt_ae=_make_optimizer(params.autoencoder_parameters(), config),
        # the negative objective reverses gradient signs on the same
        # parameters; giving it its own moments keeps the rare negative
        # steps from polluting the positive-learning momentum
        opt_neg=_make_optimizer(params.autoencoder_parameters(), config),
        opt_disc=_make_optimizer(params.discriminator.parameters(), config),
        opt_gen=_make_optimizer(params.encoder.parameters(), config),
        prior_generator=prior_gen,
    )


def _get_cache(
    state: TrainState, split: DatasetSplit, name: str, config: TrainingConfig
) -> PreprocessedPartition:
    if name not in state.caches:
        c, h, _ = config.input_shape
        state.caches[name] = preprocess_partition(
            split.partitions()[name], target_channels=c, target_size=h
        )
    return state.caches[name]


def _check_finite(value: torch.Tensor, epoch: int, batch_index: int, name: str) -> None:
    v = float(value.detach())
    if not math.isfinite(v):
        raise TrainingDiverged(epoch, batch_index, name, v)


def _positive_step(state: TrainState, x: torch.Tensor, config: TrainingConfig,
                   epoch: int, batch_index: int) -> tuple[float, float]:
    """Reconstruction descent plus one adversarial round; returns
    (positive loss, discriminator loss)."""
    params = state.params
    params.set_training_mode(True)
    try:
        recon = params.decoder(params.encoder(x))
        try:
            loss = losses.positive_loss(recon, x)
        except ValueError as exc:  # non-finite reconstruction
            raise TrainingDiverged(epoch, batch_index, "positive_loss", math.nan) from exc
        _check_finite(loss.scalar, epoch, batch_index, "positive_loss")
        state.opt_ae.zero_grad()
        loss.scalar.backward()
        losses.clip_gradients(params.autoencoder_parameters(), config.grad_clip_norm)
        state.opt_ae.step()

        # discriminator: Gaussian prior vs (detached) encoder codes
        z_prior = torch.randn(
            x.shape[0], params.latent_dim, generator=state.prior_generator
        )
        with torch.no_grad():
            z_fake = params.encoder(x)
        d_loss, _ = losses.adversarial_losses(
            params.discriminator(z_prior), params.discriminator(z_fake)
        )
        _check_finite(d_loss.scalar, epoch, batch_index, "discriminator_loss")
        state.opt_disc.zero_grad()
        d_loss.scalar.backward()
        losses.clip_gradients(params.discriminator.parameters(), config.grad_clip_norm)
        state.opt_disc.step()

        # generator: push encoder codes toward the prior
        fake_probs = params.discriminator(params.encoder(x))
        _, g_loss = losses.adversarial_losses(fake_probs.detach(), fake_probs)
        _check_finite(g_loss.scalar, epoch, batch_index, "generator_loss")
        state.opt_gen.zero_grad()
        g_loss.scalar.backward()
        losses.clip_gradients(params.encoder.parameters(), config.grad_clip_norm)
        state.opt_gen.step()
        return float(loss.scalar.detach()), float(d_loss.scalar.detach())
    finally:
        params.set_training_mode(False)


def _negative_step(state: TrainState, x: torch.Tensor, config: TrainingConfig,
                   epoch: int, batch_index: int) -> float:
    params = state.params
    params.set_training_mode(True)
    try:
        recon = params.decoder(params.encoder(x))
        try:
            if config.negative_mode == "naive":
                loss = losses.negative_loss_naive(recon, x, weight=config.negative_weight)
            else:
                loss = losses.negative_loss_scaled(recon, x)
        except ValueError as exc:  # non-finite reconstruction
            raise TrainingDiverged(epoch, batch_index, "negative_loss", math.nan) from exc
        _check_finite(loss.scalar, epoch, batch_index, "negative_loss")
        state.opt_neg.zero_grad()
        loss.scalar.backward()
        losses.clip_gradients(params.autoencoder_parameters(), config.grad_clip_norm)
        state.opt_neg.step()
        return float(loss.scalar.detach())
    finally:
        params.set_training_mode(False)


def _epoch_phase(config: TrainingConfig, epoch: int) -> str:
    """interleaved: every epoch mixes both kinds; sequential: the first
    config.epochs epochs are positive-only, then a negative-only phase."""
    if config.phase_schedule == "interleaved":
        return "interleaved"
    return "positive" if epoch < config.epochs else "negative"


def train_epoch(state: TrainState, split: DatasetSplit, config: TrainingConfig) -> TrainState:
    """Run one epoch; every sample of each active partition is visited
    exactly once."""
    epoch = state.epoch
    seeds = _derived_seeds(config.seed)
    phase = _epoch_phase(config, epoch)
    use_negative = config.negative_mode != "none" and phase in ("interleaved", "negative")
    use_positive = phase in ("interleaved", "positive")

    tagged: list[tuple[str, object]] = []
    if use_positive and split.train_normal:
        normal = _get_cache(state, split, "train_normal", config)
        tagged.extend(
            ("positive", b)
            for b in batch_iterator(
                normal, config.batch_size, shuffle_seed=seeds["shuffle"], epoch=epoch
            )
        )
    if use_negative and split.train_abnormal:
        abnormal = _get_cache(state, split, "train_abnormal", config)
        tagged.extend(
            ("negative", b)
            for b in batch_iterator(
                abnormal,
                config.batch_size,
                shuffle_seed=seeds["shuffle"] + 1,
                epoch=epoch,
            )
        )
    order = np.random.default_rng([seeds["order"], epoch]).permutation(len(tagged))

    pos_losses: list[float] = []
    neg_losses: list[float] = []
    disc_losses: list[float] = []
    for batch_index, i in enumerate(order):
        kind, batch = tagged[i]
        x = torch.from_numpy(np.ascontiguousarray(batch.data))
        if kind == "positive":
            pos, disc = _positive_step(state, x, config, epoch, batch_index)
            pos_losses.append(pos)
            disc_losses.append(disc)
            state.sample_reads["train_normal"] += len(batch)
        else:
            neg_losses.append(_negative_step(state, x, config, epoch, batch_index))
            state.sample_reads["train_abnormal"] += len(batch)

    state.log_rows.append(
        {
            "epoch": epoch,
            "positive_loss": float(np.mean(pos_losses)) if pos_losses else math.nan,
            "negative_loss": float(np.mean(neg_losses)) if neg_losses else math.nan,
            "discriminator_loss": float(np.mean(disc_losses)) if disc_losses else math.nan,
        }
    )
    state.epoch += 1
    return state


def _load_arrays_into(params: ModelParameters, arrays: dict[str, np.ndarray]) -> None:
    for prefix, module in params.named_modules_dict().items():
        sd = {
            name[len(prefix) + 1 :]: torch.from_numpy(arr.copy())
            for name, arr in arrays.items()
            if name.startswith(prefix + ".")
        }
        module.load_state_dict(sd)


def selected_parameters(state: TrainState, config: TrainingConfig) -> ModelParameters:
    """The parameters evaluation should use: best-by-validation-AUC snapshot
    or the final ones."""
    if config.select_best_by == "val_auc" and state.best is not None:
        params = init_model(config.latent_dim, config.input_shape, seed=0)
        _load_arrays_into(params, state.best.arrays)
        return params
    return state.params


def _total_epochs(config: TrainingConfig) -> int:
    if config.phase_schedule == "sequential" and config.negative_mode != "none":
        return 2 * config.epochs
    return config.epochs


def train(
    split: DatasetSplit,
    config: TrainingConfig,
    state: TrainState | None = None,
) -> tuple[TrainState, evaluate.EvalReport]:
    """Run the full schedule, tracking validation AUC after every epoch.

    Pass a loaded state to resume; training continues from state.epoch and
    is bit-identical to an uninterrupted run.
    """
    if state is None:
        state = init_train_state(config)
    c, h, _ = config.input_shape
    val_cache = preprocess_partition(split.validation, target_channels=c, target_size=h)

    while state.epoch < _total_epochs(config):
        train_epoch(state, split, config)
        epoch_done = state.epoch - 1
        records = evaluate.score_partition(state.params, val_cache, config.batch_size)
        val_auc = evaluate.auc(records)
        state.auc_history.append((epoch_done, val_auc))
        state.log_rows[-1]["val_auc"] = val_auc
        if state.best is None or val_auc > state.best.auc:
            state.best = BestSnapshot(
                epoch=epoch_done,
                auc=val_auc,
                arrays={k: v.copy() for k, v in state.params.named_arrays().items()},
            )

    eval_params = selected_parameters(state, config)
    report = evaluate.evaluate_partition(
        eval_params,
        val_cache,
        batch_size=config.batch_size,
        metadata={
            "checkpoint_id": _checkpoint_id(state, config),
            "dataset": split.descriptor.source,
            "dataset_seed": split.descriptor.seed,
            "seed": config.seed,
            "negative_mode": config.negative_mode,
            "determinism_eligible": state.determinism_eligible,
        },
    )

    if config.checkpoint_dir:
        out = Path(config.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_training_log(state, out / "training_log.csv")
        save_checkpoint(state, config, out / "last.ckpt")
    return state, report


def _checkpoint_id(state: TrainState, config: TrainingConfig) -> str:
    if config.select_best_by == "val_auc" and state.best is not None:
        return f"best-epoch-{state.best.epoch}"
    return f"last-epoch-{state.epoch - 1}"


def write_training_log(state: TrainState, path: Union[str, Path]) -> None:
    """One CSV line per epoch: losses and validation AUC."""
    fields = ["epoch", "positive_loss", "negative_loss", "discriminator_loss", "val_auc"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in state.log_rows:
            writer.writerow({k: row.get(k, math.nan) for k in fields})


# ---------------------------------------------------------------------------
# Checkpoint format: magic "ADNL1", JSON header, named little-endian arrays,
# CRC32 trailer.
# ---------------------------------------------------------------------------


def _optimizer_arrays(
    name: str, opt: torch.optim.Adam
) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    arrays: dict[str, np.ndarray] = {}
    steps: dict[str, float] = {}
    for idx, entry in opt.state_dict()["state"].items():
        arrays[f"opt.{name}.{idx}.exp_avg"] = entry["exp_avg"].numpy()
        arrays[f"opt.{name}.{idx}.exp_avg_sq"] = entry["exp_avg_sq"].numpy()
        steps[str(idx)] = float(entry["step"])
    return arrays, steps


def _restore_optimizer(
    opt: torch.optim.Adam, name: str, arrays: dict[str, np.ndarray], steps: dict[str, float]
) -> None:
    sd = opt.state_dict()
    state = {}
    for idx_str, step in steps.items():
        idx = int(idx_str)
        state[idx] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(arrays[f"opt.{name}.{idx}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.{idx}.exp_avg_sq"].copy()),
        }
    sd["state"] = state
    opt.load_state_dict(sd)


_DTYPE_CODES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


def save_checkpoint(
    state: TrainState, config: TrainingConfig, path: Union[str, Path]
) -> None:
    arrays: dict[str, np.ndarray] = {
        f"model.{k}": v for k, v in state.params.named_arrays().items()
    }
    if state.best is not None:
        arrays.update({f"best.{k}": v for k, v in state.best.arrays.items()})
    opt_steps: dict[str, dict[str, float]] = {}
    for name, opt in (
        ("ae", state.opt_ae),
        ("neg", state.opt_neg),
        ("disc", state.opt_disc),
        ("gen", state.opt_gen),
    ):
        a, s = _optimizer_arrays(name, opt)
        arrays.update(a)
        opt_steps[name] = s

    index = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = arrays[name]
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f4"
        arr = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[dtype])
        index.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payload.extend(arr.tobytes())

    cfg = asdict(config)
    cfg["input_shape"] = list(config.input_shape)
    if cfg["checkpoint_dir"] is not None:
        cfg["checkpoint_dir"] = str(cfg["checkpoint_dir"])
    header = {
        "config": cfg,
        "epoch": state.epoch,
        "auc_history": [[e, a] for e, a in state.auc_history],
        "best": None
        if state.best is None
        else {"epoch": state.best.epoch, "auc": state.best.auc},
        "opt_steps": opt_steps,
        "prior_rng": base64.b64encode(
            state.prior_generator.get_state().numpy().tobytes()
        ).decode("ascii"),
        "sample_reads": state.sample_reads,
        "determinism_eligible": state.determinism_eligible,
        "log_rows": state.log_rows,
        "arrays": index,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + bytes(payload)
    )
    blob += struct.pack("<I", zlib.crc32(blob))
    Path(path).write_bytes(blob)


def load_checkpoint(path: Union[str, Path]) -> tuple[TrainState, TrainingConfig]:
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointVersionError(f"{path}: not an ADNL1 checkpoint")
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointCorruptError(f"{path}: truncated checkpoint")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointCorruptError(f"{path}: checksum mismatch")

    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack("<I", blob[offset : offset + 4])
    offset += 4
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header") from exc
    offset += header_len

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = _DTYPE_CODES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        arrays[entry["name"]] = np.frombuffer(
            blob[offset : offset + nbytes], dtype=dtype
        ).reshape(entry["shape"])
        offset += nbytes

    cfg_dict = dict(header["config"])
    cfg_dict["input_shape"] = tuple(cfg_dict["input_shape"])
    config = TrainingConfig(**cfg_dict)

    state = init_train_state(config)
    _load_arrays_into(
        state.params,
        {k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")},
    )
    for name, opt in (
        ("ae", state.opt_ae),
        ("neg", state.opt_neg),
        ("disc", state.opt_disc),
        ("gen", state.opt_gen),
    ):
        _restore_optimizer(opt, name, arrays, header["opt_steps"][name])
    rng_bytes = base64.b64decode(header["prior_rng"])
    state.prior_generator.set_state(
        torch.from_numpy(np.frombuffer(rng_bytes, dtype=np.uint8).copy())
    )
    state.epoch = header["epoch"]
    state.auc_history = [(int(e), float(a)) for e, a in header["auc_history"]]
    if header["best"] is not None:
        state.best = BestSnapshot(
            epoch=int(header["best"]["epoch"]),
            auc=float(header["best"]["auc"]),
            arrays={
                k[len("best.") :]: v.copy()
                for k, v in arrays.items()
                if k.startswith("best.")
            },
        )
    state.log_rows = header["log_rows"]
    state.sample_reads = dict(header["sample_reads"])
    state.determinism_eligible = bool(header["determinism_eligible"])
    return state, config
