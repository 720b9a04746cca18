"""Training loop: per-record gradient steps with a decoupled-weight-decay
Adam optimizer, seeded sub-streams for every random choice, and a binary
checkpoint format that makes interrupted runs resumable bit for bit.

Randomness discipline. Every draw comes from a named child of the config
seed, so runs are reproducible and the two training modes stay comparable:

    [seed, 1, epoch, i]   per-record stream (augmentation first, then the
                          mode-specific draws), i the position in that
                          epoch's shuffled order
    [seed, 2, epoch]      shuffle order
    [seed, 3]             parameter initialization
    [seed, 5]             frozen validation inputs

Augmentation draws come first in the per-record stream, so the diffusion
and baseline modes see identical augmented records under the same seed;
only the draws after that point differ.

Checkpoints are written in a small self-describing container ("SPCK"):
magic, version, then named float32 entries for every parameter tensor, the
optimizer moments, the step/epoch counters, and enough architecture
metadata to rebuild the network. Saving snaps the live parameters and
moments to their float32 images, so a run that continues past a checkpoint
computes exactly what a resumed run computes.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional
import csv
import struct

import numpy as np

from .augment import AugmentConfig, augment_record
from .denoiser import Denoiser, backward, forward_with_tape, make_denoiser
from .errors import DivergenceError
from .forward import NoiseDraw, ReferenceImage, channel_dropout, concat_condition, q_sample
from .heatmap import encode_landmarks, to_diffusion_scale
from .loss import (
    LossWeights,
    loss_combined,
    loss_combined_grad,
    loss_nll,
    loss_nll_grad,
    loss_simple,
    loss_simple_grad,
)
from .schedule import Schedule, make_linear_schedule

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "FitResult",
    "init_optimizer",
    "optimizer_step",
    "make_schedule",
    "train_step_diffusion",
    "train_step_baseline",
    "frozen_validation_loss",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
]

MODES = ("diffusion", "baseline")
PARAMETERIZATIONS = ("x0", "eps")

_SPCK_MAGIC = b"SPCK"
_SPCK_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the records themselves."""

    epochs: int = 120
    batch_size: int = 1
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_opt: float = 1e-8
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    loss: LossWeights = field(default_factory=LossWeights)
    # None disables augmentation entirely (records pass through untouched)
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    dropout_p: float = 0.0005
    parameterization: str = "x0"
    mode: str = "diffusion"
    seed: int = 0
    enc_plan: tuple = (8, 16, 32)
    dec_plan: tuple = (16, 8)
    time_dim: int = 32
    gn_groups: int = 4
    checkpoint_every: int = 0

    def __post_init__(self):
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 < b < 1.0:
                problems.append(f"{name} must lie in (0, 1), got {b}")
        if self.epsilon_opt <= 0:
            problems.append(f"epsilon_opt must be positive, got {self.epsilon_opt}")
        if not 0.0 <= self.dropout_p <= 1.0:
            problems.append(f"dropout_p must lie in [0, 1], got {self.dropout_p}")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.parameterization not in PARAMETERIZATIONS:
            problems.append(
                f"parameterization must be one of {PARAMETERIZATIONS}, got {self.parameterization!r}"
            )
        if self.checkpoint_every < 0:
            problems.append(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if problems:
            raise ValueError("; ".join(problems))
        object.__setattr__(self, "enc_plan", tuple(int(c) for c in self.enc_plan))
        object.__setattr__(self, "dec_plan", tuple(int(c) for c in self.dec_plan))


@dataclass
class OptimizerState:
    """First/second moment accumulators plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass(frozen=True)
class FitResult:
    denoiser: Denoiser
    opt_state: OptimizerState
    schedule: Schedule
    history: list


def init_optimizer(n_params: int) -> OptimizerState:
    return OptimizerState(m=np.zeros(n_params), v=np.zeros(n_params), step=0)


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState, cfg: TrainConfig):
    """One update with decoupled weight decay, in place.

    theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta)
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("non-finite gradient reached the optimizer")
    state.step += 1
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * grads
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * grads * grads
    mhat = state.m / (1.0 - cfg.beta1**state.step)
    vhat = state.v / (1.0 - cfg.beta2**state.step)
    params -= cfg.learning_rate * (
        mhat / (np.sqrt(vhat) + cfg.epsilon_opt) + cfg.weight_decay * params
    )
    return params, state


def make_schedule(cfg: TrainConfig) -> Schedule:
    return make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def build_denoiser(cfg: TrainConfig, image_channels: int, n_landmarks: int) -> Denoiser:
    """Fresh network for this config; input is the conditioning image alone
    in baseline mode, image plus noisy heatmaps otherwise."""
    in_ch = image_channels if cfg.mode == "baseline" else image_channels + n_landmarks
    return make_denoiser(
        in_ch,
        n_landmarks,
        np.random.default_rng([cfg.seed, 3]),
        enc_plan=cfg.enc_plan,
        dec_plan=cfg.dec_plan,
        time_dim=cfg.time_dim,
        gn_groups=cfg.gn_groups,
        predicts_x0=cfg.parameterization == "x0",
    )


def _augmented(record, cfg: TrainConfig, rng):
    if cfg.augment is None:
        return record.image.values, record.ground_truth
    return augment_record(record.image.values, record.ground_truth, cfg.augment, rng)


def _diffusion_pass(d: Denoiser, record, sched: Schedule, cfg: TrainConfig, rng):
    """Forward/backward for one record; returns (breakdown, param grads)."""
    img, lm = _augmented(record, cfg, rng)
    h, w = img.shape[1:]
    target_unit = encode_landmarks(lm, h, w)
    x0 = to_diffusion_scale(target_unit)
    noised_input = channel_dropout(x0, cfg.dropout_p, rng)
    t = int(rng.integers(1, cfg.T + 1))
    eps = NoiseDraw(rng.standard_normal(x0.values.shape))
    x_t = q_sample(noised_input, t, eps, sched)
    inp = concat_condition(ReferenceImage(img), x_t)
    out, tape = forward_with_tape(d, inp, t)
    if cfg.parameterization == "x0":
        total, parts = loss_combined(x0, out, cfg.loss)
        grad_out = loss_combined_grad(x0, out, cfg.loss)
        breakdown = {"loss_s": parts["loss_s"], "loss_nll": parts["loss_nll"], "total": total, "t": t}
    else:
        total = loss_simple(eps, out)
        grad_out = loss_simple_grad(eps, out)
        breakdown = {"loss_simple": total, "total": total, "t": t}
    return breakdown, backward(d, tape, grad_out)


def _baseline_pass(d: Denoiser, record, cfg: TrainConfig, rng):
    """Cross-entropy on the conditioning image alone, timestep pinned to 0."""
    img, lm = _augmented(record, cfg, rng)
    h, w = img.shape[1:]
    target_unit = encode_landmarks(lm, h, w)
    out, tape = forward_with_tape(d, np.asarray(img, dtype=np.float64), 0)
    total = loss_nll(target_unit, out, cfg.loss.epsilon_floor)
    grad_out = loss_nll_grad(target_unit, out, cfg.loss.epsilon_floor)
    breakdown = {"loss_nll": total, "total": total, "t": 0}
    return breakdown, backward(d, tape, grad_out)


def train_step_diffusion(d, opt, record, sched, cfg: TrainConfig, rng):
    """Augment, encode, noise, predict, and apply one optimizer update."""
    breakdown, grads = _diffusion_pass(d, record, sched, cfg, rng)
    optimizer_step(d.params, grads, opt, cfg)
    return breakdown


def train_step_baseline(d, opt, record, cfg: TrainConfig, rng):
    breakdown, grads = _baseline_pass(d, record, cfg, rng)
    optimizer_step(d.params, grads, opt, cfg)
    return breakdown


def _frozen_inputs(records, sched: Schedule, cfg: TrainConfig):
    """Fixed (t, eps) per held-out record so the only moving part across
    epochs is the parameter vector."""
    rng = np.random.default_rng([cfg.seed, 5])
    frozen = []
    for r in records:
        t = int(rng.integers(1, cfg.T + 1))
        eps = NoiseDraw(rng.standard_normal((r.ground_truth.count, r.image.height, r.image.width)))
        frozen.append((r, t, eps))
    return frozen


def frozen_validation_loss(d: Denoiser, records, sched: Schedule, cfg: TrainConfig) -> float:
    """Mean loss over a fixed batch with fixed noise; raises DivergenceError
    if any term comes out non-finite."""
    frozen = _frozen_inputs(records[: min(4, len(records))], sched, cfg)
    totals = []
    for r, t, eps in frozen:
        try:
            target_unit = encode_landmarks(r.ground_truth, r.image.height, r.image.width)
            if cfg.mode == "baseline":
                out = d.predict(r.image.values, 0)
                total = loss_nll(target_unit, out, cfg.loss.epsilon_floor)
            else:
                x0 = to_diffusion_scale(target_unit)
                x_t = q_sample(x0, t, eps, sched)
                out = d.predict(concat_condition(r.image, x_t), t)
                if cfg.parameterization == "x0":
                    total, _ = loss_combined(x0, out, cfg.loss)
                else:
                    total = loss_simple(eps, out)
        except (ValueError, FloatingPointError) as exc:
            raise DivergenceError(f"validation loss unavailable: {exc}") from exc
        totals.append(total)
    mean = float(np.mean(totals))
    if not np.isfinite(mean):
        raise DivergenceError(f"validation loss is {mean}")
    return mean


def _snap_f32(d: Denoiser, opt: OptimizerState):
    """Round the live state to its float32 image so continuing equals
    resuming from the file just written."""
    d.params[:] = d.params.astype(np.float32)
    opt.m[:] = opt.m.astype(np.float32)
    opt.v[:] = opt.v.astype(np.float32)


def fit(records, cfg: TrainConfig, out_dir=None, val_records=None, resume=None) -> FitResult:
    """Run the full loop: per-epoch shuffle, per-record steps with optional
    gradient accumulation, periodic checkpoints, and a CSV loss log.

    `resume` continues from a checkpoint file: epochs already recorded there
    are skipped and the remaining ones replay exactly as they would have in
    the uninterrupted run.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot fit on an empty corpus")
    n = records[0].ground_truth.count
    sched = make_schedule(cfg)

    start_epoch = 1
    if resume is not None:
        d, opt, last_epoch, baseline = load_checkpoint(resume)
        if baseline != (cfg.mode == "baseline"):
            raise ValueError("checkpoint mode does not match config mode")
        start_epoch = last_epoch + 1
    else:
        d = build_denoiser(cfg, records[0].image.channels, n)
        opt = init_optimizer(d.params.size)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    held_out = list(val_records) if val_records else records

    history = []
    global_step = (start_epoch - 1) * len(records)
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(records))
        for batch_start in range(0, len(order), cfg.batch_size):
            batch = order[batch_start : batch_start + cfg.batch_size]
            grad_sum = np.zeros_like(d.params)
            for offset, rec_idx in enumerate(batch):
                step_rng = np.random.default_rng([cfg.seed, 1, epoch, batch_start + offset])
                record = records[rec_idx]
                if cfg.mode == "baseline":
                    breakdown, grads = _baseline_pass(d, record, cfg, step_rng)
                else:
                    breakdown, grads = _diffusion_pass(d, record, sched, cfg, step_rng)
                grad_sum += grads
                global_step += 1
                history.append({"epoch": epoch, "step": global_step, **breakdown})
            optimizer_step(d.params, grad_sum / len(batch), opt, cfg)
        frozen_validation_loss(d, held_out, sched, cfg)
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(
                out_dir / f"checkpoint_epoch{epoch}.spck",
                d,
                opt,
                epoch,
                baseline=cfg.mode == "baseline",
            )
            _snap_f32(d, opt)

    if out_dir is not None:
        save_checkpoint(
            out_dir / "checkpoint.spck", d, opt, max(cfg.epochs, start_epoch - 1),
            baseline=cfg.mode == "baseline",
        )
        _snap_f32(d, opt)
        with open(out_dir / "loss_log.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "step", "t", "loss_s", "loss_nll", "total"])
            for row in history:
                writer.writerow(
                    [
                        row["epoch"],
                        row["step"],
                        row["t"],
                        repr(row.get("loss_s", 0.0)),
                        repr(row.get("loss_nll", 0.0)),
                        repr(row["total"]),
                    ]
                )

    return FitResult(denoiser=d, opt_state=opt, schedule=sched, history=history)


def _entries_for(d: Denoiser, opt: OptimizerState, epoch: int, baseline: bool):
    entries = []
    for name in d.index:
        entries.append((f"param.{name}", d.param_view(name)))
    entries.append(("opt.m", opt.m))
    entries.append(("opt.v", opt.v))
    entries.append(("opt.step", np.array(float(opt.step))))
    entries.append(("epoch", np.array(float(epoch))))
    entries.append(("meta.in_channels", np.array(float(d.in_channels))))
    entries.append(("meta.out_channels", np.array(float(d.out_channels))))
    entries.append(("meta.time_dim", np.array(float(d.time_dim))))
    entries.append(("meta.gn_groups", np.array(float(d.gn_groups))))
    entries.append(("meta.predicts_x0", np.array(float(d.predicts_x0))))
    entries.append(("meta.baseline", np.array(float(baseline))))
    entries.append(("meta.enc_plan", np.array(d.enc_plan, dtype=np.float64)))
    entries.append(("meta.dec_plan", np.array(d.dec_plan, dtype=np.float64)))
    return entries


def save_checkpoint(path, d: Denoiser, opt: OptimizerState, epoch: int, baseline: bool):
    """Write the SPCK container; float32 payload throughout."""
    entries = _entries_for(d, opt, epoch, baseline)
    with open(path, "wb") as fh:
        fh.write(_SPCK_MAGIC)
        fh.write(struct.pack("<II", _SPCK_VERSION, len(entries)))
        for name, array in entries:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(array, dtype=np.float32)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            fh.write(arr.tobytes())


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise ValueError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Read an SPCK file back into a network, optimizer state, and epoch.

    The network is rebuilt from the stored architecture metadata, then every
    parameter tensor is overwritten from the file.
    """
    entries = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _SPCK_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != _SPCK_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "entry name length"))
            name = _read_exact(fh, name_len, "entry name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "entry rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "entry shape")) if ndim else ()
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = _read_exact(fh, 4 * size, f"entry {name!r}")
            entries[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after the last entry")

    def scalar(name):
        if name not in entries:
            raise ValueError(f"{path}: missing entry {name!r}")
        return entries[name].item()

    d = make_denoiser(
        int(scalar("meta.in_channels")),
        int(scalar("meta.out_channels")),
        np.random.default_rng(0),
        enc_plan=tuple(int(c) for c in entries["meta.enc_plan"]),
        dec_plan=tuple(int(c) for c in entries["meta.dec_plan"]),
        time_dim=int(scalar("meta.time_dim")),
        gn_groups=int(scalar("meta.gn_groups")),
        predicts_x0=bool(scalar("meta.predicts_x0")),
    )
    for name in d.index:
        key = f"param.{name}"
        if key not in entries:
            raise ValueError(f"{path}: missing entry {key!r}")
        view = d.param_view(name)
        if entries[key].shape != view.shape:
            raise ValueError(
                f"{path}: entry {key!r} has shape {entries[key].shape}, expected {view.shape}"
            )
        view[:] = entries[key]
    opt = OptimizerState(m=entries["opt.m"].copy(), v=entries["opt.v"].copy(), step=int(scalar("opt.step")))
    if opt.m.shape != d.params.shape or opt.v.shape != d.params.shape:
        raise ValueError(f"{path}: optimizer moments do not match the parameter count")
    return d, opt, int(scalar("epoch")), bool(scalar("meta.baseline"))
