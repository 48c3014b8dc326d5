"""Teacher-student distillation over global and local crops.

One step: crop every cloud, run the teacher on the global crops (no tape),
centre and sharpen its logits into targets, run the student on all crops,
take cross entropies global-to-global (cross pairs only) and
local-to-global, backpropagate into the student, apply AdamW, move the
teacher towards the student by EMA, and finally update the centre from
this batch's raw teacher logits.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .backbone import (BackboneConfig, DegenerateInputError, ModelParams, batch_patch_inputs,
                       forward_inputs, init_params)
from .checkpoint import read_arrays, write_arrays
from .geometry import CropConfig, DegenerateCropError, make_crop_set

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when a loss or gradient becomes NaN/Inf; carries the step's metrics."""

    def __init__(self, message: str, metrics: dict):
        super().__init__(message)
        self.metrics = metrics


@dataclass
class TrainConfig:
    n_global: int = 2
    n_local: int = 8
    n_resolution: int = 2
    global_ratio: tuple[float, float] = (0.7, 1.0)
    local_ratio: tuple[float, float] = (0.2, 0.5)
    global_size: int | None = 1024
    local_size: int | None = 256
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_rate: float = 0.9
    momentum: float = 0.996
    w_global: float = 1.0
    w_local: float = 1.0
    centering: bool = True
    epochs: int = 100
    batch_size: int = 16
    base_lr: float = 5e-4
    warmup_epochs: int = 10
    weight_decay: float = 0.04
    seed: int = 0
    checkpoint_every: int = 10
    prefetch: bool = True

    def __post_init__(self):
        self.global_ratio = tuple(self.global_ratio)
        self.local_ratio = tuple(self.local_ratio)
        if not (self.teacher_temp > 0 and self.student_temp > 0):
            raise ValueError("temperatures must be positive")
        if not 0 < self.center_rate < 1:
            raise ValueError(f"center_rate must lie in (0, 1), got {self.center_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.w_global < 0 or self.w_local < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_global < 2:
            raise ValueError("at least two global crops are needed for cross-view pairs")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def crop_config(self, k_patch: int) -> CropConfig:
        return CropConfig(self.n_global, self.n_local, self.n_resolution, self.global_ratio,
                          self.local_ratio, k_patch, self.global_size, self.local_size)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["global_ratio"], d["local_ratio"] = list(self.global_ratio), list(self.local_ratio)
        return d


# targets, losses and schedules -------------------------------------------------

def teacher_targets(global_logits, center, teacher_temp: float) -> np.ndarray:
    """``softmax((o - c) / tau_t)``, returned as a plain array (stop-gradient)."""
    logits = global_logits.data if isinstance(global_logits, Tensor) else np.asarray(global_logits)
    return ad.softmax(Tensor(logits - center), teacher_temp).data


def update_center(center: np.ndarray, teacher_logits, rate: float) -> np.ndarray:
    """EMA of the mean of all raw teacher global logits in the batch."""
    logits = np.asarray(teacher_logits, dtype=np.float64).reshape(-1, center.shape[-1])
    if len(logits) == 0:
        raise ValueError("update_center needs a non-empty batch")
    return rate * center + (1.0 - rate) * logits.mean(axis=0)


def _batched(x, ndim: int):
    return x if x.ndim == ndim else x[None]


def loss_global(targets, student_probs) -> Tensor:
    """Mean of ``H(t_i, s_j)`` over ordered pairs ``i != j``, averaged over the batch.

    ``targets`` is ``(I, K)`` or ``(B, I, K)``; ``student_probs`` matches.
    """
    t = _batched(np.asarray(targets), 3)
    s = ad.as_tensor(student_probs)
    s = s if s.ndim == 3 else ad.reshape(s, (1,) + s.shape)
    n = t.shape[1]
    if n < 2:
        raise ValueError("loss_global needs at least two global crops")
    h = ad.cross_entropy(t[:, :, None, :], ad.reshape(s, (s.shape[0], 1) + s.shape[1:]))
    off_diag = 1.0 - np.eye(n)
    per_cloud = ad.scalar_multiply(ad.sum_(ad.multiply(h, off_diag), axis=(1, 2)), 1.0 / (n * (n - 1)))
    return ad.mean(per_cloud)


def loss_local(targets, student_local_probs) -> Tensor:
    """Mean of ``H(t_i, s_j)`` over every (global target, local crop) pair."""
    t = _batched(np.asarray(targets), 3)
    s = ad.as_tensor(student_local_probs)
    s = s if s.ndim == 3 else ad.reshape(s, (1,) + s.shape)
    h = ad.cross_entropy(t[:, :, None, :], ad.reshape(s, (s.shape[0], 1) + s.shape[1:]))
    return ad.mean(h)


def total_loss(loss_g, loss_l, w_global: float = 1.0, w_local: float = 1.0) -> Tensor:
    return ad.add(ad.scalar_multiply(loss_g, w_global), ad.scalar_multiply(loss_l, w_local))


def ema_update(teacher: ModelParams, student: ModelParams, momentum: float) -> ModelParams:
    """``teacher <- momentum * teacher + (1 - momentum) * student`` for every array."""
    if not teacher.same_shapes(student):
        raise ValueError("teacher and student parameter shapes differ")
    if momentum == 1.0:
        return teacher.copy()
    if momentum == 0.0:
        return student.copy()
    return ModelParams(teacher.config, {
        k: momentum * teacher[k] + (1.0 - momentum) * student[k] for k in teacher})


def momentum_schedule(step: int, total_steps: int, base: float = 0.996) -> float:
    """Cosine ramp from ``base`` at step 0 to exactly 1 at ``total_steps``."""
    u = min(max(step / total_steps, 0.0), 1.0)
    return 1.0 - (1.0 - base) * (math.cos(math.pi * u) + 1.0) / 2.0


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    u = min((step - warmup_steps) / (total_steps - warmup_steps), 1.0)
    return base_lr * (math.cos(math.pi * u) + 1.0) / 2.0


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8,
               decay: Callable[[str], bool] = lambda name: True) -> None:
    """One in-place AdamW update; weight decay is decoupled from the moments."""
    b1, b2 = betas
    state.t += 1
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m[name] = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = state.v[name] = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        if weight_decay and decay(name):
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def decays(name: str) -> bool:
    """Weight matrices are decayed; biases, norms and the class token are not."""
    return name.endswith(".w")


# state -------------------------------------------------------------------------

@dataclass
class TrainState:
    teacher: ModelParams
    student: ModelParams
    center: np.ndarray
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0
    epoch: int = 0
    skipped: int = 0

    @classmethod
    def fresh(cls, backbone: BackboneConfig, seed=0) -> "TrainState":
        student = init_params(backbone, np.random.default_rng([seed, 0]))
        return cls(student.copy(), student, np.zeros(backbone.out_dim))

    def save(self, path, train_config: TrainConfig) -> None:
        arrays = {"center": self.center}
        arrays.update({f"teacher/{k}": v for k, v in self.teacher.items()})
        arrays.update({f"student/{k}": v for k, v in self.student.items()})
        arrays.update({f"adam.m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam.v/{k}": v for k, v in self.adam.v.items()})
        meta = {"kind": "train", "backbone": self.teacher.config.to_dict(),
                "train": train_config.to_dict(), "step": self.step, "epoch": self.epoch,
                "adam_t": self.adam.t, "skipped": self.skipped, "seed": train_config.seed}
        write_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> tuple["TrainState", TrainConfig]:
        arrays, meta = read_arrays(path)
        if meta.get("kind") != "train":
            raise ValueError(f"{path} is not a training checkpoint")
        backbone = BackboneConfig(**meta["backbone"])

        def group(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        state = cls(ModelParams(backbone, group("teacher/")), ModelParams(backbone, group("student/")),
                    arrays["center"], AdamState(group("adam.m/"), group("adam.v/"), meta["adam_t"]),
                    meta["step"], meta["epoch"], meta["skipped"])
        return state, TrainConfig(**meta["train"])


def load_teacher(path) -> ModelParams:
    """Teacher weights from either a training checkpoint or a backbone file."""
    arrays, meta = read_arrays(path)
    if meta.get("kind") == "train":
        return ModelParams(BackboneConfig(**meta["backbone"]),
                           {k[8:]: v for k, v in arrays.items() if k.startswith("teacher/")})
    return ModelParams(BackboneConfig(**meta["config"]), arrays)


# one step ------------------------------------------------------------------------

@dataclass
class PreparedBatch:
    """Patch inputs per crop role, stacked over usable samples."""

    globals: np.ndarray        # (B * I, S_g, k, C)
    locals: np.ndarray | None  # (B * J, S_l, k, C)
    resolution: np.ndarray | None  # (B * R, S_r, k, C)
    n_samples: int
    skipped: int


def prepare_batch(clouds: Sequence[np.ndarray], seeds: Sequence, config: TrainConfig,
                  backbone: BackboneConfig) -> PreparedBatch:
    crop_cfg = config.crop_config(backbone.k_patch)
    g, l, r = [], [], []
    skipped = 0
    for cloud, seed in zip(clouds, seeds):
        rng = np.random.default_rng(seed)
        try:
            cs = make_crop_set(cloud, crop_cfg, rng)
            gi = batch_patch_inputs(cs.globals, backbone, rng)[0]
            li = batch_patch_inputs(cs.crops, backbone, rng)[0] if cs.crops else None
            ri = batch_patch_inputs(cs.resolution, backbone, rng)[0] if cs.resolution else None
        except (DegenerateCropError, DegenerateInputError) as exc:
            log.warning("skipping sample: %s", exc)
            skipped += 1
            continue
        g.append(gi)
        l.append(li)
        r.append(ri)

    def cat(parts):
        return np.concatenate(parts) if parts and parts[0] is not None else None

    return PreparedBatch(cat(g), cat(l), cat(r), len(g), skipped)


def train_step(batch: PreparedBatch, state: TrainState, config: TrainConfig,
               total_steps: int, warmup_steps: int) -> dict:
    """Apply one optimisation step in place and return its metrics."""
    lr = lr_schedule(state.step, total_steps, warmup_steps, config.base_lr)
    lam = momentum_schedule(state.step, total_steps, config.momentum)
    metrics = {"step": state.step, "epoch": state.epoch}
    B, I = batch.n_samples, config.n_global
    if B == 0:
        state.skipped += batch.skipped
        state.step += 1
        return {**metrics, "loss_g": None, "loss_l": None, "loss": None, "lr": lr, "lambda": lam,
                "center_norm": float(np.linalg.norm(state.center)), "skipped": state.skipped}
    bcfg = state.student.config
    K = bcfg.out_dim

    _, t_logits, _ = forward_inputs(batch.globals, state.teacher.tensors(), bcfg)
    t_logits = t_logits.data.reshape(B, I, K)
    targets = teacher_targets(t_logits, state.center, config.teacher_temp)

    with Tape() as tape:
        P = state.student.tensors(requires_grad=True)
        _, s_glob, _ = forward_inputs(batch.globals, P, bcfg)
        probs_g = ad.reshape(ad.softmax(s_glob, config.student_temp), (B, I, K))
        loss_g = loss_global(targets, probs_g)
        local_parts = []
        for inputs in (batch.locals, batch.resolution):
            if inputs is not None:
                _, s_loc, _ = forward_inputs(inputs, P, bcfg)
                local_parts.append(ad.reshape(ad.softmax(s_loc, config.student_temp), (B, -1, K)))
        if local_parts:
            loss_l = loss_local(targets, ad.concat(local_parts, axis=1))
        else:
            loss_l = Tensor(0.0)
        loss = total_loss(loss_g, loss_l, config.w_global, config.w_local)
        tape.backward(loss)

    metrics.update(loss_g=float(loss_g.data), loss_l=float(loss_l.data), loss=float(loss.data),
                   lr=lr, **{"lambda": lam})
    grads = {k: t.grad for k, t in P.items()}
    if not (np.isfinite(loss.data) and all(np.all(np.isfinite(g)) for g in grads.values() if g is not None)):
        raise NumericalError(f"non-finite loss or gradient at step {state.step}", metrics)

    adamw_step(state.student.arrays, grads, state.adam, lr, config.weight_decay, decay=decays)
    state.teacher = ema_update(state.teacher, state.student, lam)
    if config.centering:
        state.center = update_center(state.center, t_logits, config.center_rate)
    state.skipped += batch.skipped
    state.step += 1
    metrics.update(center_norm=float(np.linalg.norm(state.center)), skipped=state.skipped)
    return metrics


# orchestration -------------------------------------------------------------------

def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(n_samples // batch_size, 1)


def epoch_batches(n_samples: int, epoch: int, config: TrainConfig) -> list[tuple[np.ndarray, list]]:
    """Shuffled index batches for ``epoch`` with one seed sequence per sample."""
    order = np.random.default_rng([config.seed, 1, epoch]).permutation(n_samples)
    out = []
    for s in range(steps_per_epoch(n_samples, config.batch_size)):
        idx = order[s * config.batch_size:(s + 1) * config.batch_size]
        out.append((idx, [np.random.SeedSequence([config.seed, 2, epoch, int(i)]) for i in idx]))
    return out


def pretrain(clouds: Sequence[np.ndarray], backbone: BackboneConfig, config: TrainConfig,
             out_dir=None, state: TrainState | None = None, stop_after: int | None = None,
             on_step: Callable[[dict], None] | None = None) -> tuple[TrainState, list[dict]]:
    """Train from scratch (or continue ``state``) for ``config.epochs`` epochs.

    With ``out_dir`` set, appends one JSON line per step to ``metrics.jsonl``
    and writes ``checkpoint_last.bin`` plus periodic ``checkpoint_eNNNN.bin``.
    ``stop_after`` ends the run after that global step (used to emulate an
    interruption).
    """
    clouds = [np.asarray(c, dtype=np.float64) for c in clouds]
    if state is None:
        state = TrainState.fresh(backbone, config.seed)
    per_epoch = steps_per_epoch(len(clouds), config.batch_size)
    total = per_epoch * config.epochs
    warmup = per_epoch * config.warmup_epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "a" if state.step else "w")
    history: list[dict] = []

    def jobs() -> Iterable:
        for epoch in range(state.epoch, config.epochs):
            for s, (idx, seeds) in enumerate(epoch_batches(len(clouds), epoch, config)):
                if epoch * per_epoch + s >= state.step:
                    yield epoch, idx, seeds

    def prepare(job):
        epoch, idx, seeds = job
        return epoch, prepare_batch([clouds[i] for i in idx], seeds, config, backbone)

    pool = ThreadPoolExecutor(max_workers=1) if config.prefetch else None
    try:
        it = iter(jobs())
        pending = _submit(pool, prepare, next(it, None))
        while pending is not None:
            epoch, batch = pending.result() if pool else pending
            pending = _submit(pool, prepare, next(it, None))
            state.epoch = epoch
            t0 = time.perf_counter()
            try:
                metrics = train_step(batch, state, config, total, warmup)
            except NumericalError as exc:
                if out is not None:
                    (out / "nan_dump.json").write_text(json.dumps(exc.metrics, indent=1))
                raise
            metrics["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            history.append(metrics)
            if out is not None:
                log_fh.write(json.dumps(metrics) + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(metrics)
            end_of_epoch = state.step % per_epoch == 0
            if end_of_epoch:
                state.epoch = epoch + 1
                if out is not None and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                    state.save(out / f"checkpoint_e{state.epoch:04d}.bin", config)
            if stop_after is not None and state.step >= stop_after:
                break
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)
        if out is not None:
            log_fh.close()
            state.save(out / "checkpoint_last.bin", config)
    return state, history


def _submit(pool, fn, job):
    if job is None:
        return None
    return pool.submit(fn, job) if pool is not None else fn(job)
