"""Multi-task training loop with the alternating cosine-adversarial schedule.

A maximize phase trains only the cosine mapping block (gradient ascent on
the squared-cosine loss); a minimize phase trains encoder, decomposition,
and heads against the weighted total objective while the mapping block stays
frozen (its weights still carry gradient upstream). Freezing is absolute:
the complement group is bitwise untouched in each phase.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import RATE_TO_INDEX, UtteranceRecord
from .errors import ConfigError, TrainingDivergedError
from .losses import (
    LossConfig,
    am_softmax_grad,
    cosine_adversarial_grad,
    rate_ce_grad,
    total_loss,
)
from .model import (
    ModelConfig,
    ModelParams,
    cosine_map,
    cosine_map_backward,
    decompose_backward,
    decompose_forward,
    encode_backward,
    encode_forward,
    id_logits_backward,
    id_logits_forward,
    init_params,
    rate_logits,
    rate_logits_backward,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdversarialSchedule:
    """Alternation constants; the phase is a pure function of the step."""

    max_phase_iters: int = 20
    min_phase_iters: int = 50

    def __post_init__(self) -> None:
        if self.max_phase_iters <= 0 or self.min_phase_iters <= 0:
            raise ValueError("phase lengths must be positive")

    @property
    def cycle(self) -> int:
        return self.max_phase_iters + self.min_phase_iters

    def phase_at(self, step: int) -> str:
        return "maximize" if step % self.cycle < self.max_phase_iters else "minimize"

    def trace(self, n_steps: int) -> list[str]:
        return [self.phase_at(s) for s in range(n_steps)]


class TrainExample(NamedTuple):
    frames: np.ndarray
    speaker: int
    rate: int


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _sgd_update(params: ModelParams, grads: dict[str, np.ndarray], opt: OptimizerState) -> None:
    for name, g in grads.items():
        v = opt.velocities.get(name)
        if v is None:
            v = np.zeros_like(params.arrays[name])
            opt.velocities[name] = v
        v *= opt.momentum
        v += g
        params.arrays[name] -= opt.learning_rate * v
    opt.step += 1


def batch_objective(
    batch: Sequence[TrainExample],
    params: ModelParams,
    loss_cfg: LossConfig,
    mode: str,
):
    """Batch-mean losses and gradients for one phase.

    mode 'max': gradients of -L_cos for the cosine-map group only.
    mode 'min': gradients of the total loss for every group except cosine_map
    (gradients still flow through the frozen map into the branches).
    mode 'all': gradients of the total loss for every group (gradient checks).
    """
    if mode not in ("max", "min", "all"):
        raise ValueError(f"unknown objective mode {mode!r}")
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    grads: dict[str, np.ndarray] = {}
    sums = {"l_id": 0.0, "l_rate": 0.0, "l_cos": 0.0}

    def add(name: str, g: np.ndarray) -> None:
        if name in grads:
            grads[name] += g
        else:
            grads[name] = g

    for ex in batch:
        phi, enc_cache = encode_forward(ex.frames, params)
        x_id, x_rate, _, dec_cache = decompose_forward(phi, params)
        cos_spk, id_cache = id_logits_forward(x_id, params)
        l_id, dcos = am_softmax_grad(cos_spk, ex.speaker, loss_cfg.am_scale, loss_cfg.am_margin)
        logits_rate = rate_logits(x_rate, params)
        l_rate, dlogits_rate = rate_ce_grad(logits_rate, ex.rate)
        u, v = cosine_map(x_id, x_rate, params)
        l_cos, du, dv = cosine_adversarial_grad(u, v, loss_cfg.epsilon)
        sums["l_id"] += l_id
        sums["l_rate"] += l_rate
        sums["l_cos"] += l_cos

        if mode == "max":
            # ascent on L_cos == descent on -L_cos; only the map learns
            _, _, map_grads = cosine_map_backward(du, dv, x_id, x_rate, params)
            for name, g in map_grads.items():
                add(name, -g)
            continue

        dx_id, id_grads = id_logits_backward(dcos, id_cache)
        for name, g in id_grads.items():
            add(name, g)
        dx_rate = np.zeros_like(x_rate)
        if loss_cfg.lambda1 > 0.0:
            dxr, rate_grads = rate_logits_backward(loss_cfg.lambda1 * dlogits_rate, x_rate, params)
            dx_rate += dxr
            for name, g in rate_grads.items():
                add(name, g)
        if loss_cfg.lambda2 > 0.0:
            dxi, dxr, map_grads = cosine_map_backward(
                loss_cfg.lambda2 * du, loss_cfg.lambda2 * dv, x_id, x_rate, params
            )
            dx_id += dxi
            dx_rate += dxr
            if mode == "all":
                for name, g in map_grads.items():
                    add(name, g)
        dphi, dec_grads = decompose_backward(dx_id, dx_rate, dec_cache, params)
        for name, g in dec_grads.items():
            add(name, g)
        for name, g in encode_backward(dphi, enc_cache, params).items():
            add(name, g)

    for name in grads:
        grads[name] /= n
    metrics = {k: s / n for k, s in sums.items()}
    metrics["total"] = total_loss(metrics["l_id"], metrics["l_rate"], metrics["l_cos"], loss_cfg)
    return metrics, grads


def train_step_max(
    batch: Sequence[TrainExample],
    params: ModelParams,
    opt: OptimizerState,
    loss_cfg: LossConfig,
) -> dict:
    """Update only the cosine-map group toward higher L_cos."""
    for group in params.trainable:
        params.trainable[group] = group == "cosine_map"
    metrics, grads = batch_objective(batch, params, loss_cfg, mode="max")
    _sgd_update(params, grads, opt)
    return metrics

def train_step_min(
    batch: Sequence[TrainExample],
    params: ModelParams,
    opt: OptimizerState,
    loss_cfg: LossConfig,
) -> dict:
    """Update encoder, decomposition, and heads against the total loss."""
    for group in params.trainable:
        params.trainable[group] = group != "cosine_map"
    metrics, grads = batch_objective(batch, params, loss_cfg, mode="min")
    _sgd_update(params, grads, opt)
    params.renorm_id_head()
    return metrics


def eval_cosine_loss(batch: Sequence[TrainExample], params: ModelParams, loss_cfg: LossConfig) -> float:
    """Batch-mean L_cos with no parameter updates (phase monitoring)."""
    total = 0.0
    for ex in batch:
        phi, _ = encode_forward(ex.frames, params)
        x_id, x_rate, _, _ = decompose_forward(phi, params)
        u, v = cosine_map(x_id, x_rate, params)
        loss, _, _ = cosine_adversarial_grad(u, v, loss_cfg.epsilon)
        total += loss
    return total / len(batch)


def classification_accuracy(batch: Sequence[TrainExample], params: ModelParams) -> tuple[float, float]:
    """(speaker, rate) top-1 accuracies of the two heads on their branches."""
    id_hits = 0
    rate_hits = 0
    for ex in batch:
        phi, _ = encode_forward(ex.frames, params)
        x_id, x_rate, _, _ = decompose_forward(phi, params)
        cos_spk, _ = id_logits_forward(x_id, params)
        id_hits += int(np.argmax(cos_spk) == ex.speaker)
        rate_hits += int(np.argmax(rate_logits(x_rate, params)) == ex.rate)
    return id_hits / len(batch), rate_hits / len(batch)


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 420
    batch_size: int = 32
    chunk_frames: int = 200
    learning_rate: float = 0.01
    momentum: float = 0.9
    schedule: AdversarialSchedule = AdversarialSchedule()
    adversarial: bool = True
    min_frames: int = 20
    monitor_batch_size: int = 24

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1 or self.chunk_frames < 1:
            raise ValueError("steps, batch_size, and chunk_frames must be positive")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("bad optimizer constants")


# System presets mirroring the comparison systems: data selection, branch
# architecture, and which loss terms are active.
SYSTEM_PRESETS: dict[str, dict] = {
    "baseline": dict(decomposition="identity", lambda1=0.0, lambda2=0.0,
                     adversarial=False, train_data="originals"),
    "tsm-aug": dict(decomposition="identity", lambda1=0.0, lambda2=0.0,
                    adversarial=False, train_data="augmented"),
    "fd-att": dict(decomposition="attention", lambda1=0.1, lambda2=0.0,
                   adversarial=False, train_data="augmented"),
    "al-cos": dict(decomposition="projection", lambda1=0.1, lambda2=0.1,
                   adversarial=True, train_data="augmented"),
    "fd-al": dict(decomposition="attention", lambda1=0.1, lambda2=0.1,
                  adversarial=True, train_data="augmented"),
}


@dataclass
class TrainingRun:
    params: ModelParams
    speakers: list[str]
    metrics: list[dict]
    phase_log: list[dict]
    log_lines: list[str]


def build_dataset(
    records: Sequence[UtteranceRecord],
    features,
    min_frames: int,
) -> tuple[list[tuple[str, np.ndarray, int, int]], list[str]]:
    """Pair manifest records with feature matrices and integer labels."""
    speakers = sorted({r.speaker_id for r in records})
    spk_index = {s: i for i, s in enumerate(speakers)}
    dataset = []
    for r in sorted(records, key=lambda r: r.utt_id):
        if r.utt_id not in features:
            continue
        frames = features[r.utt_id]
        if frames.shape[0] < min_frames:
            continue
        dataset.append((r.utt_id, frames, spk_index[r.speaker_id], RATE_TO_INDEX[r.rate_label]))
    return dataset, speakers


def _sample_example(dataset, rng: np.random.Generator, chunk: int) -> TrainExample:
    _, frames, spk, rate = dataset[int(rng.integers(len(dataset)))]
    t = frames.shape[0]
    if t > chunk:
        start = int(rng.integers(t - chunk + 1))
        frames = frames[start : start + chunk]
    return TrainExample(frames, spk, rate)


def run_training(
    records: Sequence[UtteranceRecord],
    features,
    model_cfg: ModelConfig,
    trainer_cfg: TrainerConfig = TrainerConfig(),
    loss_cfg: LossConfig = LossConfig(),
    seed: int = 0,
    init: ModelParams | None = None,
    log_path=None,
    checkpoint_path=None,
) -> TrainingRun:
    """Run the full alternating schedule over fixed-length feature chunks.

    Deterministic given the seed. Raises ConfigError when the rate task is
    active but a rate class is missing, and TrainingDivergedError (after
    writing the last good checkpoint) when the loss goes non-finite.
    """
    min_frames = max(trainer_cfg.min_frames, model_cfg.receptive_field)
    dataset, speakers = build_dataset(records, features, min_frames)
    if len(speakers) < 2:
        raise ConfigError("training needs at least 2 speakers")
    if not dataset:
        raise ConfigError("no usable training utterances after length filtering")
    if model_cfg.n_speakers != len(speakers):
        raise ConfigError(
            f"model was sized for {model_cfg.n_speakers} speakers but the "
            f"manifest has {len(speakers)}"
        )
    if loss_cfg.lambda1 > 0.0:
        present = {r.rate_label for r in records}
        missing = set(RATE_TO_INDEX) - present
        if missing:
            raise ConfigError(
                "rate estimation is active (lambda1 > 0) but the training "
                f"manifest has no {sorted(missing)} utterances; augment the "
                "corpus or disable the rate task"
            )

    params = init.copy() if init is not None else init_params(model_cfg, seed)
    if params.config != model_cfg:
        raise ConfigError("warm-start checkpoint does not match the model configuration")
    rng = np.random.default_rng(seed)
    monitor = [
        _sample_example(dataset, rng, trainer_cfg.chunk_frames)
        for _ in range(trainer_cfg.monitor_batch_size)
    ]
    opt = OptimizerState(trainer_cfg.learning_rate, trainer_cfg.momentum)
    adversarial = trainer_cfg.adversarial and loss_cfg.lambda2 > 0.0

    metrics_rows: list[dict] = []
    log_lines: list[str] = []
    phase_log: list[dict] = []
    current: dict | None = None
    last_good = params.copy()
    for step in range(trainer_cfg.steps):
        phase = trainer_cfg.schedule.phase_at(step) if adversarial else "minimize"
        if current is None or current["phase"] != phase:
            lcos_now = eval_cosine_loss(monitor, params, loss_cfg)
            if current is not None:
                current["lcos_end"] = lcos_now
                current["last_step"] = step - 1
                phase_log.append(current)
            current = {"phase": phase, "first_step": step, "lcos_start": lcos_now}
        batch = [
            _sample_example(dataset, rng, trainer_cfg.chunk_frames)
            for _ in range(trainer_cfg.batch_size)
        ]
        # the step's loss is evaluated before its update, so the pre-update
        # snapshot is the newest state verified to produce a finite loss
        pre_update = params.copy()
        if phase == "maximize":
            metrics = train_step_max(batch, params, opt, loss_cfg)
        else:
            metrics = train_step_min(batch, params, opt, loss_cfg)
        loss_ok = np.isfinite(metrics["total"])
        # checkpoints are f32, so anything past the f32 range counts as diverged
        limit = float(np.finfo(np.float32).max)
        params_ok = all(
            np.all(np.isfinite(a)) and np.abs(a).max() <= limit
            for a in params.arrays.values()
        )
        if not (loss_ok and params_ok):
            good = last_good if not loss_ok else pre_update
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, good, {"step": step, "diverged": True})
            raise TrainingDivergedError(
                f"non-finite {'loss' if not loss_ok else 'parameters'} at step "
                f"{step}; last good parameters kept"
            )
        last_good = pre_update
        metrics = {"step": step, "phase": phase, **metrics}
        metrics_rows.append(metrics)
        log_lines.append(
            f"{step} {phase} {metrics['l_id']:.6f} {metrics['l_rate']:.6f} "
            f"{metrics['l_cos']:.6f} {metrics['total']:.6f}"
        )
    if current is not None:
        current["lcos_end"] = eval_cosine_loss(monitor, params, loss_cfg)
        current["last_step"] = trainer_cfg.steps - 1
        phase_log.append(current)

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as f:
            f.write("\n".join(log_lines) + "\n")
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path,
            params,
            {
                "step": trainer_cfg.steps,
                "seed": seed,
                "speakers": speakers,
                "phase": trainer_cfg.schedule.phase_at(trainer_cfg.steps) if adversarial else "minimize",
            },
        )
    return TrainingRun(params, speakers, metrics_rows, phase_log, log_lines)
