"""Two-stage training loop over the alignment layer.

Everything is deterministic given (config, seed, data): batch order is a
seeded per-epoch shuffle addressed by absolute step, gradients are
summed in fixed order, and the optimizer state rides in the checkpoint,
so save/load at any step is invisible in the loss trace.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import AlignmentCheckpoint, save_checkpoint
from .errors import CheckpointIncompatibleError, ConfigError
from .instruction import TrainingExample
from .model import AlignmentModel

logger = logging.getLogger(__name__)

STAGES = ("one", "two")

# Desk-scale defaults, deliberately tiny compared to production runs.
STAGE_DEFAULTS = {
    "one": {"total_steps": 2000, "batch_size": 8},
    "two": {"total_steps": 200, "batch_size": 4},
}


@dataclass
class StageConfig:
    stage: str
    total_steps: int
    batch_size: int
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "StageConfig":
        base = dict(STAGE_DEFAULTS[stage]) if stage in STAGE_DEFAULTS else {}
        base.update(overrides)
        return cls(stage=stage, **base)


@dataclass
class OptimizerState:
    kind: str
    t: int = 0
    m_w: np.ndarray | None = None
    v_w: np.ndarray | None = None
    m_b: np.ndarray | None = None
    v_b: np.ndarray | None = None

    @classmethod
    def fresh(cls, kind: str, weight: np.ndarray, bias: np.ndarray) -> "OptimizerState":
        if kind == "sgd":
            return cls(kind="sgd")
        return cls(
            kind="adam",
            t=0,
            m_w=np.zeros_like(weight),
            v_w=np.zeros_like(weight),
            m_b=np.zeros_like(bias),
            v_b=np.zeros_like(bias),
        )


def optimizer_step(
    weight: np.ndarray,
    bias: np.ndarray,
    grad_w: np.ndarray,
    grad_b: np.ndarray,
    state: OptimizerState,
    config: StageConfig,
) -> None:
    """In-place parameter update; adam carries bias-corrected moments."""
    lr = config.learning_rate
    if state.kind == "sgd":
        weight -= lr * grad_w
        bias -= lr * grad_b
        return
    state.t += 1
    b1, b2, eps = config.beta1, config.beta2, config.eps
    for p, g, m, v in ((weight, grad_w, state.m_w, state.v_w), (bias, grad_b, state.m_b, state.v_b)):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**state.t)
        v_hat = v / (1 - b2**state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _batch_indices(config: StageConfig, step: int, n: int) -> list[int]:
    """Examples for one step of the infinite shuffled stream."""
    out = []
    for j in range(config.batch_size):
        k = step * config.batch_size + j
        epoch, offset = divmod(k, n)
        out.append(int(_epoch_order(config.seed, epoch, n)[offset]))
    return out


def _checkpoint_from_model(
    model: AlignmentModel, config: StageConfig, step: int, opt: OptimizerState
) -> AlignmentCheckpoint:
    cfg = model.config
    opt_arrays = {}
    if opt.kind == "adam":
        opt_arrays = {"m_w": opt.m_w, "v_w": opt.v_w, "m_b": opt.m_b, "v_b": opt.v_b}
    return AlignmentCheckpoint(
        fingerprint=cfg.fingerprint(),
        stage=config.stage,
        step=step,
        seeds=(cfg.projection_seed, cfg.decoder_seed, cfg.alignment_seed),
        weight=model.alignment.weight.copy(),
        bias=model.alignment.bias.copy(),
        optimizer=opt.kind,
        opt_t=opt.t,
        opt_arrays={k: v.copy() for k, v in opt_arrays.items()},
    )


def _opt_state_from_checkpoint(ckpt: AlignmentCheckpoint) -> OptimizerState:
    if ckpt.optimizer == "sgd":
        return OptimizerState(kind="sgd")
    return OptimizerState(
        kind="adam",
        t=ckpt.opt_t,
        m_w=ckpt.opt_arrays["m_w"].copy(),
        v_w=ckpt.opt_arrays["v_w"].copy(),
        m_b=ckpt.opt_arrays["m_b"].copy(),
        v_b=ckpt.opt_arrays["v_b"].copy(),
    )


def train_stage(
    config: StageConfig,
    model: AlignmentModel,
    examples: list[TrainingExample],
    feature_vecs: list[np.ndarray],
    start: AlignmentCheckpoint | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[AlignmentCheckpoint, list[float]]:
    """Run total_steps optimizer steps; returns final checkpoint + trace.

    Stage two must start from a stage-one (or resumed stage-two)
    checkpoint. A same-stage start checkpoint resumes: the step counter,
    batch stream position, and optimizer state all continue.
    """
    if not examples:
        raise ConfigError("no training examples")
    if len(examples) != len(feature_vecs):
        raise ConfigError("examples and feature vectors must pair up")

    step0 = 0
    if start is not None:
        if start.fingerprint != model.config.fingerprint():
            raise CheckpointIncompatibleError(
                "checkpoint config fingerprint does not match this model"
            )
        model.alignment.weight = start.weight.copy()
        model.alignment.bias = start.bias.copy()
        if start.stage == config.stage:
            opt = _opt_state_from_checkpoint(start)
            if opt.kind != config.optimizer:
                raise ConfigError("optimizer kind differs from the resumed checkpoint")
            step0 = start.step
        elif config.stage == "two" and start.stage == "one":
            opt = OptimizerState.fresh(config.optimizer, model.alignment.weight, model.alignment.bias)
        else:
            raise ConfigError(
                f"cannot start stage {config.stage!r} from a stage {start.stage!r} checkpoint"
            )
    else:
        if config.stage == "two":
            raise ConfigError("stage two requires a stage-one checkpoint to start from")
        opt = OptimizerState.fresh(config.optimizer, model.alignment.weight, model.alignment.bias)

    n = len(examples)
    losses: list[float] = []
    for step in range(step0, step0 + config.total_steps):
        idxs = _batch_indices(config, step, n)
        grad_w = np.zeros_like(model.alignment.weight)
        grad_b = np.zeros_like(model.alignment.bias)
        batch_loss = 0.0
        for i in idxs:
            loss, gw, gb = model.loss_and_grads(examples[i], feature_vecs[i])
            grad_w += gw
            grad_b += gb
            batch_loss += loss
        grad_w /= len(idxs)
        grad_b /= len(idxs)
        batch_loss /= len(idxs)
        optimizer_step(model.alignment.weight, model.alignment.bias, grad_w, grad_b, opt, config)
        losses.append(batch_loss)
        done = step + 1
        if (
            checkpoint_dir is not None
            and config.checkpoint_every > 0
            and done % config.checkpoint_every == 0
        ):
            ckpt = _checkpoint_from_model(model, config, done, opt)
            save_checkpoint(ckpt, Path(checkpoint_dir) / f"stage{config.stage}-{done:08d}.ckpt")
        if done % 500 == 0 or done == step0 + config.total_steps:
            logger.info("stage %s step %d loss %.6f", config.stage, done, batch_loss)

    final = _checkpoint_from_model(model, config, step0 + config.total_steps, opt)
    return final, losses


def write_loss_trace(path: str | Path, losses: list[float], start_step: int = 0, fingerprint: str = "") -> None:
    """One "step,loss" line per step, 17 significant digits."""
    with Path(path).open("w", encoding="utf-8") as fh:
        if fingerprint:
            fh.write(f"# fingerprint={fingerprint}\n")
        for i, loss in enumerate(losses):
            fh.write(f"{start_step + i},{loss:.17g}\n")


def read_loss_trace(path: str | Path) -> list[tuple[int, float]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        step_s, loss_s = line.split(",")
        out.append((int(step_s), float(loss_s)))
    return out
