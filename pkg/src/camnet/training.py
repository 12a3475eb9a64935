"""Loss, optimizer, schedule, and the three-phase training protocol.

Phase 1 trains the classification branch alone, phase 2 the attention
branch with every classification parameter frozen, phase 3 fine-tunes
everything end to end against the fused prediction. Each phase minimizes
the negated per-class binary cross-entropy of its own prediction vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine, metrics
from .backbone import LabelVector
from .engine import GradientStore, Tensor
from .errors import ConfigError, ShapeError, TrainingDiverged
from .model import DualBranchModel, ForwardResult, fuse

log = logging.getLogger("camnet.training")

PHASE_BRANCH = {1: "cls", 2: "att", 3: "fused"}


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 16
    gamma: float = 0.1
    max_iterations: int = 2000
    # step-decay boundaries; default is 50% and 75% of max_iterations
    lr_step_iterations: tuple[int, ...] | None = None
    seed: int = 0
    phase: int = 1
    aux_loss_weight: float = 0.0
    val_interval: int = 100
    # patient-level split: test gets 1 - train_frac, val gets val_frac of train
    train_frac: float = 0.8
    val_frac: float = 0.1
    # per-phase iteration counts for the full protocol; None = max_iterations each
    phase_iterations: tuple[int, int, int] | None = None
    # per-phase base rates; None = learning_rate for every phase. The joint
    # fine-tune usually wants a much cooler rate than the branch phases.
    phase_learning_rates: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and momentum/decay >= 0")
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")
        if self.batch_size < 1 or self.max_iterations < 1:
            raise ConfigError("batch_size and max_iterations must be >= 1")
        if self.phase not in (1, 2, 3):
            raise ConfigError(f"phase must be 1, 2 or 3, got {self.phase}")
        if not 0 < self.train_frac < 1 or not 0 < self.val_frac < 1:
            raise ConfigError("train_frac and val_frac must lie in (0, 1)")
        if self.lr_step_iterations is not None:
            self.lr_step_iterations = tuple(int(b) for b in self.lr_step_iterations)
        if self.phase_iterations is not None:
            self.phase_iterations = tuple(int(n) for n in self.phase_iterations)
            if len(self.phase_iterations) != 3 or min(self.phase_iterations) < 1:
                raise ConfigError("phase_iterations needs three counts >= 1")
        if self.phase_learning_rates is not None:
            self.phase_learning_rates = tuple(float(r) for r in self.phase_learning_rates)
            if len(self.phase_learning_rates) != 3 or min(self.phase_learning_rates) <= 0:
                raise ConfigError("phase_learning_rates needs three positive rates")

    def step_boundaries(self) -> tuple[int, ...]:
        if self.lr_step_iterations is not None:
            return self.lr_step_iterations
        return (self.max_iterations // 2, (self.max_iterations * 3) // 4)

    def base_learning_rate(self) -> float:
        if self.phase_learning_rates is not None:
            return self.phase_learning_rates[self.phase - 1]
        return self.learning_rate


@dataclass
class PhaseMask:
    """Per-parameter frozen flags for one training phase."""

    frozen: dict[str, bool]

    @classmethod
    def for_phase(cls, phase: int, param_names: list[str]) -> "PhaseMask":
        def is_frozen(name: str) -> bool:
            if phase == 1:
                return name.startswith("attention.")
            if phase == 2:
                return name.startswith("backbone.")
            return False

        return cls({name: is_frozen(name) for name in param_names})


def bce_loss(y: LabelVector, y_pred: LabelVector | Tensor) -> Tensor:
    """Negated cross-entropy between ground truth and predicted scores.

    Sum over classes, mean over the batch; predictions clamped away from
    {0, 1} so the result is finite and >= 0.
    """
    if y.role != "ground_truth":
        raise ConfigError(f"loss target must be ground truth, got role {y.role!r}")
    pred = y_pred if isinstance(y_pred, Tensor) else engine.tensor(y_pred.values)
    target = np.asarray(y.values, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"label shape {target.shape} does not match "
                         f"prediction shape {tuple(pred.shape)}")
    return engine.bce_loss(pred, Tensor(target))


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Step-decayed learning rate: one gamma factor per passed boundary."""
    passed = sum(iteration >= b for b in config.step_boundaries())
    return config.base_learning_rate() * config.gamma ** passed


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float
             ) -> tuple[np.ndarray, np.ndarray]:
    """Classical momentum with L2 decay folded into the gradient."""
    dtype = param.dtype
    v = dtype.type(momentum) * velocity + (grad + dtype.type(weight_decay) * param)
    return param - dtype.type(lr) * v, v


class MomentumSGD:
    def __init__(self, named_params: list[tuple[str, Tensor]], config: TrainConfig,
                 mask: PhaseMask | None = None):
        self.params = named_params
        self.config = config
        self.mask = mask or PhaseMask({name: False for name, _ in named_params})
        self.velocity = {name: np.zeros_like(t.data) for name, t in named_params}

    def step(self, grads: GradientStore, lr: float) -> None:
        for name, t in self.params:
            if self.mask.frozen.get(name, False):
                continue
            g = grads.wrt(t)
            if g is None:  # parameter unused by this phase's forward pass
                continue
            t.data, self.velocity[name] = sgd_step(
                t.data, g, self.velocity[name], lr,
                self.config.momentum, self.config.weight_decay)


def shuffle_batches(num_samples: int, batch_size: int, seed: int,
                    epoch: int) -> list[list[int]]:
    """Deterministic per-epoch permutation split into batches.

    Every sample index appears exactly once per epoch; the trailing partial
    batch is kept.
    """
    rng = np.random.default_rng((int(seed), int(epoch)))
    perm = rng.permutation(num_samples)
    return [perm[i:i + batch_size].tolist() for i in range(0, num_samples, batch_size)]


@dataclass
class PhaseResult:
    phase: int
    curve: list[dict] = field(default_factory=list)  # iteration, phase, lr, loss
    best_params: dict[str, np.ndarray] | None = None
    best_val_auc: float | None = None
    final_val_auc: float | None = None


def _phase_loss(out: ForwardResult, targets: LabelVector, phase: int,
                aux_weight: float) -> Tensor:
    if phase == 1:
        loss = bce_loss(targets, out.cls_probs)
    elif phase == 2:
        loss = bce_loss(targets, out.att_probs)
    else:
        loss = bce_loss(targets, out.fused)
    if phase != 1 and aux_weight > 0 and out.attention.aux_logits is not None:
        aux_probs = engine.sigmoid(out.attention.aux_logits)
        loss = engine.add(loss, engine.scale(bce_loss(targets, aux_probs), aux_weight))
    return loss


def train_phase(model: DualBranchModel, train_set, config: TrainConfig,
                val_set=None) -> PhaseResult:
    """Run one phase of mini-batch SGD; returns the loss curve and, when a
    validation set is given, the parameter snapshot with the best average
    validation AUC."""
    if len(train_set) == 0:
        raise ConfigError("training needs a nonempty dataset")
    phase = config.phase
    params = model.named_parameters()
    mask = PhaseMask.for_phase(phase, [n for n, _ in params])
    opt = MomentumSGD(params, config, mask)
    result = PhaseResult(phase=phase)
    images = train_set.images_array(dtype=model.dtype)
    labels = train_set.labels_array(dtype=model.dtype)

    def validate() -> float:
        report = metrics.evaluate(model, val_set, branch=PHASE_BRANCH[phase],
                                  batch_size=config.batch_size)
        return report.average_auc

    epoch, queue = 0, []
    for it in range(config.max_iterations):
        if not queue:
            queue = shuffle_batches(len(train_set), config.batch_size,
                                    config.seed, epoch)
            epoch += 1
        idx = queue.pop(0)
        batch = Tensor(np.ascontiguousarray(images[idx]))
        targets = LabelVector(labels[idx], role="ground_truth")
        lr = lr_at(it, config)
        with engine.record() as tape:
            out = model.forward(batch, include_attention=phase != 1,
                                detach_shared=phase == 2)
            loss = _phase_loss(out, targets, phase, config.aux_loss_weight)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss {loss_value} at phase {phase} iteration {it}",
                    snapshot={"phase": phase, "iteration": it, "lr": lr,
                              "recent_losses": [r["loss"] for r in result.curve[-20:]]})
            grads = tape.backward(loss)
        opt.step(grads, lr)
        result.curve.append({"iteration": it, "phase": phase, "lr": lr,
                             "loss": loss_value})
        if val_set is not None and (
                (it + 1) % config.val_interval == 0 or it == config.max_iterations - 1):
            auc = validate()
            if it == config.max_iterations - 1:
                result.final_val_auc = auc
            if result.best_val_auc is None or auc > result.best_val_auc:
                result.best_val_auc = auc
                result.best_params = {n: t.data.copy() for n, t in params}
            log.info("phase %d iteration %d: loss %.4f, val auc %.4f",
                     phase, it, loss_value, auc)
    if result.best_params is None:
        result.best_params = {n: t.data.copy() for n, t in params}
    return result


def run_protocol(model: DualBranchModel, train_set, config: TrainConfig,
                 val_set=None, phase_iterations: dict[int, int] | None = None
                 ) -> dict[int, PhaseResult]:
    """Chain phases 1 -> 2 -> 3, restoring each phase's best snapshot before
    the next; returns the per-phase results."""
    if phase_iterations is None and config.phase_iterations is not None:
        phase_iterations = dict(enumerate(config.phase_iterations, start=1))
    results: dict[int, PhaseResult] = {}
    for phase in (1, 2, 3):
        cfg = replace(config, phase=phase)
        if phase_iterations and phase in phase_iterations:
            cfg = replace(cfg, max_iterations=phase_iterations[phase])
        results[phase] = train_phase(model, train_set, cfg, val_set=val_set)
        model.load_parameter_arrays(results[phase].best_params)
    return results
