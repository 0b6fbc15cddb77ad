"""Two-phase training: caption pretraining, then prompt-conditioned fine-tuning.

The optimizer is Adam with linear warmup into a constant rate and global-norm
gradient clipping. Everything — init, data order, sampling — flows from one
seed, so a fixed seed reproduces the run bitwise (single-threaded).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import core, model
from .core import Tensor
from .model import ConfigError, ModelConfig, ModelParams


class TrainingAbort(RuntimeError):
    """Raised when a step produces a non-finite loss."""

    def __init__(self, step: int, batch_ids: list, cause: str):
        super().__init__(f"non-finite loss at step {step} on batch {batch_ids}: {cause}")
        self.step = step
        self.batch_ids = batch_ids


@dataclass
class TrainingPhase:
    tag: str                    # "pretrain" | "finetune" | "mixed"
    manifest: str
    split: str = "train"
    epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 3e-4
    warmup_steps: int = 100

    def validate(self) -> None:
        if self.tag not in ("pretrain", "finetune", "mixed"):
            raise ConfigError(f"unknown phase tag {self.tag!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class LossWeights:
    pretrain: float = 1.0
    task: float = 1.0

    def validate(self) -> None:
        if self.pretrain < 0 or self.task < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.pretrain == 0 and self.task == 0:
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class StepRecord:
    step: int
    phase: str
    epoch: int
    loss: float
    lr: float
    batch_ids: list
    wall_s: float

    def report_row(self) -> dict:
        # wall-clock deliberately excluded: the serialized report is the
        # determinism surface (see timing sidecar)
        return {"step": self.step, "phase": self.phase, "epoch": self.epoch,
                "loss": self.loss, "lr": self.lr, "batch": self.batch_ids}


@dataclass
class TrainReport:
    steps: list[StepRecord] = field(default_factory=list)
    epoch_perplexity: list[dict] = field(default_factory=list)
    checkpoint_path: Optional[str] = None

    def final_loss(self, phase: Optional[str] = None) -> float:
        rows = [s for s in self.steps if phase is None or s.phase == phase]
        return rows[-1].loss if rows else float("nan")

    def summary(self) -> dict:
        phases = sorted({s.phase for s in self.steps})
        return {
            "steps": len(self.steps),
            "final_loss": {p: self.final_loss(p) for p in phases},
            "epoch_perplexity": self.epoch_perplexity,
            "checkpoint": self.checkpoint_path,
        }


# ------------------------------------------------------------------ losses

def pretrain_loss(batch: Sequence[tuple], params: ModelParams, config: ModelConfig) -> Tensor:
    """Mean caption NLL over a batch of (image, caption_ids) pairs, no prompt."""
    if not batch:
        raise ConfigError("empty batch")
    total = None
    for image, caption_ids in batch:
        if not len(caption_ids):
            raise ConfigError("captions must be nonempty")
        logits = model.forward(image, caption_ids, None, params, config)
        nll = core.cross_entropy_next_token(logits, caption_ids)
        total = nll if total is None else total + nll
    return total * (1.0 / len(batch))


def task_loss(batch: Sequence[tuple], params: ModelParams, config: ModelConfig) -> Tensor:
    """Mean response NLL over (image, prompt_ids, response_ids) triples.

    Only response positions are scored; prompt rows condition the prediction
    but never enter the loss.
    """
    if not batch:
        raise ConfigError("empty batch")
    total = None
    for image, prompt_ids, response_ids in batch:
        if not len(response_ids):
            raise ConfigError("responses must be nonempty")
        logits = model.forward(image, response_ids, prompt_ids, params, config)
        nll = core.cross_entropy_next_token(logits, response_ids)
        total = nll if total is None else total + nll
    return total * (1.0 / len(batch))


def combined_loss(lp: Tensor, lt: Tensor, weights: LossWeights) -> Tensor:
    weights.validate()
    return lp * weights.pretrain + lt * weights.task


def mixed_loss(batch: Sequence[tuple], params: ModelParams, config: ModelConfig,
               weights: LossWeights) -> Tensor:
    """Weighted combination over a batch mixing both sample kinds.

    Samples are (image, prompt_ids_or_None, target_ids); prompt-free samples
    contribute the caption objective, prompted ones the task objective. A
    batch with only one kind reduces to that kind's weighted loss.
    """
    weights.validate()
    cap = [(img, tgt) for img, prompt, tgt in batch if prompt is None]
    qa = [(img, prompt, tgt) for img, prompt, tgt in batch if prompt is not None]
    if cap and qa:
        return combined_loss(pretrain_loss(cap, params, config),
                             task_loss(qa, params, config), weights)
    if cap:
        return pretrain_loss(cap, params, config) * weights.pretrain
    return task_loss(qa, params, config) * weights.task


# ------------------------------------------------------------------ optimizer

class Adam:
    """Adam with optional global-norm gradient clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, grad_clip: Optional[float] = 1.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clip_grads(self) -> float:
        norm_sq = sum(float((p.grad ** 2).sum()) for p in self.params.values()
                      if p.grad is not None)
        norm = norm_sq ** 0.5
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self._m[k] = self.beta1 * self._m[k] + (1 - self.beta1) * g
            self._v[k] = self.beta2 * self._v[k] + (1 - self.beta2) * g * g
            mhat = self._m[k] / (1 - self.beta1 ** self.t)
            vhat = self._v[k] / (1 - self.beta2 ** self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def warmup_lr(base: float, step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup_steps)


# ------------------------------------------------------------------ loop

def train(config: ModelConfig, params: ModelParams, phases: Sequence[TrainingPhase],
          batches_for: Callable[[TrainingPhase], list],
          weights: LossWeights = LossWeights(), seed: int = 0,
          grad_clip: Optional[float] = 1.0,
          on_step: Optional[Callable[[StepRecord], None]] = None) -> TrainReport:
    """Run the phases in order over prepared sample lists.

    ``batches_for(phase)`` returns the phase's samples: (record_id, image,
    caption_ids) for pretraining, (record_id, image, prompt_ids, response_ids)
    for fine-tuning, or (record_id, image, prompt_ids_or_None, target_ids) for
    the mixed mode. Shuffling, batching, and the optimizer are driven by
    ``seed``.
    """
    weights.validate()
    report = TrainReport()
    optimizer = Adam(params.named(), grad_clip=grad_clip)
    data_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    step = 0
    for phase in phases:
        phase.validate()
        samples = batches_for(phase)
        if not samples:
            raise ConfigError(f"phase {phase.tag!r} has no samples (split {phase.split!r})")
        for epoch in range(phase.epochs):
            order = data_rng.permutation(len(samples))
            epoch_losses = []
            for start in range(0, len(order), phase.batch_size):
                chosen = [samples[i] for i in order[start:start + phase.batch_size]]
                batch_ids = [s[0] for s in chosen]
                t0 = time.perf_counter()
                optimizer.zero_grad()
                try:
                    if phase.tag == "pretrain":
                        loss = pretrain_loss([s[1:] for s in chosen], params, config)
                    elif phase.tag == "finetune":
                        loss = task_loss([s[1:] for s in chosen], params, config)
                    else:
                        loss = mixed_loss([s[1:] for s in chosen], params, config, weights)
                except core.NumericError as exc:
                    raise TrainingAbort(step, batch_ids, str(exc)) from exc
                if not np.isfinite(loss.data):
                    raise TrainingAbort(step, batch_ids, f"loss={loss.data}")
                core.backward(loss)
                optimizer.clip_grads()
                optimizer.step(lr=warmup_lr(phase.learning_rate, step, phase.warmup_steps))
                record = StepRecord(step=step, phase=phase.tag, epoch=epoch,
                                    loss=float(loss.data),
                                    lr=warmup_lr(phase.learning_rate, step, phase.warmup_steps),
                                    batch_ids=batch_ids,
                                    wall_s=time.perf_counter() - t0)
                report.steps.append(record)
                epoch_losses.append(record.loss)
                if on_step:
                    on_step(record)
                step += 1
            report.epoch_perplexity.append({
                "phase": phase.tag, "epoch": epoch,
                "perplexity": float(np.exp(np.mean(epoch_losses))),
            })
    return report


# ------------------------------------------------------------------ gradient check

def randomize_for_grad_check(params: ModelParams, seed: int, scale: float = 0.3) -> None:
    """Move the parameters to a well-conditioned random point.

    Fresh-init weights are tiny (std 0.02), which leaves layer-norm input
    variances near zero and blows up the curvature the finite-difference probe
    sees. Gradient checks care about an arbitrary point, so use one where the
    probe's truncation error stays far below the tolerance.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    for name, p in params.named().items():
        if name.endswith("_gain"):
            p.data[...] = 1.0 + 0.2 * rng.normal(size=p.data.shape)
        else:
            p.data[...] = scale * rng.normal(size=p.data.shape)


def grad_check(params: ModelParams, loss_fn: Callable[[], Tensor],
               step: float = 1e-4) -> tuple[float, str]:
    """Central finite differences vs autodiff over every parameter scalar.

    Returns the worst relative error and the parameter entry it occurred at.
    The denominator is max(|analytic|, |numeric|, step): the central-difference
    probe itself carries O(step^2) truncation noise, so gradients below the
    probe's noise floor are compared absolutely rather than inflating the
    ratio.
    """
    named = params.named()
    for p in named.values():
        p.grad = None
    core.backward(loss_fn())
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in named.items()}
    worst, worst_name = 0.0, ""
    with core.no_grad():
        for name, p in named.items():
            flat = p.data.reshape(-1)
            aflat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = loss_fn().item()
                flat[i] = orig - step
                lo = loss_fn().item()
                flat[i] = orig
                numeric = (hi - lo) / (2 * step)
                rel = abs(numeric - aflat[i]) / max(abs(numeric), abs(aflat[i]), step)
                if rel > worst:
                    worst, worst_name = rel, f"{name}[{i}]"
    return worst, worst_name
