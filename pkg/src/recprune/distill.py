"""Fine-tuning and post-pruning restoration by logit distillation."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .model import TransformerModel, forward
from .recdata import RecDataset, batches

LAMBDA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class DistillConfig:
    lam: float = 0.8
    kl_direction: str = "forward"
    learning_rate: float = 3e-4
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda={self.lam} outside [0, 1]")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        if self.kl_direction not in ("forward", "reverse"):
            raise ContractError(f"unknown kl_direction {self.kl_direction!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class StepLog:
    step: int
    loss: float
    kl: float
    ce: float


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_kl: list[float] = field(default_factory=list)
    epoch_ce: list[float] = field(default_factory=list)
    steps: list[StepLog] = field(default_factory=list)
    wall_time: float = 0.0
    lam: float = 0.0
    final_metrics: dict = field(default_factory=dict)

    def write_log(self, path, append: bool = True, label: str = "") -> None:
        p = Path(path)
        new = not p.exists() or not append
        with p.open("a" if append else "w", encoding="utf-8") as fh:
            if new:
                fh.write("label\tstep\tloss\tkl\tce\n")
            for s in self.steps:
                fh.write(f"{label or '-'}\t{s.step}\t{s.loss!r}\t{s.kl!r}\t{s.ce!r}\n")


class Adam:
    """Adaptive-moment optimizer with bias correction, over numpy arrays."""

    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def distill_loss(teacher_logits, student_logits: Tensor, targets, lam: float,
                 direction: str = "forward", weights=None) -> tuple[Tensor, float, float]:
    """``lam * KL + (1 - lam) * CE`` and its two components.

    Teacher logits are constants.  With ``lam == 0`` the KL term is not
    evaluated and the loss is the cross entropy itself.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda={lam} outside [0, 1]")
    t = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    if t.shape != student_logits.shape:
        raise ContractError(f"teacher {t.shape} and student {student_logits.shape} logits differ")
    ce = ad.cross_entropy_logits(student_logits, targets, weights)
    if lam == 0.0:
        return ce, 0.0, ce.item()
    kl = ad.distill_kl(t, student_logits, weights, direction)
    if lam == 1.0:
        return kl, kl.item(), ce.item()
    return kl * lam + ce * (1.0 - lam), kl.item(), ce.item()


def _train(student: TransformerModel, dataset: RecDataset, cfg: DistillConfig,
           teacher: Optional[TransformerModel], log_every: int = 1) -> TrainReport:
    cfg.validate()
    if len(dataset.split_indices("train")) == 0:
        raise ContractError("train split is empty")
    student.set_requires_grad(True)
    params = student.parameters()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    use_teacher = teacher is not None and cfg.lam > 0
    report = TrainReport(lam=cfg.lam if teacher is not None else 0.0)
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        tot_loss = tot_kl = tot_ce = 0.0
        n = 0
        for batch in batches(dataset, "train", cfg.batch_size, seed=cfg.seed * 1000 + epoch):
            teacher_logits = forward(teacher, batch.inputs).data if use_teacher else None
            student.zero_grad()
            with ad.Tape() as tape:
                logits = forward(student, batch.inputs)
                if use_teacher:
                    loss, kl, ce = distill_loss(teacher_logits, logits, batch.labels, cfg.lam,
                                                cfg.kl_direction, batch.loss_mask)
                else:
                    loss = ad.cross_entropy_logits(logits, batch.labels, batch.loss_mask)
                    kl, ce = 0.0, loss.item()
            ad.backward(loss, tape)
            opt.step()
            step += 1
            tot_loss += loss.item()
            tot_kl += kl
            tot_ce += ce
            n += 1
            if step % log_every == 0:
                report.steps.append(StepLog(step, loss.item(), kl, ce))
        report.epoch_loss.append(tot_loss / max(n, 1))
        report.epoch_kl.append(tot_kl / max(n, 1))
        report.epoch_ce.append(tot_ce / max(n, 1))
    student.zero_grad()
    report.wall_time = time.perf_counter() - start
    return report


def train_base(model: TransformerModel, dataset: RecDataset, cfg: DistillConfig) -> TrainReport:
    """Next-token cross-entropy fine-tuning over all positions (in place)."""
    return _train(model, dataset, cfg, teacher=None)


def restore(student: TransformerModel, teacher: TransformerModel, dataset: RecDataset,
            cfg: DistillConfig) -> TrainReport:
    """Distil a frozen ``teacher`` into ``student`` in place."""
    if student.config.vocab_size != teacher.config.vocab_size:
        raise ContractError(
            f"vocab mismatch: student {student.config.vocab_size}, teacher {teacher.config.vocab_size}"
        )
    return _train(student, dataset, cfg, teacher=teacher)


def config_dict(cfg: DistillConfig) -> dict:
    return asdict(cfg)
