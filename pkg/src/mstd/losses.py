"""Losses and schedules for the three training stages.

Stage 1: per-model task cross-entropy plus bidirectional KL alignment over
all model pairs. Stage 2: response consistency KL(student || teacher) with
the student held constant. Stage 3: task CE plus routed distillation
KL(teacher || student) summed over the selected teachers, plus a
load-balancing penalty on the batch-mean gate confidence.

All KL/CE computations put an additive 1e-9 floor inside logarithms and
average over the batch. Softened distributions use a shared temperature
(default 2.0 elsewhere); task CE is always temperature 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError, DimensionError, MstdError
from .tensor import Tensor


@dataclass
class SoftDist:
    """A batch of softened class distributions at a known temperature."""

    probs: Tensor
    temperature: float = 1.0

    def __post_init__(self):
        sums = self.probs.data.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise MstdError(
                "SoftDist rows must sum to 1; worst row deviates by "
                f"{np.abs(sums - 1.0).max():.2e}"
            )

    def detach(self) -> "SoftDist":
        return SoftDist(self.probs.detach(), self.temperature)


def soften(logits: Tensor, temperature: float) -> SoftDist:
    return SoftDist(T.softmax(logits, temperature=temperature), temperature)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], temperature 1."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = logits.shape[-1]
    bad = np.where((labels < 0) | (labels >= classes))[0]
    if bad.size:
        raise DataFormatError(
            f"label {labels[bad[0]]} out of range [0, {classes}) at sample index {bad[0]}"
        )
    batch = logits.shape[0]
    probs = T.softmax(logits, temperature=1.0)
    onehot = np.zeros((batch, classes), dtype=np.float32)
    onehot[np.arange(batch), labels] = 1.0
    picked = T.sum_rows(T.mul(probs, Tensor(onehot)))
    return T.scale(T.sum_all(T.log_eps(picked)), -1.0 / batch)


def kl_divergence(p: SoftDist, q: SoftDist) -> Tensor:
    """Mean over the batch of sum_c p*(log(p+eps) - log(q+eps)).

    Differentiable with respect to both arguments; pass a detached SoftDist
    to hold one side constant.
    """
    if p.probs.shape != q.probs.shape:
        raise DimensionError(
            f"kl_divergence: shapes {p.probs.shape} and {q.probs.shape} differ"
        )
    if p.temperature != q.temperature:
        raise ConfigError(
            f"kl_divergence: temperatures {p.temperature} and {q.temperature} differ"
        )
    batch = p.probs.shape[0]
    diff = T.sub(T.log_eps(p.probs), T.log_eps(q.probs))
    return T.scale(T.sum_all(T.mul(p.probs, diff)), 1.0 / batch)


def stage1_loss(
    logits_all: list[Tensor],
    labels: np.ndarray,
    temperature: float,
    detach_align: bool = False,
    tau_sq_rescale: bool = False,
) -> Tensor:
    """Joint loss for collaborative initialization.

    Sum of every model's task CE plus bidirectional KL over all unordered
    model pairs on temperature-softened outputs. By default gradient flows
    through both sides of each KL; detach_align holds each KL's reference
    (first) argument constant, which turns the alignment into the mutual-
    learning style update.
    """
    if len(logits_all) < 2:
        raise ConfigError(f"stage1_loss needs at least 2 models, got {len(logits_all)}")
    loss = cross_entropy(logits_all[0], labels)
    for logits in logits_all[1:]:
        loss = T.add(loss, cross_entropy(logits, labels))
    soft = [soften(lg, temperature) for lg in logits_all]
    align = None
    for i in range(len(soft)):
        for j in range(i + 1, len(soft)):
            pi = soft[i].detach() if detach_align else soft[i]
            pj = soft[j].detach() if detach_align else soft[j]
            term = T.add(kl_divergence(pi, soft[j]), kl_divergence(pj, soft[i]))
            align = term if align is None else T.add(align, term)
    if tau_sq_rescale:
        align = T.scale(align, temperature * temperature)
    return T.add(loss, align)


def stage2_loss(
    student: SoftDist, teacher: SoftDist, tau_sq_rescale: bool = False
) -> Tensor:
    """Response consistency for one specialized teacher.

    KL(student || teacher) with the student side constant: only the
    teacher's trainable pieces (its MaskNet) receive gradient.
    """
    loss = kl_divergence(student.detach(), teacher)
    if tau_sq_rescale:
        loss = T.scale(loss, student.temperature**2)
    return loss


def dkd_loss(
    selected: list[SoftDist],
    student: SoftDist,
    weights: list[float] | None = None,
    tau_sq_rescale: bool = False,
) -> Tensor:
    """Routed distillation: sum of KL(teacher || student) over the selection.

    Teacher sides are detached (teachers are frozen artifacts in stage 3).
    `weights` optionally scales each term by its gate confidence; the
    default unweighted sum is the reference form.
    """
    if not selected:
        raise ConfigError("dkd_loss: empty teacher selection")
    if weights is not None and len(weights) != len(selected):
        raise ConfigError(
            f"dkd_loss: {len(weights)} weights for {len(selected)} teachers"
        )
    total = None
    for idx, teacher in enumerate(selected):
        term = kl_divergence(teacher.detach(), student)
        if weights is not None:
            term = T.scale(term, float(weights[idx]))
        total = term if total is None else T.add(total, term)
    if tau_sq_rescale:
        total = T.scale(total, student.temperature**2)
    return total


def lb_loss(mean_conf: Tensor, variant: str = "kl") -> Tensor:
    """Load-balancing penalty on the batch-mean routing confidence.

    kl: KL(U || mean_conf) against the uniform reference, zero exactly at
    uniform utilization. cv: squared coefficient of variation
    (population std / mean)^2, the comparator variant.
    """
    total = float(mean_conf.data.sum())
    if abs(total - 1.0) > 1e-4:
        raise MstdError(
            f"lb_loss: mean confidence must sum to 1, got {total:.6f}"
        )
    n = mean_conf.size
    if variant == "kl":
        log_u = float(np.log(1.0 / n + 1e-9))
        mean_log = T.scale(T.sum_all(T.log_eps(mean_conf)), 1.0 / n)
        return T.sub(Tensor(np.float32(log_u)), mean_log)
    if variant == "cv":
        mu = T.scale(T.sum_all(mean_conf), 1.0 / n)
        diff = T.sub(mean_conf, mu)
        var = T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / n)
        return T.div(var, T.mul(mu, mu))
    raise ConfigError(f"lb_loss: unknown variant {variant!r} (use 'kl' or 'cv')")


def stage3_loss(
    ce: Tensor,
    dkd: Tensor | None,
    lb: Tensor | None,
    lambda1: float,
    lambda2: float,
) -> Tensor:
    """ce + lambda1*dkd + lambda2*lb. Zero lambdas drop their term entirely."""
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError(f"stage3_loss: negative weights ({lambda1}, {lambda2})")
    loss = ce
    if lambda1 > 0:
        if dkd is None:
            raise ConfigError("stage3_loss: lambda1 > 0 but no distillation term")
        loss = T.add(loss, T.scale(dkd, lambda1))
    if lambda2 > 0:
        if lb is None:
            raise ConfigError("stage3_loss: lambda2 > 0 but no balance term")
        loss = T.add(loss, T.scale(lb, lambda2))
    return loss


@dataclass(frozen=True)
class DecaySchedule:
    """Piecewise-constant decay: initial * factor^(epoch // period).

    The value changes AT each multiple of `period` (epoch 0-indexed), so a
    halve-every-30 schedule reads 1.0 on epochs 0..29 and 0.5 on 30..59.
    """

    initial: float
    factor: float
    period: int

    def __post_init__(self):
        if not (0.0 < self.factor <= 1.0):
            raise ConfigError(f"decay factor must be in (0, 1], got {self.factor}")
        if self.period < 1:
            raise ConfigError(f"decay period must be >= 1, got {self.period}")
        if self.initial < 0:
            raise ConfigError(f"decay initial must be >= 0, got {self.initial}")

    @classmethod
    def halve_every(cls, period: int, initial: float = 1.0) -> "DecaySchedule":
        return cls(initial, 0.5, period)

    @classmethod
    def multiply_every(
        cls, factor: float, period: int, initial: float = 1.0
    ) -> "DecaySchedule":
        return cls(initial, factor, period)

    def value_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ConfigError(f"epoch must be >= 0, got {epoch}")
        return self.initial * self.factor ** (epoch // self.period)
