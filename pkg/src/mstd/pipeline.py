"""Training pipeline: joint initialization, mask adaptation, routed distillation.

Stage 1 trains the fusion model and every unimodal model jointly: each
model's task CE plus bidirectional KL between every pair of softened
outputs (the plan can drop the alignment or detach its reference side).
Stage 2 freezes everything, then trains each teacher's MaskNet alone to
pull the masked teacher's softened response toward the student's.
Stage 3 trains the target student with task CE plus distillation from
per-sample top-k selected teachers under a gate network, plus a
load-balance penalty on the batch-mean gate confidence.

Baselines reuse the same loop: no_kd is the stage-3 trainer with both
loss weights at zero and no teachers; vanilla_kd trains one teacher with
CE and distills from it statically with the same temperature and weight
schedule.

Every artifact is a deterministic function of (config, seed): init draws,
batch order, and splits come from named RNG streams, so methods compared
under a shared seed see identical data in identical order.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_names
from . import tensor as T
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .checkpoint import split_meta, with_meta
from .data import DatasetBundle, SyntheticSpec, generate, load_external, save_data
from .data import split as split_bundle
from .errors import ConfigError, DivergenceError, MissingArtifactError
from .losses import (
    DecaySchedule,
    SoftDist,
    cross_entropy,
    dkd_loss,
    kl_divergence,
    lb_loss,
    soften,
    stage1_loss,
    stage2_loss,
    stage3_loss,
)
from .models import GateNet, ModalityModel, TeacherRegistry
from .optim import SGD, Adam
from .rng import stream
from .tensor import Tensor, no_grad

S1_MODES = ("collaborative", "independent", "skip")
S2_MODES = ("trained", "random", "skip")
S3_MODES = ("dynamic", "static")

ZERO_SCHEDULE = DecaySchedule(initial=0.0, factor=1.0, period=1)

EVAL_CHUNK = 512


# ---------------------------------------------------------------------------
# plan / train configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StagePlan:
    """Which variant of each stage runs, and the stage-3 loss knobs.

    stage1: collaborative (joint task + alignment), independent (task CE
    only, still covering every model), or skip (models stay at init).
    stage2: trained (adapt each MaskNet), random (keep MaskNets at init),
    or skip (no teachers at all; stage 3 degenerates to plain CE).
    stage3: dynamic (gate + per-sample top-k) or static (equal-weight sum
    over all teachers, no gate).
    """

    target: int = 1
    stage1: str = "collaborative"
    stage2: str = "trained"
    stage3: str = "dynamic"
    k: int = 1
    temperature: float = 2.0
    detach_align: bool = False
    lambda1: DecaySchedule = field(default_factory=lambda: DecaySchedule.halve_every(30))
    lambda2: DecaySchedule = field(
        default_factory=lambda: DecaySchedule.multiply_every(0.9, 10)
    )
    lb_variant: str = "kl"
    weight_dkd_by_confidence: bool = False
    tau_sq_rescale: bool = False

    def __post_init__(self):
        if self.target < 1:
            raise ConfigError(f"target modality must be >= 1, got {self.target}")
        if self.stage1 not in S1_MODES:
            raise ConfigError(f"plan.stage1 must be one of {S1_MODES}, got {self.stage1!r}")
        if self.stage2 not in S2_MODES:
            raise ConfigError(f"plan.stage2 must be one of {S2_MODES}, got {self.stage2!r}")
        if self.stage3 not in S3_MODES:
            raise ConfigError(f"plan.stage3 must be one of {S3_MODES}, got {self.stage3!r}")
        if self.k < 1:
            raise ConfigError(f"plan.k must be >= 1, got {self.k}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.lb_variant not in ("kl", "cv"):
            raise ConfigError(f"lb_variant must be 'kl' or 'cv', got {self.lb_variant!r}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    epochs_s1: int = 50
    epochs_s2: int = 30
    epochs_s3: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        for name in ("epochs_s1", "epochs_s2", "epochs_s3"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


def _make_optimizer(params, tcfg: TrainConfig):
    if tcfg.optimizer == "sgd":
        return SGD(params, lr=tcfg.lr)
    return Adam(params, lr=tcfg.lr)


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------


class MetricsLog:
    """JSON-lines metrics writer with a fixed key order.

    Every line carries {stage, epoch, split, loss, oa, lambda1, lambda2};
    stage-3 training lines under an active gate add routing_mean. Rows are
    kept in memory as well so callers can inspect a run without re-reading
    the file.
    """

    def __init__(self, path: str | Path | None = None, append: bool = False):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a" if append else "w", encoding="utf-8")

    def write(self, stage, epoch, split, loss, oa, lambda1, lambda2, routing_mean=None):
        row = {
            "stage": stage,
            "epoch": int(epoch),
            "split": split,
            "loss": float(loss),
            "oa": float(oa),
            "lambda1": float(lambda1),
            "lambda2": float(lambda2),
        }
        if routing_mean is not None:
            row["routing_mean"] = [float(v) for v in routing_mean]
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(json.dumps(row, separators=(",", ":")) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# run context and artifacts
# ---------------------------------------------------------------------------


@dataclass
class RunContext:
    """Per-run bookkeeping shared by the stage functions."""

    seed: int
    log: MetricsLog
    out_dir: Path | None = None
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    checkpoints: dict[str, Path] = field(default_factory=dict)

    def meta(self) -> dict[str, float]:
        # The seed is split into two 16-bit halves and the ratios scaled to
        # parts-per-million so every value is exactly representable in the
        # float32 meta records.
        s = int(self.seed) & 0xFFFFFFFF
        return {
            "seed_hi": float(s >> 16),
            "seed_lo": float(s & 0xFFFF),
            "split_val_ppm": float(round(self.split_ratios[1] * 1e6)),
            "split_test_ppm": float(round(self.split_ratios[2] * 1e6)),
        }

    def save(self, filename: str, state: dict[str, np.ndarray]) -> None:
        if self.out_dir is None:
            return
        path = Path(self.out_dir) / filename
        save_checkpoint(path, with_meta(state, **self.meta()))
        self.checkpoints[filename] = path


@dataclass
class EvalMetrics:
    loss: float
    overall_accuracy: float
    per_class_accuracy: list[float]


@dataclass
class RunArtifacts:
    out_dir: Path | None
    metrics_path: Path | None
    checkpoints: dict[str, Path]
    routing: list[list[float]]
    final: dict[str, EvalMetrics]
    best_epoch: int


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def batches(indices: np.ndarray, batch_size: int, order_rng: np.random.Generator):
    """Yield minibatch index arrays covering `indices` in a fresh random order."""
    shuffled = indices[order_rng.permutation(len(indices))]
    for start in range(0, len(shuffled), batch_size):
        yield shuffled[start : start + batch_size]


def _inputs(bundle: DatasetBundle, idx: np.ndarray) -> list[Tensor]:
    return [Tensor(x[idx]) for x in bundle.xs]


def _copy_state(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in state.items()}


def _check_finite(loss_value: float, params, context: str) -> None:
    """Abort on a non-finite loss, naming the first non-finite parameter."""
    if np.isfinite(loss_value):
        return
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise DivergenceError(
                f"{context}: loss is non-finite; first non-finite parameter: {p.name}"
            )
    raise DivergenceError(
        f"{context}: loss is non-finite with all parameters finite "
        "(activations overflowed; try a lower lr)"
    )


def evaluate(model, bundle: DatasetBundle, split: str, batch_size: int = EVAL_CHUNK) -> EvalMetrics:
    """Deterministic full pass: plain CE loss, overall and per-class accuracy.

    Classes absent from the split report accuracy 0. Works for any object
    whose forward(inputs) returns logits (models and specialized teachers).
    """
    idx = bundle.indices_for(split)
    if idx.size == 0:
        raise ConfigError(f"split {split!r} is empty")
    classes = bundle.classes
    total_loss = 0.0
    class_total = np.zeros(classes, dtype=np.int64)
    class_correct = np.zeros(classes, dtype=np.int64)
    with no_grad():
        for start in range(0, idx.size, batch_size):
            chunk = idx[start : start + batch_size]
            yb = bundle.y[chunk]
            logits = model.forward(_inputs(bundle, chunk))
            total_loss += cross_entropy(logits, yb).item() * len(chunk)
            preds = logits.data.argmax(axis=1)
            class_total += np.bincount(yb, minlength=classes)
            class_correct += np.bincount(yb[preds == yb], minlength=classes)
    per_class = [
        float(c) / t if t else 0.0 for c, t in zip(class_correct, class_total)
    ]
    return EvalMetrics(
        loss=total_loss / idx.size,
        overall_accuracy=float(class_correct.sum()) / idx.size,
        per_class_accuracy=per_class,
    )


# ---------------------------------------------------------------------------
# stage 1: joint initialization
# ---------------------------------------------------------------------------


def run_stage1(
    models: dict[int, ModalityModel],
    bundle: DatasetBundle,
    plan: StagePlan,
    tcfg: TrainConfig,
    ctx: RunContext,
) -> int:
    """Train all models jointly; keep and persist each member's best state.

    Collaborative mode uses task CE plus pairwise alignment; independent
    mode drops the alignment, which (under per-parameter optimizer state)
    equals training every member separately. Selection is by mean
    validation accuracy across members. Returns the winning epoch.
    """
    member_ids = sorted(models)
    idx_train = bundle.indices_for("train")
    params = [p for i in member_ids for p in models[i].parameters()]
    opt = _make_optimizer(params, tcfg)
    order = stream(ctx.seed, rng_names.shuffle("s1"))

    best_oa, best_loss, best_epoch, best_states = -1.0, 0.0, -1, None
    for epoch in range(tcfg.epochs_s1):
        run_loss, run_correct, run_n = 0.0, 0, 0
        for bidx in batches(idx_train, tcfg.batch_size, order):
            xb, yb = _inputs(bundle, bidx), bundle.y[bidx]
            logits = [models[i].forward(xb) for i in member_ids]
            if plan.stage1 == "collaborative":
                loss = stage1_loss(
                    logits, yb, plan.temperature, plan.detach_align, plan.tau_sq_rescale
                )
            else:
                loss = cross_entropy(logits[0], yb)
                for lg in logits[1:]:
                    loss = T.add(loss, cross_entropy(lg, yb))
            lv = loss.item()
            _check_finite(lv, params, "stage 1")
            T.backward(loss)
            opt.step()
            run_loss += lv * len(bidx)
            run_n += len(bidx)
            for lg in logits:
                run_correct += int((lg.data.argmax(axis=1) == yb).sum())
        train_oa = run_correct / (run_n * len(member_ids))
        ctx.log.write("s1", epoch, "train", run_loss / run_n, train_oa, 0.0, 0.0)

        evs = [evaluate(models[i], bundle, "val") for i in member_ids]
        val_loss = float(np.mean([e.loss for e in evs]))
        val_oa = float(np.mean([e.overall_accuracy for e in evs]))
        ctx.log.write("s1", epoch, "val", val_loss, val_oa, 0.0, 0.0)
        if val_oa > best_oa:
            best_oa, best_loss, best_epoch = val_oa, val_loss, epoch
            best_states = {i: _copy_state(models[i].state()) for i in member_ids}

    for i in member_ids:
        models[i].load_state(best_states[i])
    ctx.log.write("s1", best_epoch, "val", best_loss, best_oa, 0.0, 0.0)
    for i in member_ids:
        ctx.save(f"s1_m{i}.ckpt", models[i].state())
    return best_epoch


# ---------------------------------------------------------------------------
# stage 2: per-teacher mask adaptation
# ---------------------------------------------------------------------------


def distill_validation(teacher, student, bundle, plan, split="val") -> tuple[float, float]:
    """Mean softened KL(student || masked teacher) and masked-teacher OA."""
    idx = bundle.indices_for(split)
    if idx.size == 0:
        raise ConfigError(f"split {split!r} is empty")
    total_kl, correct = 0.0, 0
    with no_grad():
        for start in range(0, idx.size, EVAL_CHUNK):
            chunk = idx[start : start + EVAL_CHUNK]
            xb, yb = _inputs(bundle, chunk), bundle.y[chunk]
            s_soft = soften(student.forward(xb), plan.temperature)
            t_logits = teacher.forward(xb)
            t_soft = soften(t_logits, plan.temperature)
            total_kl += kl_divergence(s_soft, t_soft).item() * len(chunk)
            correct += int((t_logits.data.argmax(axis=1) == yb).sum())
    return total_kl / idx.size, correct / idx.size


def run_stage2(
    registry: TeacherRegistry,
    student: ModalityModel,
    bundle: DatasetBundle,
    plan: StagePlan,
    tcfg: TrainConfig,
    ctx: RunContext,
) -> None:
    """Adapt each teacher's MaskNet independently, same data order for all.

    Only MaskNet parameters train: bases were frozen when specialized and
    the student is frozen here (its side of the KL is also detached).
    Each teacher keeps its own optimizer and its best-validation-loss
    state, so the loop is safe to reorder or parallelize across teachers.
    """
    if registry.n == 0:
        raise ConfigError("stage 2 needs a non-empty teacher registry")
    idx_train = bundle.indices_for("train")
    student.freeze()
    try:
        for teacher in registry:
            j = teacher.teacher_id
            params = teacher.parameters()
            opt = _make_optimizer(params, tcfg)
            order = stream(ctx.seed, rng_names.shuffle("s2"))
            best_loss, best_oa, best_epoch, best_state = np.inf, 0.0, -1, None
            for epoch in range(tcfg.epochs_s2):
                run_loss, run_correct, run_n = 0.0, 0, 0
                for bidx in batches(idx_train, tcfg.batch_size, order):
                    xb, yb = _inputs(bundle, bidx), bundle.y[bidx]
                    with no_grad():
                        s_soft = soften(student.forward(xb), plan.temperature)
                    t_logits = teacher.forward(xb)
                    t_soft = soften(t_logits, plan.temperature)
                    loss = stage2_loss(s_soft, t_soft, plan.tau_sq_rescale)
                    lv = loss.item()
                    _check_finite(lv, params, f"stage 2 teacher {j}")
                    T.backward(loss)
                    opt.step()
                    run_loss += lv * len(bidx)
                    run_n += len(bidx)
                    run_correct += int((t_logits.data.argmax(axis=1) == yb).sum())
                stage = f"s2/t{j}"
                ctx.log.write(stage, epoch, "train", run_loss / run_n, run_correct / run_n, 0.0, 0.0)
                val_kl, val_oa = distill_validation(teacher, student, bundle, plan)
                ctx.log.write(stage, epoch, "val", val_kl, val_oa, 0.0, 0.0)
                if val_kl < best_loss:
                    best_loss, best_oa, best_epoch = val_kl, val_oa, epoch
                    best_state = _copy_state(teacher.masknet.state())
            teacher.masknet.load_state(best_state)
            ctx.log.write(f"s2/t{j}", best_epoch, "val", best_loss, best_oa, 0.0, 0.0)
            ctx.save(f"s2_mn{j}.ckpt", teacher.masknet.state())
    finally:
        student.unfreeze()


# ---------------------------------------------------------------------------
# stage 3 (and baselines): the student trainer
# ---------------------------------------------------------------------------


def train_student(
    student: ModalityModel,
    bundle: DatasetBundle,
    plan: StagePlan,
    tcfg: TrainConfig,
    ctx: RunContext,
    *,
    teachers=(),
    gatenet: GateNet | None = None,
    mode: str = "none",
    epochs: int | None = None,
    stage_label: str = "s3",
    shuffle_name: str = "s3",
    lambda1: DecaySchedule | None = None,
    lambda2: DecaySchedule | None = None,
    ckpt_student: str = "s3_student.ckpt",
    ckpt_gate: str = "s3_gate.ckpt",
    eval_test: bool = True,
) -> dict:
    """Core student loop: CE plus optional distillation.

    mode "dynamic": per-sample top-k over `teachers` chosen by the gate on
    detached student logits; each teacher's KL term is computed on its
    sub-batch and weighted by the sub-batch fraction, which reproduces the
    batch-mean of per-sample selected-teacher KLs. mode "static":
    equal-weight KL over all teachers on the full batch, no gate. mode
    "none": plain CE. The balance term exists only under a gate, so
    lambda2 is forced to zero otherwise. Teachers are consulted without
    building graphs; only student (and gate) parameters train.
    """
    teachers = list(teachers)
    n_teachers = len(teachers)
    if mode not in ("dynamic", "static", "none"):
        raise ConfigError(f"unknown student training mode {mode!r}")
    if mode == "dynamic":
        if gatenet is None:
            raise ConfigError("dynamic distillation needs a gate network")
        if plan.k > n_teachers:
            raise ConfigError(f"plan.k={plan.k} exceeds teacher count {n_teachers}")
    if mode != "none" and n_teachers == 0:
        raise ConfigError(f"mode {mode!r} needs at least one teacher")

    epochs = tcfg.epochs_s3 if epochs is None else epochs
    sched1 = plan.lambda1 if lambda1 is None else lambda1
    sched2 = plan.lambda2 if lambda2 is None else lambda2
    idx_train = bundle.indices_for("train")
    params = list(student.parameters())
    if mode == "dynamic":
        params += gatenet.parameters()
    opt = _make_optimizer(params, tcfg)
    order = stream(ctx.seed, rng_names.shuffle(shuffle_name))

    best_oa, best_loss, best_epoch = -1.0, 0.0, -1
    best_student, best_gate, best_per_class = None, None, []
    for epoch in range(epochs):
        # Without teachers there is nothing to distill, and without a gate
        # there is no confidence to balance: the weights are zero in fact,
        # so log them as zero too.
        l1 = sched1.value_at(epoch) if mode != "none" else 0.0
        l2 = sched2.value_at(epoch) if mode == "dynamic" else 0.0
        routed = mode == "dynamic" and (l1 > 0 or l2 > 0)
        run_loss, run_correct, run_n = 0.0, 0, 0
        conf_sum = np.zeros(n_teachers, dtype=np.float64)
        for bidx in batches(idx_train, tcfg.batch_size, order):
            xb, yb = _inputs(bundle, bidx), bundle.y[bidx]
            zs = student.forward(xb)
            ce = cross_entropy(zs, yb)
            dkd = lb = conf = None
            if routed:
                conf = gatenet(zs.detach())
                conf_sum += conf.data.sum(axis=0)
            if l1 > 0:
                s_soft = soften(zs, plan.temperature)
                if mode == "dynamic":
                    dkd = _routed_dkd(
                        s_soft, conf, teachers, bundle, bidx, plan
                    )
                else:
                    with no_grad():
                        t_softs = [
                            soften(t.forward(xb), plan.temperature) for t in teachers
                        ]
                    dkd = dkd_loss(t_softs, s_soft, tau_sq_rescale=plan.tau_sq_rescale)
            if l2 > 0:
                lb = lb_loss(T.mean_rows(conf), plan.lb_variant)
            loss = stage3_loss(ce, dkd, lb, l1, l2)
            lv = loss.item()
            _check_finite(lv, params, f"stage {stage_label}")
            T.backward(loss)
            opt.step()
            run_loss += lv * len(bidx)
            run_n += len(bidx)
            run_correct += int((zs.data.argmax(axis=1) == yb).sum())
        routing_mean = (conf_sum / run_n).tolist() if routed else None
        ctx.log.write(
            stage_label, epoch, "train", run_loss / run_n, run_correct / run_n,
            l1, l2, routing_mean,
        )
        ev = evaluate(student, bundle, "val")
        ctx.log.write(stage_label, epoch, "val", ev.loss, ev.overall_accuracy, l1, l2)
        if ev.overall_accuracy > best_oa:
            best_oa, best_loss, best_epoch = ev.overall_accuracy, ev.loss, epoch
            best_per_class = ev.per_class_accuracy
            best_student = _copy_state(student.state())
            best_gate = _copy_state(gatenet.state()) if mode == "dynamic" else None

    student.load_state(best_student)
    if best_gate is not None:
        gatenet.load_state(best_gate)
    l1b = sched1.value_at(best_epoch) if mode != "none" else 0.0
    l2b = sched2.value_at(best_epoch) if mode == "dynamic" else 0.0
    ctx.log.write(stage_label, best_epoch, "val", best_loss, best_oa, l1b, l2b)
    ctx.save(ckpt_student, student.state())
    if mode == "dynamic":
        ctx.save(ckpt_gate, gatenet.state())
    final = {"val": EvalMetrics(best_loss, best_oa, best_per_class)}
    if eval_test:
        te = evaluate(student, bundle, "test")
        ctx.log.write(stage_label, best_epoch, "test", te.loss, te.overall_accuracy, l1b, l2b)
        final["test"] = te
    return {"best_epoch": best_epoch, "final": final}


def _routed_dkd(s_soft: SoftDist, conf, teachers, bundle, bidx, plan: StagePlan):
    """Sum of per-teacher KL terms over this batch's top-k selections.

    Selection uses a stable descending sort of the detached confidences,
    the same tie rule as topk_select. Teacher j's KL is computed on the
    sub-batch that selected it and scaled by the sub-batch fraction (and,
    optionally, by the sub-batch's mean confidence in j).
    """
    batch_n = len(bidx)
    sel = np.argsort(-conf.data, axis=1, kind="stable")[:, : plan.k]
    dkd = None
    for j, teacher in enumerate(teachers):
        rows = np.nonzero(np.any(sel == j, axis=1))[0]
        if rows.size == 0:
            continue
        sub_idx = bidx[rows]
        with no_grad():
            t_soft = soften(
                teacher.forward([Tensor(x[sub_idx]) for x in bundle.xs]),
                plan.temperature,
            )
        s_rows = SoftDist(T.gather_rows(s_soft.probs, rows), plan.temperature)
        weight = rows.size / batch_n
        if plan.weight_dkd_by_confidence:
            weight *= float(conf.data[rows, j].mean())
        term = T.scale(kl_divergence(t_soft, s_rows), weight)
        dkd = term if dkd is None else T.add(dkd, term)
    if plan.tau_sq_rescale and dkd is not None:
        dkd = T.scale(dkd, plan.temperature**2)
    return dkd


def run_stage3(
    student: ModalityModel,
    registry: TeacherRegistry | None,
    gatenet: GateNet | None,
    bundle: DatasetBundle,
    plan: StagePlan,
    tcfg: TrainConfig,
    ctx: RunContext,
) -> dict:
    """Distill into the target student from the specialized teachers.

    With no registry (plan.stage2 == "skip") this degenerates to plain CE
    training of the student, which is exactly the no-KD baseline.
    """
    teachers = list(registry) if registry is not None else []
    mode = plan.stage3 if teachers else "none"
    return train_student(
        student, bundle, plan, tcfg, ctx,
        teachers=teachers, gatenet=gatenet, mode=mode,
    )


# ---------------------------------------------------------------------------
# whole-run orchestration
# ---------------------------------------------------------------------------


def load_bundle(cfg, seed: int) -> DatasetBundle:
    """Materialize and split the dataset named by the config for one seed."""
    d = cfg.data
    if d.source == "synthetic":
        spec = SyntheticSpec(
            classes=d.classes,
            samples=d.samples,
            dims=tuple(d.dims),
            informativeness=tuple(d.informativeness),
            shared_factor=d.shared_factor,
            noise_sigma=d.noise,
            seed=seed,
        )
        bundle = generate(spec)
    else:
        bundle = load_external(d.path)
    return split_bundle(bundle, tuple(d.split), seed)


def build_models(cfg, dims, classes: int, seed: int) -> dict[int, ModalityModel]:
    """Construct the fusion model and every unimodal model from per-model streams."""
    m = len(dims)
    mcfg = cfg.models
    if len(mcfg.unimodal_hidden) != m:
        raise ConfigError(
            f"models.unimodal_hidden has {len(mcfg.unimodal_hidden)} stacks "
            f"for {m} modalities"
        )
    if len(mcfg.encoder_hidden) != m:
        raise ConfigError(
            f"models.encoder_hidden has {len(mcfg.encoder_hidden)} stacks "
            f"for {m} modalities"
        )
    models = {
        0: ModalityModel.build_multimodal(
            list(dims),
            [list(e) for e in mcfg.encoder_hidden],
            list(mcfg.fusion_hidden),
            classes,
            stream(seed, rng_names.model_init(0)),
        )
    }
    for i, dim in enumerate(dims, start=1):
        models[i] = ModalityModel.build_unimodal(
            i, dim, list(mcfg.unimodal_hidden[i - 1]), classes,
            stream(seed, rng_names.model_init(i)),
        )
    return models


def resolve_taps(taps_cfg, models: dict[int, ModalityModel], target: int) -> dict[int, list[str]]:
    """Tap lists per source model, target excluded; "default" asks each model."""
    if taps_cfg == "default":
        return {i: m.default_taps() for i, m in sorted(models.items()) if i != target}
    out = {}
    for key, tap_list in taps_cfg.items():
        idx = int(key)
        if idx == target:
            continue
        out[idx] = [str(t) for t in tap_list]
    return out


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"stage {stage} needs checkpoint {path}")
    return path


def _load_model_state(path: Path) -> dict[str, np.ndarray]:
    weights, _ = split_meta(load_checkpoint(path))
    return weights


def run_all(
    cfg,
    seed: int,
    out_dir: str | Path | None = None,
    stages: tuple[str, ...] = ("s1", "s2", "s3"),
) -> RunArtifacts:
    """Run the requested stages end to end for one seed.

    When a stage is requested without its predecessor in the same call,
    the predecessor's artifacts are loaded from out_dir (unless the plan
    skips that stage), so `s1`, `s2`, `s3` can run as separate
    invocations against one directory.
    """
    plan: StagePlan = cfg.plan
    tcfg: TrainConfig = cfg.train
    bundle = load_bundle(cfg, seed)
    if plan.target > bundle.n_modalities:
        raise ConfigError(
            f"target modality {plan.target} out of range 1..{bundle.n_modalities}"
        )
    dims = [x.shape[1] for x in bundle.xs]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(
        out / "metrics.jsonl" if out is not None else None,
        append="s1" not in stages,
    )
    ctx = RunContext(seed=seed, log=log, out_dir=out, split_ratios=tuple(cfg.data.split))

    try:
        if out is not None and cfg.data.source == "synthetic":
            save_data(out / "data.mstd", bundle)

        # -- models ---------------------------------------------------------
        models = build_models(cfg, dims, bundle.classes, seed)
        if "s1" in stages:
            if plan.stage1 != "skip":
                run_stage1(models, bundle, plan, tcfg, ctx)
        elif plan.stage1 != "skip":
            if out is None:
                raise ConfigError("resuming from stage checkpoints needs an out_dir")
            for i in sorted(models):
                path = _require(out / f"s1_m{i}.ckpt", "s2" if "s2" in stages else "s3")
                models[i].load_state(_load_model_state(path))

        # -- teachers ---------------------------------------------------------
        registry = None
        gatenet = None
        if plan.stage2 != "skip":
            taps = resolve_taps(cfg.models.taps, models, plan.target)
            registry = TeacherRegistry.build(
                models, plan.target, taps,
                cfg.models.masknet_hidden, cfg.models.masknet_heads,
                seed, stream,
            )
            if "s2" in stages:
                if plan.stage2 == "trained":
                    run_stage2(registry, models[plan.target], bundle, plan, tcfg, ctx)
                else:
                    for teacher in registry:
                        ctx.save(f"s2_mn{teacher.teacher_id}.ckpt", teacher.masknet.state())
            elif "s3" in stages:
                if out is None:
                    raise ConfigError("resuming from stage checkpoints needs an out_dir")
                for teacher in registry:
                    path = _require(out / f"s2_mn{teacher.teacher_id}.ckpt", "s3")
                    teacher.masknet.load_state(_load_model_state(path))

        # -- student ----------------------------------------------------------
        result = {"best_epoch": -1, "final": {}}
        if "s3" in stages:
            if registry is not None and plan.stage3 == "dynamic":
                gatenet = GateNet(
                    bundle.classes, registry.n,
                    stream(seed, rng_names.GATENET_INIT),
                    cfg.models.gatenet_hidden,
                )
            result = run_stage3(
                models[plan.target], registry, gatenet, bundle, plan, tcfg, ctx
            )

        if out is not None:
            _write_manifest(out, cfg, seed, bundle, registry)
    finally:
        log.close()

    routing = [
        row["routing_mean"]
        for row in log.rows
        if row["stage"] == "s3" and row["split"] == "train" and "routing_mean" in row
    ]
    return RunArtifacts(
        out_dir=out,
        metrics_path=log.path,
        checkpoints=dict(ctx.checkpoints),
        routing=routing,
        final=result["final"],
        best_epoch=result["best_epoch"],
    )


def _write_manifest(out: Path, cfg, seed: int, bundle: DatasetBundle, registry) -> None:
    plan: StagePlan = cfg.plan
    manifest = {
        "version": 1,
        "seed": int(seed),
        "target": plan.target,
        "modalities": bundle.n_modalities,
        "classes": bundle.classes,
        "n_teachers": registry.n if registry is not None else 0,
        "teacher_sources": (
            [registry.source_modality(j) for j in range(1, registry.n + 1)]
            if registry is not None
            else []
        ),
        "plan": {
            "stage1": plan.stage1,
            "stage2": plan.stage2,
            "stage3": plan.stage3,
            "k": plan.k,
            "temperature": plan.temperature,
            "lb_variant": plan.lb_variant,
        },
        "epochs": {
            "s1": cfg.train.epochs_s1,
            "s2": cfg.train.epochs_s2,
            "s3": cfg.train.epochs_s3,
        },
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def run_baseline(
    kind: str,
    cfg,
    seed: int,
    out_dir: str | Path | None = None,
    teacher_cfg: str = "mm",
) -> RunArtifacts:
    """no_kd: CE-only student. vanilla_kd: static response distillation.

    no_kd reruns the full pipeline with both stage-3 weights at zero and
    no teachers, so its trajectory, log, and student checkpoint are
    bit-identical to a zero-weight ablation under the same seed. vanilla
    trains one teacher (mm: the fusion model; cm: the lowest-index
    non-target modality) with CE for the stage-1 budget, then distills
    from it with the plan's temperature and weight schedule.
    """
    if kind == "no_kd":
        plan = dataclasses.replace(
            cfg.plan,
            stage1="skip", stage2="skip",
            lambda1=ZERO_SCHEDULE, lambda2=ZERO_SCHEDULE,
        )
        return run_all(dataclasses.replace(cfg, plan=plan), seed, out_dir)
    if kind != "vanilla_kd":
        raise ConfigError(f"unknown baseline kind {kind!r} (use 'no_kd' or 'vanilla_kd')")
    if teacher_cfg not in ("mm", "cm"):
        raise ConfigError(f"teacher_cfg must be 'mm' or 'cm', got {teacher_cfg!r}")

    plan: StagePlan = cfg.plan
    tcfg: TrainConfig = cfg.train
    bundle = load_bundle(cfg, seed)
    if plan.target > bundle.n_modalities:
        raise ConfigError(
            f"target modality {plan.target} out of range 1..{bundle.n_modalities}"
        )
    dims = [x.shape[1] for x in bundle.xs]
    if teacher_cfg == "mm":
        teacher_idx = 0
    else:
        teacher_idx = min(i for i in range(1, bundle.n_modalities + 1) if i != plan.target)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(out / "metrics.jsonl" if out is not None else None)
    ctx = RunContext(seed=seed, log=log, out_dir=out, split_ratios=tuple(cfg.data.split))
    try:
        if out is not None and cfg.data.source == "synthetic":
            save_data(out / "data.mstd", bundle)
        models = build_models(cfg, dims, bundle.classes, seed)
        teacher, student = models[teacher_idx], models[plan.target]

        train_student(
            teacher, bundle, plan, tcfg, ctx,
            mode="none", epochs=tcfg.epochs_s1, stage_label="s1", shuffle_name="s1",
            lambda1=ZERO_SCHEDULE, lambda2=ZERO_SCHEDULE,
            ckpt_student=f"s1_m{teacher_idx}.ckpt", eval_test=False,
        )
        teacher.freeze()
        result = train_student(
            student, bundle, plan, tcfg, ctx,
            teachers=[teacher], mode="static",
        )
        if out is not None:
            _write_manifest(out, cfg, seed, bundle, None)
    finally:
        log.close()

    return RunArtifacts(
        out_dir=out,
        metrics_path=log.path,
        checkpoints=dict(ctx.checkpoints),
        routing=[],
        final=result["final"],
        best_epoch=result["best_epoch"],
    )
