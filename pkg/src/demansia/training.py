"""Desk-scale training loop: schedule, optimizer, EMA, metrics, evaluation.

The learning rate follows cosine annealing with warm restarts: cycle i
spans t0 * t_mult**i epochs, the rate starts each cycle at lr_max and
falls to zero on a half cosine. Updates use decoupled weight decay and an
adaptive-moment step (optionally variance-rectified). A shadow copy of the
parameters is refreshed at the end of every epoch.

Metrics go to an append-only CSV with columns
step,epoch,lr,train_loss,cls_loss,tl_loss,top1,top5 (one row at step 0,
then one per epoch); no timestamps, so identical seeded runs produce
byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .checkpoint import write_tensors
from .errors import ContractError, DomainError, NumericError
from .model import DeMansia, config_arrays, predict
from .numerics import Tape, Tensor, backward
from .token_labeling import PatchTargets, Sample, make_patch_targets, token_label_loss, total_loss

__all__ = [
    "TrainConfig",
    "Adam",
    "EmaState",
    "sgdr_lr",
    "ema_update",
    "train_step",
    "train",
    "evaluate",
    "CSV_HEADER",
]

CSV_HEADER = "step,epoch,lr,train_loss,cls_loss,tl_loss,top1,top5"


@dataclass
class TrainConfig:
    lr_max: float = 1e-3
    weight_decay: float = 0.05
    t0: int = 10
    t_mult: int = 2
    ema_decay: float = 0.999
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    beta: float = 0.5
    rectify: bool = False
    grad_accum: int = 1
    n_train: int = 2048
    n_eval: int = 512

    def __post_init__(self):
        if self.t0 < 1 or self.t_mult < 1:
            raise DomainError(f"t0 and t_mult must be >= 1, got {self.t0}, {self.t_mult}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise DomainError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if self.beta < 0:
            raise DomainError(f"beta must be >= 0, got {self.beta}")
        if self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 0:
            raise DomainError("batch_size and grad_accum must be >= 1, epochs >= 0")


def sgdr_lr(epoch_progress: float, cfg: TrainConfig) -> float:
    """Warm-restart cosine schedule; restarts land at t0, t0(1+t_mult), ..."""
    if epoch_progress < 0:
        raise DomainError(f"progress must be >= 0, got {epoch_progress}")
    t = float(epoch_progress)
    period = float(cfg.t0)
    while t >= period:
        t -= period
        period *= cfg.t_mult
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * t / period))


class Adam:
    """Adaptive moments with decoupled weight decay; optional rectification."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step_count = 0

    def step(self, lr: float, weight_decay: float, rectify: bool = False) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.BETA1, self.BETA2
        bias1 = 1.0 - b1**t
        bias2 = 1.0 - b2**t
        if rectify:
            rho_inf = 2.0 / (1.0 - b2) - 1.0
            rho_t = rho_inf - 2.0 * t * b2**t / bias2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if weight_decay:
                p.data = p.data * (1.0 - lr * weight_decay)
            mhat = m / bias1
            if rectify and rho_t <= 4.0:
                p.data = p.data - lr * mhat
                continue
            update = mhat / (np.sqrt(v / bias2) + self.EPS)
            if rectify:
                r = math.sqrt(
                    ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
                )
                update = update * r
            p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        out["opt.step"] = np.asarray(float(self.step_count))
        return out


@dataclass
class EmaState:
    """Shadow parameters mirroring every learnable tensor."""

    shadow: dict[str, np.ndarray]

    @classmethod
    def of(cls, model: DeMansia) -> "EmaState":
        return cls({k: t.data.copy() for k, t in model.parameters().items()})


def ema_update(ema: EmaState, model: DeMansia, decay: float) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * live, tensor by tensor."""
    if not 0.0 <= decay <= 1.0:
        raise DomainError(f"decay must lie in [0, 1], got {decay}")
    params = model.parameters()
    if set(ema.shadow) != set(params):
        raise ContractError("shadow parameter names do not mirror the model")
    for name, t in params.items():
        if ema.shadow[name].shape != t.data.shape:
            raise ContractError(f"shadow shape mismatch for {name}")
        ema.shadow[name] = decay * ema.shadow[name] + (1.0 - decay) * t.data
    return ema


def _logged_parts(class_logits, patch_logits, sample, target) -> tuple[float, float]:
    """Detached class and token losses for metrics, off the tape."""
    cls_part = float(nm.cross_entropy(Tensor(class_logits.data), sample.label).data)
    tl_part = float(token_label_loss(Tensor(patch_logits.data), target).data)
    return cls_part, tl_part


def train_step(
    model: DeMansia,
    batch: list[Sample],
    targets: list[PatchTargets],
    opt: Adam,
    beta: float,
    lr: float,
    weight_decay: float = 0.05,
    rectify: bool = False,
    apply_update: bool = True,
) -> dict[str, float]:
    """One forward/backward over a batch plus an optimizer step.

    Deterministic given the inputs. A non-finite loss aborts with the name
    of the first offending tensor. With apply_update=False the gradients
    are left accumulated (gradient-accumulation mode). The token loss is
    logged even when beta = 0, where it receives no gradient.
    """
    with Tape():
        total_t = None
        cls_mean = 0.0
        tl_mean = 0.0
        for sample, target in zip(batch, targets):
            class_logits, patch_logits = model.forward(sample.image)
            loss = total_loss(class_logits, sample.label, patch_logits, target, beta)
            cls_part, tl_part = _logged_parts(class_logits, patch_logits, sample, target)
            cls_mean += cls_part
            tl_mean += tl_part
            total_t = loss if total_t is None else nm.add(total_t, loss)
        total_t = nm.scale(total_t, 1.0 / len(batch))
        value = float(total_t.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss; first non-finite tensor: {_first_bad(model)}")
        backward(total_t)
    if apply_update:
        opt.step(lr, weight_decay, rectify)
        opt.zero_grad()
    return {
        "loss": value,
        "cls_loss": cls_mean / len(batch),
        "tl_loss": tl_mean / len(batch),
    }


def _first_bad(model: DeMansia) -> str:
    for name, t in model.parameters().items():
        if not np.all(np.isfinite(t.data)):
            return name
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return f"grad({name})"
    return "loss"


def evaluate(model, dataset: list[Sample], use_fusion: bool) -> tuple[float, float, float]:
    """(top-1, top-5, mean class cross entropy) over the dataset."""
    if not dataset:
        raise DomainError("evaluation dataset is empty")
    hits1 = hits5 = 0
    loss_sum = 0.0
    for sample in dataset:
        class_logits, patch_logits = model.forward(sample.image)
        logits = predict(class_logits, patch_logits).data if use_fusion else class_logits.data
        order = np.argsort(-logits, kind="stable")
        hits1 += int(order[0] == sample.label)
        hits5 += int(sample.label in order[:5])
        loss_sum += float(nm.cross_entropy(Tensor(class_logits.data), sample.label).data)
    n = len(dataset)
    return hits1 / n, hits5 / n, loss_sum / n


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def train(
    model: DeMansia,
    train_set: list[Sample],
    eval_set: list[Sample],
    cfg: TrainConfig,
    csv_path=None,
    ckpt_path=None,
    log=None,
) -> list[dict[str, float]]:
    """Epoch loop with per-epoch EMA, evaluation, CSV rows, and a final
    checkpoint containing model, shadow, optimizer state, and config."""
    params = model.parameters()
    opt = Adam(params)
    ema = EmaState.of(model)
    targets = [make_patch_targets(s.dense_map, model.cfg.patch_size) for s in train_set]
    order_rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = max(1, len(train_set) // cfg.batch_size)

    rows: list[dict[str, float]] = []
    if csv_path is not None:
        Path(csv_path).write_text(CSV_HEADER + "\n")

    def emit(step, epoch, lr, loss, cls_l, tl_l, top1, top5):
        row = {
            "step": step, "epoch": epoch, "lr": lr, "train_loss": loss,
            "cls_loss": cls_l, "tl_loss": tl_l, "top1": top1, "top5": top5,
        }
        rows.append(row)
        line = f"{step},{epoch},{_fmt(lr)},{_fmt(loss)},{_fmt(cls_l)},{_fmt(tl_l)},{_fmt(top1)},{_fmt(top5)}"
        if csv_path is not None:
            with open(csv_path, "a") as fh:
                fh.write(line + "\n")
        if log:
            log(line)

    # step-0 row: losses on the first batch and held-out accuracy, pre-training
    probe = train_set[: cfg.batch_size]
    probe_targets = targets[: cfg.batch_size]
    init = _probe_losses(model, probe, probe_targets, cfg.beta)
    top1, top5, _ = evaluate(model, eval_set, use_fusion=True)
    emit(0, 0, sgdr_lr(0.0, cfg), init["loss"], init["cls_loss"], init["tl_loss"], top1, top5)

    global_step = 0
    pending = 0
    for epoch in range(1, cfg.epochs + 1):
        idx = order_rng.permutation(len(train_set))
        sums = {"loss": 0.0, "cls_loss": 0.0, "tl_loss": 0.0}
        count = 0
        for b in range(steps_per_epoch):
            take = idx[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = [train_set[i] for i in take]
            tgt = [targets[i] for i in take]
            lr = sgdr_lr(global_step / steps_per_epoch, cfg)
            pending += 1
            apply_update = pending >= cfg.grad_accum
            stats = train_step(
                model, batch, tgt, opt, cfg.beta, lr,
                weight_decay=cfg.weight_decay, rectify=cfg.rectify, apply_update=apply_update,
            )
            if apply_update:
                pending = 0
            global_step += 1
            count += 1
            for k in sums:
                sums[k] += stats[k]
        ema = ema_update(ema, model, cfg.ema_decay)
        top1, top5, _ = evaluate(model, eval_set, use_fusion=True)
        lr_now = sgdr_lr(global_step / steps_per_epoch, cfg)
        emit(global_step, epoch, lr_now, sums["loss"] / count, sums["cls_loss"] / count, sums["tl_loss"] / count, top1, top5)

    if ckpt_path is not None:
        tensors: dict[str, np.ndarray] = {}
        tensors.update(config_arrays(model.cfg))
        tensors.update(model.state_arrays())
        tensors.update({f"ema.{k}": v for k, v in ema.shadow.items()})
        tensors.update(opt.state_arrays())
        write_tensors(ckpt_path, tensors)
    return rows


def _probe_losses(model, batch, targets, beta) -> dict[str, float]:
    out = {"loss": 0.0, "cls_loss": 0.0, "tl_loss": 0.0}
    for sample, target in zip(batch, targets):
        class_logits, patch_logits = model.forward(sample.image)
        loss = total_loss(class_logits, sample.label, patch_logits, target, beta)
        cls_part, tl_part = _logged_parts(class_logits, patch_logits, sample, target)
        out["loss"] += float(loss.data)
        out["cls_loss"] += cls_part
        out["tl_loss"] += tl_part
    return {k: v / len(batch) for k, v in out.items()}
