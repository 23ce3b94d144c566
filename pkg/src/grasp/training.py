"""Losses and the optimization loop.

Both heads are trained with binary cross-entropy plus soft Dice on
their logits.  The occluded-region target is always derived from the
ground-truth masks (amodal minus visible), never from the possibly
perturbed mask the model was fed, and the occluded term is weighted
1.5x because those pixels are the scarce, hard ones.

Optimization is AdamW (decoupled weight decay) under a cosine learning
rate schedule that decays to zero.  Every random choice in the loop
(batch sampling, mask perturbation) derives from the run seed, so a
run is bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, IntegrityError, TrainingDiverged
from .geometry import BinaryMask, mask_diff
from .model import ForwardTrace, GraspModel, save_checkpoint
from .seeding import derive_seed
from .synthdata import SceneInstance, training_vm
from .tensor import Tensor

DICE_EPS = 1e-6
OCC_WEIGHT = 1.5


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, evaluated in the stable logit form.

    mean(softplus(x) - x*t); softplus never exponentiates a positive
    argument, zero logits give exactly log(2), and the gradient is
    sigmoid(x) - t everywhere -- writing this as relu(x) + softplus(-|x|)
    would drop the 0.5 at x == 0, which dead-relu tokens with zero-init
    head biases actually hit.
    """
    t = Tensor(np.asarray(target, dtype=np.float64))
    return T.tmean(T.sub(T.softplus(logits), T.mul(logits, t)))


def dice_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) with p = sigmoid(logits)."""
    t = Tensor(np.asarray(target, dtype=np.float64))
    p = T.sigmoid(logits)
    overlap = T.tsum(T.mul(p, t))
    denom = T.add(T.tsum(p), T.tsum(t))
    return T.sub(1.0, T.div(T.add(T.mul(2.0, overlap), DICE_EPS), T.add(denom, DICE_EPS)))


@dataclass(frozen=True)
class LossBreakdown:
    bce_amodal: float
    dice_amodal: float
    bce_occluded: float
    dice_occluded: float
    amodal: float
    occluded: float
    total: float

    FIELDS = ("bce_amodal", "dice_amodal", "bce_occluded", "dice_occluded",
              "amodal", "occluded", "total")


def total_loss(trace: ForwardTrace, amodal_gt: BinaryMask, visible_gt: BinaryMask,
               occ_weight: float = OCC_WEIGHT) -> tuple[Tensor, LossBreakdown]:
    """Combined loss; the occluded target is amodal_gt minus visible_gt."""
    if (visible_gt.a & ~amodal_gt.a).any():
        raise IntegrityError("ground-truth visible mask leaks outside the amodal mask")
    occ_gt = mask_diff(amodal_gt, visible_gt)

    bce_a = bce_with_logits(trace.logits_amodal, amodal_gt.a)
    dice_a = dice_loss(trace.logits_amodal, amodal_gt.a)
    bce_o = bce_with_logits(trace.logits_occ, occ_gt.a)
    dice_o = dice_loss(trace.logits_occ, occ_gt.a)

    amodal = T.add(bce_a, dice_a)
    occluded = T.add(bce_o, dice_o)
    total = T.add(amodal, T.mul(float(occ_weight), occluded))

    breakdown = LossBreakdown(
        bce_amodal=bce_a.item(),
        dice_amodal=dice_a.item(),
        bce_occluded=bce_o.item(),
        dice_occluded=dice_o.item(),
        amodal=amodal.item(),
        occluded=occluded.item(),
        total=total.item(),
    )
    return total, breakdown


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clean_vm_prob: float = 0.5
    occ_weight: float = OCC_WEIGHT
    ckpt_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be positive")
        if not (0.0 <= self.clean_vm_prob <= 1.0):
            raise ConfigError(f"clean_vm_prob {self.clean_vm_prob} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "batch": self.batch, "lr": self.lr,
            "weight_decay": self.weight_decay, "beta1": self.beta1,
            "beta2": self.beta2, "eps": self.eps, "seed": self.seed,
            "clean_vm_prob": self.clean_vm_prob, "occ_weight": self.occ_weight,
            "ckpt_every": self.ckpt_every,
        }


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 to exactly 0 at step total_steps."""
    if total_steps < 1:
        raise ConfigError("schedule needs at least one step")
    x = min(max(step, 0), total_steps) / total_steps
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * x))


class AdamW:
    """Adam with decoupled weight decay.

    A parameter with zero gradient and zero decay is a fixed point:
    its moments stay zero, so the update is exactly zero.
    """

    def __init__(self, tensors, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.tensors = list(tensors)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.tensors, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


@dataclass
class TrainResult:
    steps: int
    history: list  # one LossBreakdown-shaped dict per step, plus lr
    final_loss: float


def train(model: GraspModel, instances: list[SceneInstance], config: TrainConfig,
          ckpt_path=None, loss_csv_path=None) -> TrainResult:
    """Optimize the model in place over the instance pool."""
    if not instances:
        raise ConfigError("cannot train on an empty dataset")
    n = len(instances)
    rng = np.random.default_rng(derive_seed(config.seed, "batch-sampler"))
    trainable = list(model.params.trainable())
    opt = AdamW(
        trainable,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )

    history = []
    for step in range(config.steps):
        lr = cosine_lr(step, config.steps, config.lr)
        T.zero_grads(trainable)
        if n >= config.batch:
            picks = rng.choice(n, size=config.batch, replace=False)
        else:
            picks = rng.integers(0, n, size=config.batch)

        sums = dict.fromkeys(LossBreakdown.FIELDS, 0.0)
        for slot, i in enumerate(picks):
            inst = instances[int(i)]
            vm_seed = derive_seed(config.seed, "train-vm", step, slot)
            v_in = training_vm(inst.visible, vm_seed, clean_prob=config.clean_vm_prob)
            trace = model.forward(inst.image, v_in)
            loss, breakdown = total_loss(
                trace, inst.amodal, inst.visible, occ_weight=config.occ_weight
            )
            T.mul(loss, 1.0 / config.batch).backward()
            for key in LossBreakdown.FIELDS:
                sums[key] += getattr(breakdown, key) / config.batch

        if not all(math.isfinite(v) for v in sums.values()):
            raise TrainingDiverged(step, sums)
        opt.step(lr)

        row = {"step": step, "lr": lr}
        row.update(sums)
        history.append(row)

        if ckpt_path and config.ckpt_every and (step + 1) % config.ckpt_every == 0 \
                and step + 1 < config.steps:
            save_checkpoint(f"{ckpt_path}.step{step + 1:06d}", model, step=step + 1,
                            extra={"train_config": config.to_dict()})

    if ckpt_path:
        save_checkpoint(ckpt_path, model, step=config.steps,
                        extra={"train_config": config.to_dict()})
    if loss_csv_path:
        write_loss_csv(loss_csv_path, history)
    return TrainResult(steps=config.steps, history=history, final_loss=history[-1]["total"])


def write_loss_csv(path, history) -> None:
    cols = ["step", "lr", *LossBreakdown.FIELDS]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(cols) + "\n")
        for row in history:
            fh.write(",".join(
                repr(int(row[c])) if c == "step" else repr(float(row[c])) for c in cols
            ) + "\n")
