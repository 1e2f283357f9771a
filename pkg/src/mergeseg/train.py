"""Training loop: decoupled-weight-decay adaptive moments with polynomial decay.

Everything is deterministic for a fixed (seed, config): batch order comes from
a dedicated generator, gradients accumulate sample by sample in batch order,
and the optimizer walks the parameter registry in insertion order. The log
stores floats via repr, so two identical runs produce byte-identical logs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import tensor as T
from .data import SegSample
from .errors import ConfigurationError, NumericError
from .losses import LossParts, total_loss
from .model import Model

LOG_HEADER = ("step,lr,total,focal_semantic,relaxed_semantic,dice_boundary,"
              "bce_boundary,focal_final,ce_final")


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    lr_power: float = 0.9
    batch_size: int = 4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    ckpt_every: int = 500

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")


def polynomial_lr(step: int, total_steps: int, lr0: float, power: float) -> float:
    """lr0 * (1 - step/total)^power; full lr at step 0."""
    if total_steps <= 0:
        return lr0
    return lr0 * (1.0 - step / total_steps) ** power


class AdamW:
    """Adaptive moments with decoupled weight decay over a parameter registry."""

    def __init__(self, params: dict[str, T.Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps) + c.weight_decay * p.data
            p.data = np.ascontiguousarray(p.data - lr * update.astype(p.data.dtype))


@dataclass
class StepRecord:
    step: int
    lr: float
    total: float
    parts: dict[str, float]

    def csv_line(self) -> str:
        cols = [str(self.step), repr(self.lr), repr(self.total)]
        cols += [repr(self.parts[f.name]) for f in dc_fields(LossParts)]
        return ",".join(cols)


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        return "\n".join([LOG_HEADER] + [r.csv_line() for r in self.records]) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_csv())


def train(model: Model, samples: list[SegSample], tcfg: TrainConfig,
          out_dir=None) -> TrainLog:
    """Run the loop in place on ``model``; returns the per-step loss log.

    Batches draw without replacement from seeded epoch permutations; each
    sample's scaled loss backpropagates into the shared parameter gradients
    before one optimizer step. A non-finite loss aborts with the offending
    part and step.
    """
    if not samples:
        raise ConfigurationError("training needs a nonempty dataset")
    opt = AdamW(model.params, tcfg)
    order_rng = np.random.default_rng(tcfg.seed)
    pool: list[int] = []
    log = TrainLog()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for step in range(tcfg.steps):
        model.zero_grad()
        part_sums = {f.name: 0.0 for f in dc_fields(LossParts)}
        total_value = 0.0
        for _ in range(tcfg.batch_size):
            if not pool:
                pool = [int(i) for i in order_rng.permutation(len(samples))]
            sample = samples[pool.pop(0)]
            out = model.forward(sample.image)
            parts = model.loss_parts(out, sample.labels, sample.boundary)
            try:
                loss = total_loss(parts, model.cfg.loss)
            except NumericError as err:
                raise NumericError(f"step {step}: {err}") from err
            T.mul_const(loss, 1.0 / tcfg.batch_size).backward()
            total_value += loss.item() / tcfg.batch_size
            for f in dc_fields(LossParts):
                part_sums[f.name] += getattr(parts, f.name).item() / tcfg.batch_size
        if not np.isfinite(total_value):
            raise NumericError(f"step {step}: non-finite total loss")
        lr = polynomial_lr(step, tcfg.steps, tcfg.lr, tcfg.lr_power)
        opt.step(lr)
        log.records.append(StepRecord(step=step, lr=lr, total=total_value, parts=part_sums))
        if out_dir is not None and tcfg.ckpt_every and (step + 1) % tcfg.ckpt_every == 0:
            model.save(os.path.join(out_dir, f"ckpt_{step + 1:06d}.bin"))

    if out_dir is not None:
        model.save(os.path.join(out_dir, "ckpt_final.bin"))
        log.save(os.path.join(out_dir, "train_log.csv"))
    return log
