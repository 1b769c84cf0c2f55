"""Fine-tuning loop: frozen encoders, AdamW on adapters/lifts/decoder."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DataFormatError, DimensionError, TrainingDiverged
from .formats import CheckpointEntry, read_checkpoint, write_checkpoint
from .losses import LossConfig, combined_loss
from .metrics import EvalRecord, aggregate, evaluate_masks
from .model import GliomaNet, ModelConfig, forward, freeze_encoders, predict_mask
from .synthdata import Dataset, load_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    adapter_depth: Optional[int] = None
    eval_every: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.lr < 0:
            raise ContractError("lr must be nonnegative")
        if self.epochs < 0:
            raise ContractError("epochs must be nonnegative")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_dice, self.lambda_ce)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, cfg: Optional[TrainConfig] = None) -> "OptimizerState":
        cfg = cfg or TrainConfig()
        st = cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        for p in params:
            if p.trainable:
                st.m[p.name] = np.zeros_like(p.data)
                st.v[p.name] = np.zeros_like(p.data)
        return st


def freeze_backbones(net: GliomaNet) -> None:
    """Encoders frozen; adapters, channel lifts and decoder trainable."""
    freeze_encoders(net)


def adamw_step(params, state: OptimizerState) -> None:
    """One decoupled-weight-decay Adam update in place, reading ``p.grad``."""
    live = [p for p in params if p.trainable]
    for p in live:
        if p.grad is None:
            raise ContractError(f"no gradient for trainable parameter {p.name!r}")
        if p.name not in state.m:
            raise ContractError(f"no optimizer state for {p.name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in live:
        g = p.grad.astype(np.float32)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data
        p.data = (p.data - state.lr * update).astype(np.float32)


@dataclass
class ParamReport:
    total_params: int
    trainable_params: int
    percent: float


def count_params(net) -> ParamReport:
    total = trainable = 0
    for p in net.parameters():
        n = int(np.prod(p.shape))
        total += n
        if p.trainable:
            trainable += n
    return ParamReport(total, trainable, 100.0 * trainable / total if total else 0.0)


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    dice_percent: Optional[float] = None
    hd95: Optional[float] = None
    hd95_undefined_count: Optional[int] = None


HISTORY_FIELDS = ("epoch", "train_loss", "dice_percent", "hd95", "hd95_undefined_count")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_history_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, f)) for f in HISTORY_FIELDS])


def epoch_order(train_ids, seed: int, epoch: int) -> list[str]:
    perm = np.random.default_rng([seed, epoch]).permutation(len(train_ids))
    return [train_ids[i] for i in perm]


def train(net: GliomaNet, dataset, cfg: TrainConfig, state: Optional[OptimizerState] = None,
          on_epoch: Optional[Callable[[HistoryRow], None]] = None) -> list[HistoryRow]:
    """Train from ``state`` (fresh if None) up to ``cfg.epochs`` epochs.

    Resuming is by step count: ``state.t`` must sit on an epoch boundary.
    """
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    train_ids = dataset.ids("train")
    if not train_ids:
        raise ContractError("empty train split")
    loss_cfg = cfg.loss
    if state is None:
        state = OptimizerState.for_params(net.parameters(), cfg)
    steps_per_epoch = math.ceil(len(train_ids) / cfg.batch_size)
    if state.t % steps_per_epoch:
        raise ContractError(f"optimizer step {state.t} is not on an epoch boundary")
    history = []
    for epoch in range(state.t // steps_per_epoch, cfg.epochs):
        order = epoch_order(train_ids, cfg.seed, epoch)
        losses = []
        for step in range(steps_per_epoch):
            ids = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            inputs, masks = load_batch(dataset, ids, net.variant)
            net.zero_grad()
            loss = combined_loss(forward(inputs, net), masks, loss_cfg)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}, step {state.t + 1} (batch {ids})")
            T.backward(loss)
            adamw_step(net.parameters(), state)
            losses.append(value)
        row = HistoryRow(epoch + 1, float(np.mean(losses)))
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            agg, _ = evaluate(net, dataset, "test")
            row.dice_percent, row.hd95, row.hd95_undefined_count = agg.dice_percent, agg.hd95, agg.hd95_undefined
        log.info("epoch %d loss %.4f dice %s", row.epoch, row.train_loss, row.dice_percent)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    net.zero_grad()
    return history


def predict(net: GliomaNet, inputs) -> np.ndarray:
    with T.no_grad():
        return predict_mask(forward(inputs, net))


def evaluate(net: GliomaNet, dataset, split: str = "test",
             batch_size: int = 25) -> tuple[EvalRecord, list[EvalRecord]]:
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    ids = dataset.ids(split)
    if not ids:
        raise ContractError(f"split {split!r} is empty")
    records = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        inputs, masks = load_batch(dataset, chunk, net.variant)
        pred = predict(net, inputs)
        records.extend(evaluate_masks(p, g, i) for p, g, i in zip(pred, masks, chunk))
    return aggregate(records), records


def checkpoint_save(net: GliomaNet, state: Optional[OptimizerState], path) -> None:
    entries = [CheckpointEntry(name, p.trainable, p.data) for name, p in net.named_parameters()]
    if state is not None:
        for name in state.m:
            entries.append(CheckpointEntry(f"{name}.m", False, state.m[name]))
            entries.append(CheckpointEntry(f"{name}.v", False, state.v[name]))
        entries.append(CheckpointEntry("t", False, np.array(state.t, dtype=np.float32)))
    write_checkpoint(path, entries)


def load_checkpoint_into(net: GliomaNet, path, cfg: Optional[TrainConfig] = None) -> Optional[OptimizerState]:
    entries = {e.name: e for e in read_checkpoint(path)}
    params = dict(net.named_parameters())
    missing = [n for n in params if n not in entries]
    if missing:
        raise DataFormatError(f"checkpoint {path} lacks parameters, e.g. {missing[:3]}")
    for name, p in params.items():
        e = entries[name]
        if e.data.shape != p.shape:
            raise DimensionError(f"parameter {name!r}: checkpoint shape {e.data.shape} vs model {p.shape}")
        p.data = e.data.copy()
        p.trainable = e.trainable
    if "t" not in entries:
        return None
    cfg = cfg or TrainConfig()
    state = OptimizerState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay,
                           t=int(entries["t"].data.reshape(-1)[0]))
    for name in params:
        if f"{name}.m" in entries:
            state.m[name] = entries[f"{name}.m"].data.copy()
            state.v[name] = entries[f"{name}.v"].data.copy()
    return state


def checkpoint_load(path, config: ModelConfig,
                    cfg: Optional[TrainConfig] = None) -> tuple[GliomaNet, Optional[OptimizerState]]:
    net = GliomaNet(config)
    state = load_checkpoint_into(net, path, cfg)
    return net, state
