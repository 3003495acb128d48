"""Training loop for both stages of class extension.

Stage one trains a source classifier on Healthy/DR.  Stage two transplants
its weights into a three-class classifier and fine-tunes every parameter on
the extended data.  Both stages run the same :func:`fit` loop.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datahub import ImageRecord, LabelSpace, SplitManifest, load_image
from .nnmodel import Checkpoint, ClassifierConfig, DenseNetClassifier, build, extend_head

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 8
    max_epochs: int = 100
    early_stop_patience: int = 10
    weight_decay: float = 1e-2
    seed: int = 0
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("batch_size, max_epochs and early_stop_patience must be positive")
        if self.early_stop_patience > self.max_epochs:
            raise ValueError("early_stop_patience cannot exceed max_epochs")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_acc), start=1):
                w.writerow([i, *(repr(v) for v in row)])
        return path


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` flat epochs.

    Epochs are counted from 1.  Only a strict decrease counts as improvement.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.epoch = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; return True if this epoch is the new best."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.epoch - self.best_epoch >= self.patience


def cross_entropy(probabilities, onehot):
    """Mean over the batch of ``-sum_c y_c log p_c``, logs floored at 1e-12.

    Works on numpy arrays and torch tensors alike.
    """
    if probabilities.shape != onehot.shape or len(probabilities.shape) != 2:
        raise ValueError(f"shape mismatch: {tuple(probabilities.shape)} vs {tuple(onehot.shape)}")
    if isinstance(probabilities, torch.Tensor):
        oh = torch.as_tensor(onehot, dtype=probabilities.dtype)
        _check_onehot(oh.detach().cpu().numpy())
        return -(oh * torch.log(probabilities.clamp_min(LOG_FLOOR))).sum(dim=1).mean()
    p = np.asarray(probabilities, dtype=np.float64)
    oh = np.asarray(onehot, dtype=np.float64)
    _check_onehot(oh)
    return float(-(oh * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=1).mean())


def _check_onehot(oh: np.ndarray) -> None:
    if not (np.isin(oh, (0.0, 1.0)).all() and (oh.sum(axis=1) == 1).all()):
        raise ValueError("label rows must be one-hot")


def onehot(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels, num_classes).to(dtype)


def loss_from_logits(logits: torch.Tensor, labels: torch.Tensor, class_weights=None) -> torch.Tensor:
    """The same objective as :func:`cross_entropy` with ``p = softmax(logits)``.

    Uses ``log_softmax`` for stability.  Optional per-class weights scale
    each sample's term; the mean is then taken over the weights.
    """
    logp = torch.log_softmax(logits, dim=1)
    per_sample = -logp.gather(1, labels[:, None]).squeeze(1)
    if class_weights is None:
        return per_sample.mean()
    w = torch.as_tensor(class_weights, dtype=logits.dtype)[labels]
    return (w * per_sample).sum() / w.sum()


def load_arrays(records: Sequence[ImageRecord], labelspace: LabelSpace, side: int):
    """Decode records into ``(N, 3, side, side)`` images and integer labels."""
    for r in records:
        if r.label not in labelspace:
            raise ValueError(f"label {r.label!r} of {r.image_path} is outside {list(labelspace.classes)}")
    if not records:
        return torch.zeros((0, 3, side, side)), torch.zeros((0,), dtype=torch.long)
    x = np.stack([load_image(r, side).pixels for r in records]).transpose(0, 3, 1, 2)
    y = np.array([labelspace.index(r.label) for r in records], dtype=np.int64)
    return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(y)


def evaluate_loss(model: DenseNetClassifier, x: torch.Tensor, y: torch.Tensor, batch_size: int = 64):
    """Mean loss and accuracy in eval mode."""
    model.eval()
    total, correct = 0.0, 0
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            logits = model(x[i : i + batch_size].to(dtype))
            yb = y[i : i + batch_size]
            total += float(loss_from_logits(logits, yb)) * len(yb)
            correct += int((logits.argmax(1) == yb).sum())
    return total / len(x), correct / len(x)


def fit(
    model: DenseNetClassifier,
    x_train: torch.Tensor,
    y_train: torch.Tensor,
    x_val: torch.Tensor,
    y_val: torch.Tensor,
    cfg: TrainConfig,
) -> tuple[Checkpoint, TrainHistory]:
    """Mini-batch AdamW with early stopping on validation loss.

    Returns the checkpoint of the best epoch, not the last one.
    """
    if len(x_train) == 0:
        raise ValueError("empty training set")
    if len(x_val) == 0:
        raise ValueError("empty validation set")
    k = len(model.labelspace)
    if int(y_train.max()) >= k or int(y_val.max()) >= k:
        raise ValueError("labels outside the model's label space")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.early_stop_patience)
    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    dtype = next(model.parameters()).dtype
    n = len(x_train)
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        running, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2 and n > 1:
                continue  # batch norm needs >= 2 samples
            xb, yb = x_train[idx].to(dtype), y_train[idx]
            opt.zero_grad()
            loss = loss_from_logits(model(xb), yb, cfg.class_weights)
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
            seen += len(idx)
        val_loss, val_acc = evaluate_loss(model, x_val, y_val)
        history.train_loss.append(running / max(seen, 1))
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        if stopper.step(val_loss):
            best_state = copy.deepcopy(model.state_dict())
        log.info(
            "epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f",
            epoch,
            history.train_loss[-1],
            val_loss,
            val_acc,
        )
        if stopper.should_stop:
            break
    history.stopped_epoch = stopper.epoch
    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    ckpt = Checkpoint.from_model(
        model,
        epochs_run=history.stopped_epoch,
        best_epoch=history.best_epoch,
        best_val_loss=history.best_val_loss,
        seed=cfg.seed,
    )
    return ckpt, history


def train(
    model: DenseNetClassifier,
    train_records: Sequence[ImageRecord],
    val_records: Sequence[ImageRecord],
    cfg: TrainConfig,
) -> tuple[Checkpoint, TrainHistory]:
    side = model.config.input_side
    x_tr, y_tr = load_arrays(train_records, model.labelspace, side)
    x_va, y_va = load_arrays(val_records, model.labelspace, side)
    return fit(model, x_tr, y_tr, x_va, y_va, cfg)


def subsample_source_classes(
    records: Sequence[ImageRecord], source_space: LabelSpace, fraction: float, seed: int
) -> list[ImageRecord]:
    """Keep all new-class records and a seeded ``fraction`` of each source class."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return list(records)
    rng = np.random.default_rng(seed)
    keep = []
    for label in source_space:
        idx = [i for i, r in enumerate(records) if r.label == label]
        n = max(1, round(fraction * len(idx))) if idx else 0
        keep.extend(rng.choice(idx, size=n, replace=False).tolist() if idx else [])
    keep.extend(i for i, r in enumerate(records) if r.label not in source_space)
    return [records[i] for i in sorted(keep)]


@dataclass
class CELDResult:
    source: Checkpoint
    target: Checkpoint
    source_history: TrainHistory
    target_history: TrainHistory


def run_celd(
    source_split: SplitManifest,
    target_split: SplitManifest,
    model_config: ClassifierConfig,
    source_cfg: TrainConfig,
    target_cfg: TrainConfig,
    head_seed: int | None = None,
    source_fraction: float = 1.0,
) -> CELDResult:
    """Train the source classifier, extend its head, fine-tune on the target split.

    ``source_fraction`` < 1 keeps only that share of the source-class
    training records in stage two.
    """
    source_space = source_split.labelspace
    target_space = target_split.labelspace
    if not source_space.is_prefix_of(target_space):
        raise ValueError("source label space must be a prefix of the target label space")
    model_s = build(replace(model_config, num_classes=len(source_space)), source_space)
    ckpt_s, hist_s = train(model_s, source_split.train, source_split.val, source_cfg)
    log.info("source stage: best epoch %d, val acc %.4f", hist_s.best_epoch, hist_s.val_acc[hist_s.best_epoch - 1])
    seed = model_config.init_seed + 1 if head_seed is None else head_seed
    model_t = extend_head(ckpt_s, target_space, seed=seed)
    train_t = subsample_source_classes(target_split.train, source_space, source_fraction, target_cfg.seed)
    ckpt_t, hist_t = train(model_t, train_t, target_split.val, target_cfg)
    log.info("target stage: best epoch %d, val acc %.4f", hist_t.best_epoch, hist_t.val_acc[hist_t.best_epoch - 1])
    return CELDResult(ckpt_s, ckpt_t, hist_s, hist_t)

