"""Episodic training, mIoU evaluation and the cross-domain protocol.

Training only ever samples the fold's train classes; every sampled class id
is recorded in ``TrainResult.audit`` so this can be checked after the fact.

Evaluation accumulates intersection and union per class over all episodes
and divides at the end (PASCAL-5i convention), rather than averaging
per-episode IoUs. Sums are order-independent, so sharded evaluation can merge
``IoUAccumulator`` objects in any order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .data import DatasetHandle, Episode, FoldSpec, sample_episode
from .errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from .backbone import assert_frozen
from .model import ModelConfig, SMVCENet

log = logging.getLogger(__name__)

LOSSES = ("balanced_bce", "bce")
OPTIMIZERS = ("sgd", "adam")
PROB_EPS = 1e-7
WEIGHT_CLIP = (0.1, 10.0)

# Seed-stream tags keep training and evaluation draws apart.
_TRAIN_STREAM, _EVAL_STREAM = 0, 1
_SPLIT_CODE = {"train": 0, "test": 1}


@dataclass
class TrainConfig:
    fold: FoldSpec
    learning_rate: float = 2.5e-3
    n_iterations: int = 1000
    batch_size: int = 8
    seed: int = 0
    loss: str = "balanced_bce"
    checkpoint_every: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    poly_power: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0", "train.learning_rate")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "train.batch_size")
        if self.n_iterations < 0:
            raise ConfigError("n_iterations must be >= 0", "train.n_iterations")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}", "train.loss")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}", "train.optimizer")


# --- losses -----------------------------------------------------------------

def _pixel_bce(probs: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    g = gt.to(p.dtype)
    return -(g * torch.log(p) + (1.0 - g) * torch.log1p(-p))


def bce_loss(probs: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return _pixel_bce(probs, gt).mean()


def balance_weights(fg_fraction: float) -> Tuple[float, float]:
    """``(w_fg, w_bg) = (0.5 / rho, 0.5 / (1 - rho))`` clipped to [0.1, 10]."""
    lo, hi = WEIGHT_CLIP
    w_fg = 0.5 / fg_fraction if fg_fraction > 0 else hi
    w_bg = 0.5 / (1.0 - fg_fraction) if fg_fraction < 1 else hi
    return min(max(w_fg, lo), hi), min(max(w_bg, lo), hi)


def balanced_bce_loss(probs: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-episode foreground-balanced BCE, averaged over pixels then batch."""
    if probs.ndim == 2:
        probs, gt = probs.unsqueeze(0), gt.unsqueeze(0)
    losses = []
    for p, g in zip(probs, gt):
        w_fg, w_bg = balance_weights(float(g.float().mean()))
        weights = torch.where(g.bool(), torch.tensor(w_fg, dtype=p.dtype), torch.tensor(w_bg, dtype=p.dtype))
        losses.append((weights * _pixel_bce(p, g)).mean())
    return torch.stack(losses).mean()


def loss_fn(name: str) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    if name == "balanced_bce":
        return balanced_bce_loss
    if name == "bce":
        return bce_loss
    raise ConfigError(f"loss must be one of {LOSSES}", "train.loss")


# --- training ---------------------------------------------------------------

def make_model(config: ModelConfig = None, seed: int = 0, load_backbone_weights: bool = True) -> SMVCENet:
    """Build a model whose trainable initialisation depends only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SMVCENet(config or ModelConfig(), load_backbone_weights)


def make_optimizer(model: SMVCENet, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for _, p in model.trainable_named_parameters()]
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def poly_lr(base_lr: float, iteration: int, total: int, power: float) -> float:
    if total <= 0:
        return base_lr
    return base_lr * (1.0 - min(iteration, total) / total) ** power


def stack_batch(episodes: Sequence[Episode]) -> Tuple[torch.Tensor, torch.Tensor]:
    shapes = {tuple(e.query_image.shape) for e in episodes}
    if len(shapes) != 1:
        raise ShapeError(f"episodes in one batch must share a size, got {sorted(shapes)}")
    images = torch.stack([e.query_image for e in episodes])
    masks = torch.stack([e.gt_mask for e in episodes])
    return images, masks


def train_step(model: SMVCENet, episodes: Sequence[Episode], optimizer: torch.optim.Optimizer,
               loss: str = "balanced_bce") -> float:
    """One optimizer update on a batch of train-split episodes; returns the loss."""
    if any(e.split_tag != "train" for e in episodes):
        raise ContractError("train_step received a non-train episode")
    images, masks = stack_batch(episodes)
    model.train()
    probs = model.probabilities(images)
    value = loss_fn(loss)(probs, masks)
    if not torch.isfinite(value):
        ids = [e.image_id for e in episodes]
        raise TrainingDiverged(f"non-finite loss {float(value.detach())} on batch {ids}", ids)
    optimizer.zero_grad(set_to_none=True)
    value.backward()
    optimizer.step()
    return float(value.detach())


@dataclass
class TrainResult:
    losses: List[float] = field(default_factory=list)
    audit: List[Tuple[int, int, str]] = field(default_factory=list)  # (iteration, class, image)
    iterations: int = 0

    def audit_clean(self, fold: FoldSpec) -> bool:
        return all(c in fold.train_classes for _, c, _ in self.audit)


def train_episode_seed(seed: int, iteration: int, slot: int) -> Tuple[int, ...]:
    return (seed, _TRAIN_STREAM, iteration, slot)


def train(model: SMVCENet, dataset: DatasetHandle, config: TrainConfig,
          optimizer: Optional[torch.optim.Optimizer] = None, start_iteration: int = 0,
          on_checkpoint: Optional[Callable[[int, torch.optim.Optimizer], None]] = None) -> TrainResult:
    """Episodic training loop with a frozen-backbone check at every checkpoint."""
    optimizer = optimizer or make_optimizer(model, config)
    frozen0 = model.backbone.frozen_state()
    result = TrainResult(iterations=start_iteration)
    for it in range(start_iteration, config.n_iterations):
        lr = poly_lr(config.learning_rate, it, config.n_iterations, config.poly_power)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch = [
            sample_episode(dataset, config.fold, "train", train_episode_seed(config.seed, it, b))
            for b in range(config.batch_size)
        ]
        result.audit.extend((it, e.target_class_id, e.image_id) for e in batch)
        result.losses.append(train_step(model, batch, optimizer, config.loss))
        result.iterations = it + 1
        at_boundary = config.checkpoint_every and (it + 1) % config.checkpoint_every == 0
        if at_boundary or it + 1 == config.n_iterations:
            if not assert_frozen(frozen0, model.backbone.frozen_state()):
                raise ContractError(f"backbone parameters changed by iteration {it + 1}")
            if on_checkpoint is not None:
                on_checkpoint(it + 1, optimizer)
        if (it + 1) % 100 == 0:
            log.info("iter %d  loss %.4f  lr %.2e", it + 1, result.losses[-1], lr)
    return result


# --- evaluation -------------------------------------------------------------

def compute_iou(pred, gt) -> float:
    """|pred & gt| / |pred | gt|; 1.0 when both masks are empty."""
    pred, gt = torch.as_tensor(pred), torch.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    pred, gt = pred.bool(), gt.bool()
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


@dataclass
class IoUAccumulator:
    intersection: Dict[int, int] = field(default_factory=dict)
    union: Dict[int, int] = field(default_factory=dict)
    n_episodes: int = 0

    def add(self, class_id: int, pred, gt) -> None:
        pred, gt = torch.as_tensor(pred).bool(), torch.as_tensor(gt).bool()
        self.intersection[class_id] = self.intersection.get(class_id, 0) + int((pred & gt).sum())
        self.union[class_id] = self.union.get(class_id, 0) + int((pred | gt).sum())
        self.n_episodes += 1

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        out = IoUAccumulator(dict(self.intersection), dict(self.union), self.n_episodes + other.n_episodes)
        for c in other.intersection:
            out.intersection[c] = out.intersection.get(c, 0) + other.intersection[c]
            out.union[c] = out.union.get(c, 0) + other.union[c]
        return out

    def per_class_iou(self) -> Dict[int, float]:
        return {c: (self.intersection[c] / self.union[c] if self.union[c] else 1.0)
                for c in sorted(self.intersection)}


@dataclass
class MetricsReport:
    per_class_iou: Dict[int, float]
    miou: float
    n_episodes: int
    fold_index: int
    domain_tag: str = "source"
    split: str = "test"

    def __post_init__(self):
        if any(not 0.0 <= v <= 1.0 for v in self.per_class_iou.values()):
            raise ContractError("IoU outside [0, 1]")
        expected = float(np.mean(list(self.per_class_iou.values()))) if self.per_class_iou else 0.0
        if not math.isclose(self.miou, expected, abs_tol=1e-12):
            raise ContractError("miou is not the mean of the per-class IoUs")

    @classmethod
    def from_accumulator(cls, acc: IoUAccumulator, fold_index: int, domain_tag="source", split="test"):
        per_class = acc.per_class_iou()
        miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return cls(per_class, miou, acc.n_episodes, fold_index, domain_tag, split)

    def to_record(self, seed: int, config_hash: str) -> dict:
        """The JSON-lines metrics schema."""
        return {
            "fold": self.fold_index,
            "domain": self.domain_tag,
            "split": self.split,
            "n_episodes": self.n_episodes,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "miou": self.miou,
            "seed": seed,
            "config_hash": config_hash,
        }


Predictor = Union[nn.Module, Callable[[Episode], torch.Tensor]]


def eval_episode_seed(seed: int, split: str, i: int) -> Tuple[int, ...]:
    return (seed, _EVAL_STREAM, _SPLIT_CODE[split], i)


def sample_eval_episodes(dataset, fold, split, n_episodes, seed) -> List[Episode]:
    return [sample_episode(dataset, fold, split, eval_episode_seed(seed, split, i))
            for i in range(n_episodes)]


def _predict_masks(model: Predictor, episodes: Sequence[Episode], batch_size: int = 16):
    if not isinstance(model, nn.Module):
        return [torch.as_tensor(model(e)) for e in episodes]
    model.eval()
    masks = []
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start:start + batch_size]
        groups: Dict[tuple, List[int]] = {}
        for k, e in enumerate(chunk):
            groups.setdefault(tuple(e.query_image.shape), []).append(k)
        out = [None] * len(chunk)
        for idx in groups.values():
            pred = model.predict(torch.stack([chunk[k].query_image for k in idx])).mask
            for k, m in zip(idx, pred):
                out[k] = m
        masks.extend(out)
    return masks


def evaluate_episodes(model: Predictor, episodes: Sequence[Episode]) -> IoUAccumulator:
    acc = IoUAccumulator()
    for e, m in zip(episodes, _predict_masks(model, episodes)):
        acc.add(e.target_class_id, m, e.gt_mask)
    return acc


def evaluate_fold(model: Predictor, dataset: DatasetHandle, fold: FoldSpec, split: str = "test",
                  n_episodes: int = 1000, seed: int = 0, domain_tag: str = "source") -> MetricsReport:
    """Per-class accumulated IoU over ``n_episodes`` seeded episodes.

    ``model`` is an ``SMVCENet`` or any callable mapping an Episode to a mask.
    """
    episodes = sample_eval_episodes(dataset, fold, split, n_episodes, seed)
    acc = evaluate_episodes(model, episodes)
    return MetricsReport.from_accumulator(acc, fold.fold_index, domain_tag, split)


# --- cross-domain protocol --------------------------------------------------

def map_fold(fold: FoldSpec, fold_map: Mapping[int, int], source_classes: int,
             target_classes: int) -> FoldSpec:
    """Translate a source fold into the target dataset's class ids."""
    for s, t in fold_map.items():
        if not 1 <= s <= source_classes:
            raise ConfigError(f"class map references unknown source class {s}")
        if not 1 <= t <= target_classes:
            raise ConfigError(f"class map references unknown target class {t}")
    unmapped = sorted(c for c in fold.test_classes if c not in fold_map)
    if unmapped:
        raise ConfigError(f"class map has no entry for source test classes {unmapped}")
    test = frozenset(fold_map[c] for c in fold.test_classes)
    train = frozenset(range(1, target_classes + 1)) - test
    return FoldSpec(fold.fold_index, train, test, target_classes)


@dataclass
class DomainEvalConfig:
    train: TrainConfig
    n_episodes: int = 1000
    eval_seed: int = 0
    run_training: bool = True


def run_domain_adaptation(model: Predictor, source_dataset: DatasetHandle,
                          target_dataset: DatasetHandle, fold_map: Mapping[int, int],
                          config: DomainEvalConfig) -> Tuple[MetricsReport, MetricsReport]:
    """Train on the source fold (target data untouched), then report the
    source test split and the mapped target test split."""
    fold = config.train.fold
    target_fold = map_fold(fold, fold_map, source_dataset.n_total_classes,
                           target_dataset.n_total_classes)
    if config.run_training and isinstance(model, SMVCENet):
        train(model, source_dataset, config.train)
    source = evaluate_fold(model, source_dataset, fold, "test", config.n_episodes,
                           config.eval_seed, domain_tag="source")
    target = evaluate_fold(model, target_dataset, target_fold, "test", config.n_episodes,
                           config.eval_seed, domain_tag="target")
    return source, target
