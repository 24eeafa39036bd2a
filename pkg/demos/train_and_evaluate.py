"""
Training briefly and measuring mIoU
===================================

A short run on the tiny random backbone. The numbers after a few dozen
iterations are far from converged; the acceptance suite runs the long
version.
"""

# %%
import tempfile

import torch

from smvcenet.data import FoldSpec, generate_synthetic_dataset
from smvcenet.train import TrainConfig, evaluate_fold, make_model, train

torch.set_num_threads(1)
dataset = generate_synthetic_dataset(tempfile.mkdtemp(), 80, 64, 4, seed=0)
fold = FoldSpec(0, {3, 4}, {1, 2}, 4)

# %%
model = make_model(seed=0)
print(model.parameter_counts())
config = TrainConfig(fold=fold, n_iterations=40, batch_size=4, optimizer="adam", learning_rate=1e-3)
result = train(model, dataset, config)
print("first losses", [round(v, 3) for v in result.losses[:3]], "last", round(result.losses[-1], 3))
print("audit clean:", result.audit_clean(fold))

# %%
# Per-class IoU pools intersections and unions over every episode of a class.
seen = evaluate_fold(model, dataset, fold, "train", 50, seed=1)
unseen = evaluate_fold(model, dataset, fold, "test", 50, seed=1)
all_fg = evaluate_fold(lambda ep: torch.ones_like(ep.gt_mask), dataset, fold, "test", 50, seed=1)
print("seen", seen.per_class_iou, "unseen", unseen.per_class_iou, "all-foreground", all_fg.miou)
