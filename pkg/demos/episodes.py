"""
Folds and episodes on synthetic shapes
======================================

A synthetic dataset draws one shape family per image. Classes are split
into folds: training only ever sees the fold's train classes, evaluation
uses the held-out ones.
"""

# %%
import tempfile

from smvcenet.data import build_fold_spec, generate_synthetic_dataset, sample_episode

root = tempfile.mkdtemp()
dataset = generate_synthetic_dataset(root, 40, 64, 4, seed=0)
print(len(dataset.index), "images;", {c: len(dataset.images_with(c)) for c in range(1, 5)})

# %%
fold = build_fold_spec(0, 4, 2)
print("train classes", sorted(fold.train_classes), "test classes", sorted(fold.test_classes))

# %%
# Episodes are pure functions of their seed.
for seed in range(4):
    ep = sample_episode(dataset, fold, "test", seed)
    print(seed, ep.image_id, "class", ep.target_class_id, "foreground px", int(ep.gt_mask.sum()))
