"""Scratch versus pretrained donors on toy data, tabulated like a results table.

Run: python3 demos/ablation_grid.py OUT_DIR   (several minutes on one core)
"""

import sys

from aedkit.augment import MULTI_LABEL, AugmentSpec
from aedkit.datasets import ToyDatasetSpec, generate_toy
from aedkit.model import ModelConfig
from aedkit.training import BCE, AblationEntry, AblationGrid, TrainConfig, ablate

out = sys.argv[1] if len(sys.argv) > 1 else "ablation-demo"
small = ModelConfig(middle_repeats=0, width_multiplier=0.125)
datasets = {
    "esc50": generate_toy(ToyDatasetSpec(n_classes=4, seed=0), f"{out}/data/esc50").load(),
    "donor": generate_toy(ToyDatasetSpec(n_classes=8, multi_label=True, seed=1), f"{out}/data/donor").load(),
}
grid = AblationGrid(
    [
        AblationEntry("scratch", small),
        AblationEntry("donor", small, pretrain="donor"),
        AblationEntry("donor+aug", small, pretrain="donor", pretrain_augment=AugmentSpec.default(MULTI_LABEL)),
    ],
    train=TrainConfig(epochs=10),
    pretrain_train=TrainConfig(epochs=None, loss_mode=BCE, lr_floor=3.3e-4, patience=2),
)
rows = ablate(grid, datasets, out)
for r in rows:
    print(f"{r['model']:<10} pretrain={r['pretrain']:<4} augment={r['augment']:<4} mean={r['mean_accuracy']:.3f}")
print(f"per-epoch curves in {out}/curves.csv")
