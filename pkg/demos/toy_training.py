"""Five-fold training on a separable toy corpus.

Run: python3 demos/toy_training.py   (about a minute and a half on one core)
"""

import tempfile

from aedkit.datasets import ToyDatasetSpec, generate_toy
from aedkit.model import ModelConfig
from aedkit.training import TrainConfig, run_folds

with tempfile.TemporaryDirectory() as tmp:
    corpus = generate_toy(ToyDatasetSpec(n_classes=4, examples_per_class=40, seed=0), tmp).load()
    result = run_folds(corpus, ModelConfig(middle_repeats=0, width_multiplier=0.125), TrainConfig(epochs=10))

for fold, history in result.histories.items():
    curve = " ".join(f"{a:.2f}" for a in history.column("eval_metric"))
    print(f"fold {fold}: {curve}")
print(f"mean accuracy {result.mean:.3f}")
