"""
Overfitting a small model on eight samples
==========================================

About ten minutes on one core: 64 x 64 inputs, 16 base channels, one
block per stage, 400 steps at batch 4.
"""

import time

from smaformer.data import make_dataset
from smaformer.model import ModelConfig, init_params
from smaformer.training import TrainConfig, evaluate, train_loop

_, samples = make_dataset(8, seed=0)
cfg = ModelConfig(base_channels=16, blocks_per_stage=(1, 1, 1, 1), heads=4, patch_size=(4, 2, 1, 1))
tcfg = TrainConfig(total_steps=400, batch_size=4, eval_every=100)
params = init_params(cfg, seed=0)

print("before", evaluate(params, cfg, samples).class_dsc)
start = time.perf_counter()


def show(row):
    if row["val_dsc"] is not None:
        print(f"step {row['step'] + 1:4d} loss {row['loss']:.4f} dsc {row['val_dsc']:.3f}")


run = train_loop(params, cfg, samples, tcfg, val_samples=samples, on_step=show)
print(f"{time.perf_counter() - start:.0f}s, loss {run.history[0]['loss']:.3f} -> {run.history[-1]['loss']:.3f}")

print(evaluate(params, cfg, samples).format_table())
