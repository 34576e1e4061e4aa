"""
One SMA transformer block and the encoder shapes
================================================

"""

import numpy as np

from smaformer import blocks as B
from smaformer.model import ModelConfig, init_params, model_forward, parameter_count
from smaformer.tensor import no_grad, randn

# a block on a 8 x 8 x 8 feature map (channels first)
p = B.init_sma_block(B.Initializer(0, np.float64), dim=8, heads=2, ratio=2)
x = randn((8, 8, 8), seed=1)
y = B.sma_block_forward(x, p)
print("block out", y.shape, "change", float(np.abs(y.data - x.data).max()))

# zero the fuse and MLP output projections: the block becomes the identity
p.fuse_w.data[:] = 0
p.emlp.down_w.data[:] = 0
print("identity", B.sma_block_forward(x, p).data.tobytes() == x.data.tobytes())

# encoder outputs double channels and halve resolution at every level
cfg = ModelConfig(base_channels=8, blocks_per_stage=(1, 1, 1, 1), heads=2, image_size=(32, 32))
trace = []
with no_grad():
    logits = model_forward(randn((1, 3, 32, 32), seed=2, dtype=np.float32), init_params(cfg, 0), cfg, trace)
for name, shape in trace:
    print(f"{name:<10} {shape}")
print("logits", logits.shape, "parameters", parameter_count(cfg))
