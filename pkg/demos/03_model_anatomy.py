"""
Model anatomy
=============

Parameter names and sizes for the default network, then a forward pass
through a small one, stage by stage.
"""

import numpy as np

from vitsr import diffcore as dc
from vitsr.model import (ModelConfig, ViTSR, count_params, decoder_forward, encoder_forward,
                         param_shapes, patch_embed, upsample_head)

default = ModelConfig()
print("default config: %d parameters" % count_params(default))
for name, shape in list(param_shapes(default).items())[:5]:
    print(f"  {name:36s} {shape}")
print("  ...")
for name, shape in list(param_shapes(default).items())[-6:]:
    print(f"  {name:36s} {shape}")

# small enough to run here
cfg = ModelConfig(image_size=64, patch_size=8, embed_dim=64, encoder_depth=4, decoder_depth=2,
                  num_heads_encoder=4, num_heads_decoder=4)
model = ViTSR(cfg, seed=0)
img = np.random.default_rng(0).uniform(0, 1, (2, 3, 64, 64)).astype(np.float32)
with dc.no_grad():
    tokens = patch_embed(model.params, img, cfg)
    print("patch tokens ", tokens.shape)
    tokens = encoder_forward(model.params, tokens, cfg)
    tokens = decoder_forward(model.params, tokens, cfg)
    print("decoded      ", tokens.shape)
    out = upsample_head(model.params, tokens, cfg)
    print("head output  ", out.shape, "max |out| =", np.abs(out.data).max())

# the final conv starts at zero, so the residual model begins as the identity
print("identity at init:", np.array_equal(model(img).data, img))
