"""
Two-stage training, miniature
=============================

Colorization pretraining, then super-resolution fine-tuning from the
pretrained weights, on a synthetic dataset in a temporary folder. Takes
well under a minute on one CPU core.
"""

import dataclasses
import logging
import tempfile
from pathlib import Path

from vitsr import data as D
from vitsr.model import ModelConfig, ViTSR
from vitsr.training import TrainConfig, run_stage, transfer_stage1_to_stage2

logging.basicConfig(level=logging.INFO, format="%(message)s")

work = Path(tempfile.mkdtemp(prefix="vitsr_demo_"))
D.make_synthetic_dataset(work / "data", train_count=32, val_count=8, size=64, seed=0)
train = D.DatasetSpec(work / "data", "train", crop_size=64)
val = D.DatasetSpec(work / "data", "val", crop_size=64)

cfg = ModelConfig(image_size=64, patch_size=8, embed_dim=64, encoder_depth=4, decoder_depth=2,
                  num_heads_encoder=4, num_heads_decoder=4)

# stage 1: gray in, color out, no residual
stage1 = ViTSR(dataclasses.replace(cfg, residual_mode="off"), seed=0)
run_stage(stage1, train, val, TrainConfig(stage=D.COLORIZATION, max_epochs=10, patience=9,
                                          batch_size=8, lr_init=1e-3), run_dir=work / "s1")

# stage 2: bicubic-upsampled in, original out, residual on
stage2 = ViTSR(cfg)
transfer_stage1_to_stage2(work / "s1" / "best.ckpt", stage2)
result = run_stage(stage2, train, val, TrainConfig(stage=D.SUPER_RESOLUTION, max_epochs=10,
                                                   patience=9, batch_size=8, lr_init=1e-3),
                   run_dir=work / "s2")
print("best epoch %d: %.2f dB" % (result.best_epoch, result.best_psnr))
print("log, checkpoints and samples in", work)
