"""
Bicubic resampling, PSNR and SSIM
=================================

Degrade a synthetic image by 4x and back, then score it.
"""

import numpy as np

from vitsr import imageops
from vitsr.data import synthetic_image

img = synthetic_image(128, np.random.default_rng(3)).astype(np.float32)

# Catmull-Rom taps halfway between two pixels
print("phase 0.5 weights", imageops.cubic_weights(0.5))

small = imageops.bicubic_resize(img, 32, 32)
back = imageops.bicubic_resize(small, 128, 128)
print("4x down/up  PSNR %.2f dB  SSIM %.4f" % (imageops.psnr(back, img), imageops.ssim(back, img)))
print("luma only   PSNR %.2f dB  SSIM %.4f" % (imageops.luma_psnr(back, img),
                                               imageops.luma_ssim(back, img)))

# noise lowers both scores
for sigma in (0.01, 0.05, 0.1):
    noisy = np.clip(img + np.random.default_rng(0).normal(0, sigma, img.shape), 0, 1)
    print(f"noise {sigma:4.2f}: PSNR {imageops.psnr(noisy, img):6.2f}  "
          f"SSIM {imageops.ssim(noisy, img):.4f}")

# constant images: only the stabilizing constant is left
print("ssim(0, 1) =", imageops.ssim(np.zeros((16, 16, 3)), np.ones((16, 16, 3))))
