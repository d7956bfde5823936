"""
Training the padded auto-encoder and reconstructing damaged windows
===================================================================

Trains the full-size model through the noise/mask curriculum and then asks it
to fill in dropped patches and remove noise on held-out transients.

The default 1000 optimizer steps take about 20 minutes on one CPU core; pass
a smaller number for a quick look, e.g. ``python demos/train_and_reconstruct.py 100``.
"""

import sys
import time

import numpy as np

from pae.corruption import corrupt_each
from pae.datagen import generate_dataset
from pae.model import param_count, reconstruction_metrics
from pae.training import DEFAULT_SCHEDULE, TrainConfig, smoothed, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000

ds = generate_dataset(346, seed=7)
x = ds.normalized()
train_idx, test_idx = ds.indices("train"), ds.indices("test")

config = TrainConfig(max_steps=steps, seed=0)
print(f"model parameters: {param_count(config.model):,}")
print("curriculum (SNR dB, mask ratio):", [(s.snr_db, s.mask_ratio) for s in DEFAULT_SCHEDULE])

# %%
# Train
# -----
# Each epoch visits every stage in order; within a stage every batch gets a
# fresh draw of noise and masks.

t0 = time.time()
result = train(config, x[train_idx])
loss = smoothed(result.log.losses, 20)
print(f"{result.state.t} steps in {time.time() - t0:.0f} s; "
      f"smoothed loss {loss[0]:.4f} -> {loss[-1]:.4f}")

# %%
# Inpainting and denoising on the test split
# ------------------------------------------
# ``masked_mse`` only scores the dropped patches; leaving them at zero would
# cost ``zero_fill_mse``.

for snr, ratio in ((35.0, 0.2), (35.0, 0.1)):
    xc, masks = corrupt_each(x, snr, ratio, config.model.patch_len, seed=0)
    m = reconstruction_metrics(x[test_idx], xc[test_idx], masks[test_idx], result.params, config.model)
    print(f"SNR {snr:.0f} dB, mask {ratio:.1f}: "
          f"masked {m['masked_mse']:.4f} vs zero-fill {m['zero_fill_mse']:.4f}; "
          f"whole window {m['recon_mse']:.4f} vs corrupted input {m['corrupted_mse']:.4f}")

# the checkpoint can be stored for the diagnosis demo
if len(sys.argv) > 2:
    from pae.model import save_checkpoint

    print("saved", save_checkpoint(sys.argv[2], result.params, config.model))
    np.save(sys.argv[2] + ".losses.npy", result.log.losses)
