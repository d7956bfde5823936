"""
Diagnosing break location and size from latents
===============================================

Encodes every corrupted transient (35 dB, 10 % patches dropped) with a
trained checkpoint, then compares

* the two-stage route: frozen encoder -> 128-d latent -> MLP head,
* the end-to-end route: the same MLP head on the raw 7600 corrupted values,
* a 5-nearest-neighbour learner on the latents,

and finishes with the 10-NN break-location purity of t-SNE maps.

Usage: ``python demos/latent_diagnosis.py CHECKPOINT`` (for instance the
``final.pae`` written by ``pae train`` or by ``demos/train_and_reconstruct.py``).
"""

import sys

import numpy as np

from pae.corruption import corrupt_each
from pae.datagen import generate_dataset
from pae.diagnosis import end_to_end_baseline, knn_predict, make_report, two_stage_report
from pae.manifold import EmbeddingConfig, knn_purity, tsne_embed
from pae.model import encode_array, load_checkpoint

params, cfg = load_checkpoint(sys.argv[1])
ds = generate_dataset(346, seed=7)
x = ds.normalized()
loc, size = ds.locations(), ds.sizes()
tr, te = ds.indices("train"), ds.indices("test")
x_corr, masks = corrupt_each(x, 35.0, 0.1, cfg.patch_len, seed=0)
z = encode_array(x_corr, masks, params, cfg)
print(f"latents: {z.shape}")

# %%
# Heads on latents versus heads on raw windows
# --------------------------------------------

corruption = {"snr_db": 35.0, "mask_ratio": 0.1}
reports = [
    two_stage_report(z[tr], loc[tr], size[tr], z[te], loc[te], size[te], corruption),
    end_to_end_baseline(x_corr[tr], loc[tr], size[tr], x_corr[te], loc[te], size[te], corruption),
]
pred_loc, pred_size = knn_predict(z[tr], loc[tr], size[tr], z[te], k=5)
reports.append(make_report(loc[te], pred_loc, size[te], pred_size, "knn_latent", corruption))

print(f"\n{'route':<12}{'cold prec':>10}{'hot prec':>10}{'macro F1':>10}{'RMSE cm':>10}")
for r in reports:
    print(f"{r.mode:<12}{r.cold_precision:>10.3f}{r.hot_precision:>10.3f}{r.macro_f1:>10.3f}{r.rmse_cm:>10.3f}")

# %%
# How well do the maps separate the locations?
# --------------------------------------------
# Fraction of each point's 10 nearest t-SNE neighbours sharing its break location.

for name, feats in (("clean", x), ("corrupted", x_corr), ("latent", z)):
    coords = tsne_embed(np.reshape(feats, (len(feats), -1)), EmbeddingConfig(seed=0)).coords
    print(f"t-SNE of {name:<9} windows: purity {knn_purity(coords, loc, k=10):.3f}")
