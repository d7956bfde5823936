"""
Synthetic LOCA transients and sensor corruption
===============================================

Builds the 346-transient dataset, looks at how the two break locations and
the break size shape a few channels, then applies the evaluation corruption
(35 dB noise, 10 % of patches dropped) to one window.

Run with ``python demos/explore_transients.py``.
"""

import numpy as np

from pae.corruption import corrupt
from pae.datagen import CHANNEL_NAMES, TEMPLATES, generate_dataset, time_axis

ds = generate_dataset(count=346, seed=7)
loc = ds.locations()
print(f"{len(ds)} transients, {np.sum(loc == 0)} cold-leg / {np.sum(loc == 1)} hot-leg")
print(f"train/test: {len(ds.indices('train'))}/{len(ds.indices('test'))}")
print(f"break sizes span {ds.sizes().min():.2f} to {ds.sizes().max():.2f} cm (log-uniform)")

# %%
# Channels that tell the break locations apart
# ---------------------------------------------
# A template differs between locations when its amplitude or onset delay
# does. The break-flow channels are the clearest: only the broken leg sees flow.

distinct = [t.name for t in TEMPLATES if (t.amplitude_cold, t.delay_cold) != (t.amplitude_hot, t.delay_hot)]
print(f"\n{len(distinct)} of {len(TEMPLATES)} channels respond differently per location, e.g.")
for name in distinct[:6]:
    print("  ", name)

# %%
# Size sets the pace
# ------------------
# Larger breaks depressurise faster. Compare the pressurizer-pressure channel
# 60 s into the smallest and the largest transient of each location.

t = time_axis()
k = int(np.searchsorted(t, 60.0))
ch = CHANNEL_NAMES.index("pzr_pressure")
sizes = ds.sizes()
for cls, label in ((0, "cold"), (1, "hot")):
    members = np.flatnonzero(loc == cls)
    small, large = members[np.argmin(sizes[members])], members[np.argmax(sizes[members])]
    print(f"{label}-leg {CHANNEL_NAMES[ch]} at t={t[k]:.0f}s: "
          f"{sizes[small]:.2f} cm -> {ds.transients[small].channels[ch, k]:.4g}, "
          f"{sizes[large]:.2f} cm -> {ds.transients[large].channels[ch, k]:.4g}")

# %%
# Corrupting a window
# -------------------
# Noise is scaled per channel to the requested SNR, then whole 40-sample
# patches are zeroed. 10 % of 190 patches is 19.

x = ds.normalized([0])[0]
x_corr, mask = corrupt(x, snr_db=35.0, mask_ratio=0.1, patch_len=40, rng=np.random.default_rng(0))
print(f"\nmasked patches: {mask.sum()} of {mask.size}")
noise = (x_corr - x).reshape(190, 40)[~mask]
signal = x.reshape(190, 40)[~mask]
print(f"measured SNR on kept patches: {10 * np.log10(np.mean(signal**2) / np.mean(noise**2)):.1f} dB")
print(f"MSE of the corrupted window against the clean one: {np.mean((x_corr - x) ** 2):.4f}")
