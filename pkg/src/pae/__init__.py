"""Padded auto-encoder for denoising and inpainting reactor loss-of-coolant transients.

Submodules:

- ``numerics``: reverse-mode autodiff on float64 numpy arrays plus gradient checking
- ``datagen``: synthetic 38-channel LOCA transients and the dataset file format
- ``corruption``: SNR noise and patch masking
- ``model``: patch transformer encoder, reverse LSTM compression, decoder, checkpoints
- ``training``: curriculum loop with the Nadam optimizer
- ``diagnosis``: break location/size heads, baselines and metrics
- ``manifold``: exact t-SNE and neighbourhood purity
- ``cli``: the ``pae`` command
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = ["__version__"]
