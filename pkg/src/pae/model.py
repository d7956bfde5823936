"""Padded auto-encoder: transformer encoder, reverse LSTM compression, symmetric decoder.

Windows of ``channels x samples`` are cut into patches of ``samples //
patches_per_channel`` samples each; every patch is one token. Masked patches
stay in the sequence as zero rows, so positional terms still reach them.

All functions accept a batch ``[B, C, T]`` (or a single ``[C, T]`` window
where noted) and operate on :class:`~pae.numerics.Tensor` values so they can be
differentiated.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .corruption import CorruptionSpec, corrupt
from .errors import ContractError, NumericError, ShapeError
from .numerics import Tensor

CHECKPOINT_FORMAT = 1
_MAGIC = b"PAECKPT\n"


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 38
    samples: int = 200
    patches_per_channel: int = 5
    latent_dim: int = 128
    depth_enc: int = 4
    depth_dec: int = 4
    heads: int = 4
    mlp_ratio: float = 0.8
    dropout: float = 0.1
    lstm_hidden: int = 128
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.samples % self.patches_per_channel:
            raise ShapeError(
                f"samples={self.samples} not divisible by patches_per_channel={self.patches_per_channel}"
            )
        if self.patch_len % self.heads:
            raise ShapeError(f"patch length {self.patch_len} not divisible by heads={self.heads}")

    @property
    def patch_len(self) -> int:
        return self.samples // self.patches_per_channel

    @property
    def tokens(self) -> int:
        return self.channels * self.patches_per_channel

    @property
    def head_dim(self) -> int:
        return self.patch_len // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(math.floor(self.mlp_ratio * self.patch_len + 0.5))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


TOY_CONFIG = ModelConfig(
    channels=2,
    samples=20,
    patches_per_channel=2,
    latent_dim=8,
    depth_enc=2,
    depth_dec=2,
    heads=2,
    lstm_hidden=8,
)


# ---------------------------------------------------------------------------
# parameters


def _block_shapes(prefix: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, hid = cfg.patch_len, cfg.mlp_hidden
    inner = cfg.heads * cfg.head_dim
    return [
        (f"{prefix}.ln1.gamma", (d,)),
        (f"{prefix}.ln1.beta", (d,)),
        (f"{prefix}.attn.qkv", (d, 3 * inner)),
        (f"{prefix}.attn.proj", (inner, d)),
        (f"{prefix}.ln2.gamma", (d,)),
        (f"{prefix}.ln2.beta", (d,)),
        (f"{prefix}.mlp.fc1.weight", (d, hid)),
        (f"{prefix}.mlp.fc1.bias", (hid,)),
        (f"{prefix}.mlp.fc2.weight", (hid, d)),
        (f"{prefix}.mlp.fc2.bias", (d,)),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` table of every learnable tensor."""
    d, n, h, z = cfg.patch_len, cfg.tokens, cfg.lstm_hidden, cfg.latent_dim
    shapes = [("pos_embedding", (n + 1, d)), ("class_token", (1, d))]
    for q in range(cfg.depth_enc):
        shapes += _block_shapes(f"enc.{q}", cfg)
    shapes += [
        ("lstm.w_ih", (d, 4 * h)),
        ("lstm.w_hh", (h, 4 * h)),
        ("lstm.b_ih", (4 * h,)),
        ("lstm.b_hh", (4 * h,)),
        ("latent.0.weight", (h, z)),
        ("latent.0.bias", (z,)),
        ("latent.1.weight", (z, z)),
        ("latent.1.bias", (z,)),
        ("latent.2.weight", (z, z)),
        ("latent.2.bias", (z,)),
        ("dec.expand.weight", (z, n * d)),
        ("dec.expand.bias", (n * d,)),
    ]
    for q in range(cfg.depth_dec):
        shapes += _block_shapes(f"dec.{q}", cfg)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for _, s in param_shapes(cfg))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Truncated-normal(0.02) weights and positional table, zero biases and class token,
    unit layer-norm gains, +1 LSTM forget-gate bias."""
    rng = np.random.default_rng(seed)
    h = cfg.lstm_hidden
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith((".beta", ".bias")) or name in ("class_token", "lstm.b_ih", "lstm.b_hh"):
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, 0.02)
        if name == "lstm.b_ih":
            data[h : 2 * h] = 1.0
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _layer(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# patching


def patchify(x, cfg: ModelConfig):
    """``[.., C, T] -> [.., C * m, T / m]``; row ``i*m + j`` is patch j of channel i.

    A pure reshape. Works on arrays and tensors.
    """
    shape = x.shape
    if tuple(shape[-2:]) != (cfg.channels, cfg.samples):
        raise ShapeError(f"expected [..., {cfg.channels}, {cfg.samples}] window, got {tuple(shape)}")
    new_shape = tuple(shape[:-2]) + (cfg.tokens, cfg.patch_len)
    return nx.reshape(x, new_shape) if isinstance(x, Tensor) else np.reshape(x, new_shape)


def depatchify(xp, cfg: ModelConfig):
    shape = xp.shape
    if tuple(shape[-2:]) != (cfg.tokens, cfg.patch_len):
        raise ShapeError(f"expected [..., {cfg.tokens}, {cfg.patch_len}] tokens, got {tuple(shape)}")
    new_shape = tuple(shape[:-2]) + (cfg.channels, cfg.samples)
    return nx.reshape(xp, new_shape) if isinstance(xp, Tensor) else np.reshape(xp, new_shape)


def embed(xp, params: dict[str, Tensor]) -> Tensor:
    """Prepend the class token and add the positional table: ``[B, N, D] -> [B, N+1, D]``."""
    xp = nx.as_tensor(xp)
    b, _, d = xp.shape
    cls = nx.broadcast_to(params["class_token"], (b, 1, d))
    return nx.concat([cls, xp], axis=1) + params["pos_embedding"]


# ---------------------------------------------------------------------------
# transformer


def self_attention(
    x: Tensor, layer: dict[str, Tensor], cfg: ModelConfig, return_weights: bool = False
):
    """Multi-head scaled dot-product self-attention over ``[B, T, D]``."""
    b, t, _ = x.shape
    heads, dh = cfg.heads, cfg.head_dim
    qkv = nx.matmul(x, layer["attn.qkv"])  # [B, T, 3*H*dh]
    qkv = nx.transpose(nx.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]  # [B, H, T, dh]
    scores = nx.matmul(nx.scale(q, 1.0 / math.sqrt(dh)), nx.swapaxes(k, -1, -2))
    weights = nx.softmax_rows(scores)
    mixed = nx.matmul(weights, v)
    mixed = nx.reshape(nx.transpose(mixed, (0, 2, 1, 3)), (b, t, heads * dh))
    out = nx.matmul(mixed, layer["attn.proj"])
    return (out, weights) if return_weights else out


def feed_forward(
    x: Tensor, layer: dict[str, Tensor], cfg: ModelConfig, training: bool, rng
) -> Tensor:
    h = nx.gelu(nx.matmul(x, layer["mlp.fc1.weight"]) + layer["mlp.fc1.bias"])
    h = nx.dropout(h, cfg.dropout, rng, training)
    h = nx.matmul(h, layer["mlp.fc2.weight"]) + layer["mlp.fc2.bias"]
    return nx.dropout(h, cfg.dropout, rng, training)


def transformer_block(
    x: Tensor, layer: dict[str, Tensor], cfg: ModelConfig, training: bool = False, rng=None
) -> Tensor:
    """Pre-norm residual block: attention branch, then feed-forward branch."""
    eps = cfg.ln_eps
    x = x + self_attention(nx.layer_norm(x, layer["ln1.gamma"], layer["ln1.beta"], eps), layer, cfg)
    y = nx.layer_norm(x, layer["ln2.gamma"], layer["ln2.beta"], eps)
    return x + feed_forward(y, layer, cfg, training, rng)


# ---------------------------------------------------------------------------
# LSTM compression


def lstm_compress(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Run one LSTM layer from the last token back to the class token (row 0).

    Gates are laid out ``[i, f, g, o]`` along the 4H axis. Starts from zero
    hidden and cell state and returns the final cell state ``[B, H]``.
    """
    h_dim = cfg.lstm_hidden
    w_ih, w_hh = params["lstm.w_ih"], params["lstm.w_hh"]
    bias = params["lstm.b_ih"] + params["lstm.b_hh"]
    steps = x.shape[1]
    h = c = None
    for t in range(steps - 1, -1, -1):
        gates = nx.matmul(x[:, t, :], w_ih) + bias
        if h is not None:
            gates = gates + nx.matmul(h, w_hh)
        act = nx.sigmoid(gates)
        i_gate = act[:, :h_dim]
        f_gate = act[:, h_dim : 2 * h_dim]
        o_gate = act[:, 3 * h_dim :]
        g_gate = nx.tanh(gates[:, 2 * h_dim : 3 * h_dim])
        c = i_gate * g_gate if c is None else f_gate * c + i_gate * g_gate
        h = o_gate * nx.tanh(c)
    return c


# ---------------------------------------------------------------------------
# encoder / decoder


def _check_finite(t: Tensor, stage: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values after {stage}")


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    return x, False


def encode(
    x_corrupted,
    mask,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    training: bool = False,
    rng=None,
) -> tuple[Tensor, Tensor]:
    """Map corrupted windows to latents.

    Returns ``(latent [B, Z], class_row [B, D])`` where ``class_row`` is the
    class-token row after the encoder transformer stack, which the decoder
    reuses. A single ``[C, T]`` window is treated as a batch of one.
    """
    x, _ = _as_batch(x_corrupted)
    xp = patchify(x, cfg)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(x.shape[0], cfg.tokens)
        xp = np.where(mask[..., None], 0.0, xp)
    h = embed(xp, params)
    _check_finite(h, "embedding")
    for q in range(cfg.depth_enc):
        h = transformer_block(h, _layer(params, f"enc.{q}"), cfg, training, rng)
        _check_finite(h, f"encoder block {q}")
    class_row = h[:, 0, :]
    c = lstm_compress(h, params, cfg)
    _check_finite(c, "lstm compression")
    z = nx.gelu(nx.matmul(c, params["latent.0.weight"]) + params["latent.0.bias"])
    z = nx.gelu(nx.matmul(z, params["latent.1.weight"]) + params["latent.1.bias"])
    z = nx.matmul(z, params["latent.2.weight"]) + params["latent.2.bias"]
    _check_finite(z, "latent head")
    return z, class_row


def decode(
    z: Tensor,
    class_row: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Expand latents back to ``[B, C, T]`` windows."""
    z = nx.as_tensor(z)
    class_row = nx.as_tensor(class_row)
    if z.ndim == 1:
        z = nx.reshape(z, (1, -1))
    if class_row.ndim == 1:
        class_row = nx.reshape(class_row, (1, -1))
    b = z.shape[0]
    n, d = cfg.tokens, cfg.patch_len
    seq = nx.matmul(z, params["dec.expand.weight"]) + params["dec.expand.bias"]
    seq = nx.reshape(seq, (b, n, d))
    h = nx.concat([nx.reshape(class_row, (b, 1, d)), seq], axis=1)
    for q in range(cfg.depth_dec):
        h = transformer_block(h, _layer(params, f"dec.{q}"), cfg, training, rng)
    return depatchify(h[:, 1:, :], cfg)


def reconstruction_loss(x_recon: Tensor, x_clean) -> Tensor:
    """Mean squared error over every element (and batch member)."""
    return nx.mean(nx.square(x_recon - nx.as_tensor(x_clean)))


def forward_loss(
    x_clean,
    x_corrupted,
    mask,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    training: bool = False,
    rng=None,
) -> tuple[Tensor, Tensor]:
    z, cls = encode(x_corrupted, mask, params, cfg, training, rng)
    recon = decode(z, cls, params, cfg, training, rng)
    clean, _ = _as_batch(x_clean)
    return recon, reconstruction_loss(recon, clean)


def reconstruct(
    x_clean,
    spec: CorruptionSpec,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    training: bool = False,
    rng=None,
) -> tuple[np.ndarray, np.ndarray, Tensor]:
    """Corrupt ``x_clean`` per ``spec``, encode, decode, and score against the clean input.

    Returns ``(x_recon, mask, loss)``; the loss is a tensor so callers inside
    a :class:`~pae.numerics.Graph` can differentiate it.
    """
    clean, single = _as_batch(x_clean)
    corrupt_rng = spec.rng()
    x_corr, mask = corrupt(clean, spec.snr_db, spec.mask_ratio, cfg.patch_len, corrupt_rng)
    recon, loss = forward_loss(clean, x_corr, mask, params, cfg, training, rng)
    out = recon.data[0] if single else recon.data
    return out, (mask[0] if single else mask), loss


def encode_array(x, mask, params, cfg, batch_size: int = 32) -> np.ndarray:
    """Eval-mode latents for ``[B, C, T]`` data, in chunks, as a plain array."""
    x, _ = _as_batch(x)
    out = []
    for start in range(0, x.shape[0], batch_size):
        m = None if mask is None else mask[start : start + batch_size]
        z, _ = encode(x[start : start + batch_size], m, params, cfg, training=False)
        out.append(z.data)
    return np.concatenate(out, axis=0)


def reconstruct_array(x_corrupted, mask, params, cfg, batch_size: int = 32) -> np.ndarray:
    x, _ = _as_batch(x_corrupted)
    out = []
    for start in range(0, x.shape[0], batch_size):
        m = None if mask is None else mask[start : start + batch_size]
        z, cls = encode(x[start : start + batch_size], m, params, cfg)
        out.append(decode(z, cls, params, cfg).data)
    return np.concatenate(out, axis=0)


def reconstruction_metrics(x_clean, x_corrupted, mask, params, cfg, batch_size: int = 32) -> dict:
    """Eval-mode reconstruction errors against the clean windows.

    ``masked_mse`` scores only the zeroed patches and ``zero_fill_mse`` is what
    leaving them at zero would cost; ``recon_mse`` and ``corrupted_mse``
    compare whole windows.
    """
    clean, _ = _as_batch(x_clean)
    corr, _ = _as_batch(x_corrupted)
    mask = np.asarray(mask, dtype=bool).reshape(clean.shape[0], cfg.tokens)
    recon = reconstruct_array(corr, mask, params, cfg, batch_size)
    rp, cp = patchify(recon, cfg), patchify(clean, cfg)
    out = {
        "recon_mse": float(np.mean((recon - clean) ** 2)),
        "corrupted_mse": float(np.mean((corr - clean) ** 2)),
        "masked_patches": int(mask.sum()),
    }
    if mask.any():
        out["masked_mse"] = float(np.mean((rp[mask] - cp[mask]) ** 2))
        out["zero_fill_mse"] = float(np.mean(cp[mask] ** 2))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(params: dict[str, Tensor], cfg: ModelConfig) -> bytes:
    """Serialise: magic line, JSON header line, raw little-endian float64 payload."""
    names = [name for name, _ in param_shapes(cfg)]
    if sorted(names) != sorted(params):
        raise ContractError("parameter names do not match the model configuration")
    entries, offset, blobs = [], 0, []
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"tensor_name": name, "shape": list(arr.shape), "byte_offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": cfg.to_dict(),
        "tensors": entries,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _MAGIC + head + b"\n" + b"".join(blobs)


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params, cfg))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ContractError(f"{path}: not a checkpoint file")
    nl = raw.index(b"\n", len(_MAGIC))
    header = json.loads(raw[len(_MAGIC) : nl])
    if header.get("format_version") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
    cfg = ModelConfig.from_dict(header["model_config"])
    payload = memoryview(raw)[nl + 1 :]
    if len(payload) != header["payload_bytes"]:
        raise ContractError(f"{path}: truncated payload")
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = math.prod(shape)
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["byte_offset"])
        name = entry["tensor_name"]
        if name in params:
            raise ContractError(f"{path}: tensor {name} listed twice")
        params[name] = Tensor(arr.astype(np.float64).reshape(shape), requires_grad=True, name=name)
    expected = dict(param_shapes(cfg))
    if set(params) != set(expected) or any(params[k].shape != s for k, s in expected.items()):
        raise ContractError(f"{path}: tensor table does not match its model config")
    return params, cfg


def params_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
