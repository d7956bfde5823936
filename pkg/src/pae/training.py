"""Curriculum training of the auto-encoder with Nesterov-accelerated Adam.

Each epoch walks the corruption schedule in order; for every stage all
training batches are visited once with freshly sampled noise and masks.
Randomness is derived from ``(seed, purpose, counter)`` so any step can be
replayed from a checkpoint.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .corruption import corrupt
from .errors import ConfigError, ContractError
from .model import ModelConfig, forward_loss, init_params, save_checkpoint
from .numerics import Tensor

log = logging.getLogger(__name__)

DEFAULT_SNR_ORDER = (20.0, 30.0, 40.0, 35.0, 35.0)
DEFAULT_MASK_ORDER = (0.40, 0.25, 0.10, 0.20, 0.20)

_STREAM_CORRUPT = 1
_STREAM_SHUFFLE = 2


@dataclass(frozen=True)
class CurriculumStage:
    snr_db: float
    mask_ratio: float


DEFAULT_SCHEDULE: tuple[CurriculumStage, ...] = tuple(
    CurriculumStage(s, m) for s, m in zip(DEFAULT_SNR_ORDER, DEFAULT_MASK_ORDER)
)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class NadamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum_decay: float = 4e-3


@dataclass
class OptimizerState:
    config: NadamConfig = field(default_factory=NadamConfig)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    mu_product: float = 1.0


def _mu(cfg: NadamConfig, t: int) -> float:
    return cfg.beta1 * (1.0 - 0.5 * 0.96 ** (t * cfg.momentum_decay))


def nadam_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """One Nadam update of every parameter from its ``.grad``; mutates in place.

    Momentum follows the warming schedule ``mu_t = beta1 * (1 - 0.5 * 0.96**(t*psi))``
    with bias correction by the running product of ``mu``.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"nadam_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    cfg = state.config
    state.t += 1
    t = state.t
    mu_t = _mu(cfg, t)
    mu_next = _mu(cfg, t + 1)
    state.mu_product *= mu_t
    mu_product_next = state.mu_product * mu_next
    bias2 = 1.0 - cfg.beta2**t
    coef_m = mu_next / (1.0 - mu_product_next)
    coef_g = (1.0 - mu_t) / (1.0 - state.mu_product)
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = coef_m * m + coef_g * g
        denom = np.sqrt(v / bias2) + cfg.eps
        p.data -= cfg.lr * m_hat / denom


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    dataset_dir: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: NadamConfig = field(default_factory=NadamConfig)
    schedule: tuple[CurriculumStage, ...] = DEFAULT_SCHEDULE
    batch_size: int = 16
    max_steps: int = 1000
    stop_unit: str = "step"
    checkpoint_every: int = 0
    seed: int = 0
    out_dir: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [[s.snr_db, s.mask_ratio] for s in self.schedule]
        return d

    @classmethod
    def from_dict(cls, raw: dict, require_paths: bool = False) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        kw = dict(raw)
        if require_paths:
            for name in ("dataset_dir", "out_dir"):
                if not kw.get(name):
                    raise ConfigError(name, "required")
        try:
            kw["model"] = ModelConfig.from_dict(kw.get("model", {}))
        except (TypeError, ValueError, ContractError) as exc:
            raise ConfigError("model", str(exc)) from None
        try:
            kw["optimizer"] = NadamConfig(**kw.get("optimizer", {}))
        except TypeError as exc:
            raise ConfigError("optimizer", str(exc)) from None
        if "schedule" in kw:
            try:
                kw["schedule"] = tuple(CurriculumStage(float(s), float(m)) for s, m in kw["schedule"])
            except (TypeError, ValueError):
                raise ConfigError("schedule", "expected a list of [snr_db, mask_ratio] pairs") from None
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.schedule:
            raise ConfigError("schedule", "must not be empty")
        for s in self.schedule:
            if not 0.0 <= s.mask_ratio < 1.0:
                raise ConfigError("schedule", f"mask ratio {s.mask_ratio} outside [0, 1)")
        for name in ("batch_size", "max_steps"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(name, "must be a positive integer")
        if not isinstance(self.checkpoint_every, int) or self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be a non-negative integer")
        if self.stop_unit not in ("step", "epoch"):
            raise ConfigError("stop_unit", "must be 'step' or 'epoch'")
        if not isinstance(self.seed, int):
            raise ConfigError("seed", "must be an integer")
        o = self.optimizer
        if not (o.lr > 0 and 0 <= o.beta1 < 1 and 0 <= o.beta2 < 1 and o.eps > 0):
            raise ConfigError("optimizer", "lr>0, 0<=beta<1 and eps>0 required")


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()), require_paths=True)


# ---------------------------------------------------------------------------
# loop


@dataclass
class StepRecord:
    step: int
    epoch: int
    stage: int
    batch: int
    snr_db: float
    mask_ratio: float
    loss: float


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ContractError("train log steps must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "epoch", "stage", "snr_db", "mask_ratio", "loss"])
            for r in self.records:
                w.writerow([r.step, r.epoch, r.stage, repr(r.snr_db), repr(r.mask_ratio), repr(r.loss)])
        return path


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Stream for the corruption and dropout draws of optimizer step ``step`` (1-based)."""
    return np.random.default_rng([seed, _STREAM_CORRUPT, step])


def batch_order(seed: int, epoch: int, stage: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, _STREAM_SHUFFLE, epoch, stage]).permutation(n)


def batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[i : i + batch_size] for i in range(0, order.size, batch_size)]


def step_loss(
    x_batch: np.ndarray,
    stage: CurriculumStage,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    rng: np.random.Generator,
    training: bool = True,
) -> tuple[nx.Graph, Tensor]:
    """Corrupt a clean batch, run the auto-encoder, return ``(graph, loss)``."""
    x_corr, mask = corrupt(x_batch, stage.snr_db, stage.mask_ratio, cfg.patch_len, rng)
    with nx.Graph() as graph:
        _, loss = forward_loss(x_batch, x_corr, mask, params, cfg, training, rng)
    return graph, loss


def run_epoch(
    x_train: np.ndarray,
    schedule,
    batch_size: int,
    params: dict[str, Tensor],
    state: OptimizerState,
    cfg: ModelConfig,
    seed: int,
    epoch: int,
    max_steps: int | None = None,
    train_log: TrainLog | None = None,
    on_step=None,
) -> list[StepRecord]:
    """One pass over the schedule; every stage visits all training batches.

    Stops early once ``state.t`` reaches ``max_steps``. ``on_step(state)`` is
    called after each optimizer update.
    """
    if len(schedule) == 0:
        raise ContractError("schedule must not be empty")
    if x_train.shape[0] == 0:
        raise ContractError("empty training split")
    records = []
    for stage_idx, stage in enumerate(schedule):
        order = batch_order(seed, epoch, stage_idx, x_train.shape[0])
        for b_idx, idx in enumerate(batches(order, batch_size)):
            if max_steps is not None and state.t >= max_steps:
                return records
            step = state.t + 1
            graph, loss = step_loss(x_train[idx], stage, params, cfg, step_rng(seed, step))
            nx.zero_grad(params)
            nx.backward(graph, loss)
            nadam_step(params, state)
            rec = StepRecord(step, epoch, stage_idx, b_idx, stage.snr_db, stage.mask_ratio, loss.item())
            records.append(rec)
            if train_log is not None:
                train_log.append(rec)
            if on_step is not None:
                on_step(state)
    return records


def replay_loss(
    x_train: np.ndarray,
    record: StepRecord,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    schedule,
    batch_size: int,
    seed: int,
) -> float:
    """Recompute the loss logged for ``record`` from the parameters held before that step."""
    order = batch_order(seed, record.epoch, record.stage, x_train.shape[0])
    idx = batches(order, batch_size)[record.batch]
    stage = schedule[record.stage]
    rng = step_rng(seed, record.step)
    x_corr, mask = corrupt(x_train[idx], stage.snr_db, stage.mask_ratio, cfg.patch_len, rng)
    _, loss = forward_loss(x_train[idx], x_corr, mask, params, cfg, True, rng)
    return loss.item()


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: TrainLog
    state: OptimizerState
    checkpoints: list[Path]


def train(
    config: TrainConfig,
    x_train: np.ndarray,
    params: dict[str, Tensor] | None = None,
    out_dir=None,
) -> TrainResult:
    """Train until ``max_steps`` optimizer steps (or epochs, per ``stop_unit``).

    ``x_train`` holds normalized clean windows ``[n, C, T]``. When ``out_dir``
    is given, periodic checkpoints ``ckpt_step{t}.pae``, ``final.pae`` and
    ``train_log.csv`` are written there.
    """
    config.validate()
    cfg = config.model
    if params is None:
        params = init_params(cfg, config.seed)
    state = OptimizerState(config.optimizer)
    train_log = TrainLog()
    checkpoints: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def on_step(st: OptimizerState) -> None:
        if st.t % 50 == 0:
            log.info("step %d loss %.5f", st.t, train_log.records[-1].loss)
        if out is not None and config.checkpoint_every and st.t % config.checkpoint_every == 0:
            checkpoints.append(save_checkpoint(out / f"ckpt_step{st.t:06d}.pae", params, cfg))

    step_limit = config.max_steps if config.stop_unit == "step" else None
    epoch = 0
    while True:
        if config.stop_unit == "epoch" and epoch >= config.max_steps:
            break
        if step_limit is not None and state.t >= step_limit:
            break
        run_epoch(
            x_train, config.schedule, config.batch_size, params, state, cfg,
            config.seed, epoch, step_limit, train_log, on_step,
        )
        epoch += 1

    if out is not None:
        checkpoints.append(save_checkpoint(out / "final.pae", params, cfg))
        train_log.write_csv(out / "train_log.csv")
    return TrainResult(params, train_log, state, checkpoints)


def smoothed(losses: np.ndarray, window: int = 20) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < window:
        return np.array([losses.mean()]) if losses.size else losses
    kernel = np.ones(window) / window
    return np.convolve(losses, kernel, mode="valid")


def steps_per_epoch(n_train: int, batch_size: int, n_stages: int) -> int:
    return n_stages * math.ceil(n_train / batch_size)
