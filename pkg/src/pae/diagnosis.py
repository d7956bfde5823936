"""Break-location classification and break-size regression on top of features.

A shared MLP trunk (three hidden layers) feeds two output branches: two
location logits and one normalized size. Trained with a weighted sum of
summed cross-entropy and summed squared error. The same head is used on
encoder latents (two-stage) and on flattened corrupted windows (end-to-end).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datagen import SIZE_MAX_CM
from .errors import ContractError, MetricError, ParameterError, ShapeError
from .numerics import Tensor
from .training import NadamConfig, OptimizerState, nadam_step

N_CLASSES = 2
CLASS_NAMES = ("cold", "hot")
DEFAULT_HIDDEN = (128, 64, 32)


# ---------------------------------------------------------------------------
# losses and metrics


def one_hot(labels, n_classes: int = N_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, targets) -> Tensor:
    """Softmax cross-entropy summed over the batch; ``targets`` are one-hot rows."""
    targets = np.asarray(targets, dtype=np.float64)
    logp = nx.log_softmax_rows(logits)
    return nx.scale(nx.sum(nx.mul(logp, targets)), -1.0)


def squared_error(pred, target) -> Tensor:
    """Summed squared error."""
    return nx.sum(nx.square(nx.sub(pred, np.asarray(target, dtype=np.float64))))


def joint_loss(cls_loss, reg_loss, alpha: float = 0.5):
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(cls_loss, Tensor) or isinstance(reg_loss, Tensor):
        return nx.add(nx.scale(cls_loss, alpha), nx.scale(reg_loss, 1.0 - alpha))
    return alpha * cls_loss + (1.0 - alpha) * reg_loss


def confusion_matrix(truth, pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(truth, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def precision_per_class(confusion) -> np.ndarray:
    cm = np.asarray(confusion, dtype=np.float64)
    predicted = cm.sum(axis=0)
    return np.divide(np.diag(cm), predicted, out=np.zeros(len(cm)), where=predicted > 0)


def macro_f1(confusion) -> float:
    """Unweighted mean of per-class F1; a class with zero precision+recall scores 0."""
    cm = np.asarray(confusion, dtype=np.float64)
    support = cm.sum(axis=1)
    for c, n in enumerate(support):
        if n == 0:
            name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
            raise MetricError(f"macro_f1: class {name!r} has no samples")
    tp = np.diag(cm)
    precision = np.divide(tp, cm.sum(axis=0), out=np.zeros(len(cm)), where=cm.sum(axis=0) > 0)
    recall = tp / support
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(len(cm)), where=denom > 0)
    return float(f1.mean())


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size != truth.size:
        raise ShapeError(f"rmse: length mismatch {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise MetricError("rmse: empty input")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


@dataclass
class EvalReport:
    cold_precision: float
    hot_precision: float
    macro_f1: float
    rmse_cm: float
    confusion: list[list[int]]
    mode: str
    corruption: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


def make_report(truth_loc, pred_loc, truth_size, pred_size, mode: str, corruption=None) -> EvalReport:
    cm = confusion_matrix(truth_loc, pred_loc)
    prec = precision_per_class(cm)
    return EvalReport(
        cold_precision=float(prec[0]),
        hot_precision=float(prec[1]),
        macro_f1=macro_f1(cm),
        rmse_cm=rmse(pred_size, truth_size),
        confusion=cm.tolist(),
        mode=mode,
        corruption=dict(corruption or {}),
    )


# ---------------------------------------------------------------------------
# MLP head


@dataclass
class DiagnosisHead:
    params: dict[str, Tensor]
    in_mean: np.ndarray
    in_std: np.ndarray
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    dropout: float = 0.1

    @property
    def input_dim(self) -> int:
        return self.in_mean.size

    def forward(self, x, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        """Return ``(logits [B, 2], normalized size [B])``."""
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"head expects {self.input_dim} features, got {x.shape[1]}")
        h = nx.Tensor((x - self.in_mean) / self.in_std)
        for i in range(len(self.hidden)):
            h = nx.gelu(nx.matmul(h, self.params[f"hidden.{i}.weight"]) + self.params[f"hidden.{i}.bias"])
            h = nx.dropout(h, self.dropout, rng, training)
        logits = nx.matmul(h, self.params["cls.weight"]) + self.params["cls.bias"]
        size = nx.matmul(h, self.params["reg.weight"]) + self.params["reg.bias"]
        return logits, nx.reshape(size, (-1,))

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Predicted location indices and break sizes in cm."""
        logits, size = self.forward(x)
        return logits.data.argmax(axis=1), size.data * SIZE_MAX_CM


def init_head(input_dim: int, hidden=DEFAULT_HIDDEN, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    widths = (input_dim,) + tuple(hidden)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"hidden.{i}.weight"] = Tensor(rng.standard_normal((a, b)) * np.sqrt(2.0 / (a + b)), True)
        params[f"hidden.{i}.bias"] = Tensor(np.zeros(b), True)
    last = widths[-1]
    params["cls.weight"] = Tensor(rng.standard_normal((last, N_CLASSES)) * np.sqrt(2.0 / (last + N_CLASSES)), True)
    params["cls.bias"] = Tensor(np.zeros(N_CLASSES), True)
    params["reg.weight"] = Tensor(rng.standard_normal((last, 1)) * np.sqrt(2.0 / (last + 1)), True)
    params["reg.bias"] = Tensor(np.zeros(1), True)
    for name, p in params.items():
        p.name = name
    return params


def train_heads(
    features,
    locations,
    sizes_cm,
    alpha: float = 0.5,
    optimizer: NadamConfig | None = None,
    iterations: int = 256,
    seed: int = 0,
    hidden=DEFAULT_HIDDEN,
    dropout: float = 0.1,
) -> DiagnosisHead:
    """Full-batch joint training of the classification and regression branches.

    Sizes are regressed as ``size_cm / 35.5``.
    """
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(len(x), -1)
    locations = np.asarray(locations, dtype=int)
    if np.unique(locations).size < N_CLASSES:
        raise ContractError("train_heads: training set contains a single break location")
    targets = one_hot(locations)
    size_target = np.asarray(sizes_cm, dtype=np.float64) / SIZE_MAX_CM
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-8)
    head = DiagnosisHead(init_head(x.shape[1], hidden, seed), mean, std, tuple(hidden), dropout)
    state = OptimizerState(optimizer or NadamConfig())
    rng = np.random.default_rng([seed, 3])
    for _ in range(iterations):
        with nx.Graph() as graph:
            logits, size = head.forward(x, training=True, rng=rng)
            loss = joint_loss(cross_entropy(logits, targets), squared_error(size, size_target), alpha)
        nx.zero_grad(head.params)
        nx.backward(graph, loss)
        nadam_step(head.params, state)
    return head


def evaluate_head(head: DiagnosisHead, features, locations, sizes_cm, mode: str, corruption=None) -> EvalReport:
    pred_loc, pred_size = head.predict(features)
    return make_report(locations, pred_loc, sizes_cm, pred_size, mode, corruption)


# ---------------------------------------------------------------------------
# baselines


def knn_predict(train_x, train_loc, train_size, query, k: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean k-NN: majority location (ties to the smaller index) and mean size."""
    train_x = np.asarray(train_x, dtype=np.float64).reshape(len(train_x), -1)
    query = np.asarray(query, dtype=np.float64)
    single = query.ndim == 1
    query = query.reshape(1, -1) if single else query.reshape(len(query), -1)
    if not 1 <= k <= train_x.shape[0]:
        raise ParameterError(f"k={k} must lie in [1, {train_x.shape[0]}]")
    train_loc = np.asarray(train_loc, dtype=int)
    train_size = np.asarray(train_size, dtype=np.float64)
    d2 = (
        np.sum(query**2, axis=1)[:, None]
        - 2.0 * query @ train_x.T
        + np.sum(train_x**2, axis=1)[None, :]
    )
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    votes = np.stack([np.bincount(train_loc[row], minlength=N_CLASSES) for row in nearest])
    loc = votes.argmax(axis=1)  # argmax returns the first maximum, i.e. the smaller index
    size = train_size[nearest].mean(axis=1)
    return (loc[0], size[0]) if single else (loc, size)


def two_stage_report(
    train_latents, train_loc, train_size, test_latents, test_loc, test_size,
    corruption=None, seed: int = 0, iterations: int = 256, alpha: float = 0.5,
) -> EvalReport:
    head = train_heads(train_latents, train_loc, train_size, alpha=alpha, iterations=iterations, seed=seed)
    return evaluate_head(head, test_latents, test_loc, test_size, "two_stage", corruption)


def end_to_end_baseline(
    train_raw, train_loc, train_size, test_raw, test_loc, test_size,
    corruption=None, seed: int = 0, iterations: int = 256, alpha: float = 0.5,
) -> EvalReport:
    """Same head trained directly on flattened corrupted windows."""
    train_flat = np.asarray(train_raw, dtype=np.float64).reshape(len(train_raw), -1)
    test_flat = np.asarray(test_raw, dtype=np.float64).reshape(len(test_raw), -1)
    head = train_heads(train_flat, train_loc, train_size, alpha=alpha, iterations=iterations, seed=seed)
    return evaluate_head(head, test_flat, test_loc, test_size, "end_to_end", corruption)
