"""Binary cross-entropy, Adam and the full-graph training loop."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .cohort import Cohort
from .errors import ContractError, NumericalError, ParameterError
from .metrics import accuracy, auc
from .model import ModelInputs, MustConfig, ParameterStore, init_parameters, must_forward, prepare_inputs
from .tensor import Tensor


def bce_loss(logits: Tensor, labels, mask=None, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy on logits over the included admissions.

    ``mask`` is a boolean vector or an index array; ``pos_weight`` scales the
    positive-class term. Uses ``softplus(z) - y z`` so large logits never
    overflow.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if logits.shape != y.shape:
        raise ContractError(f"logits {logits.shape} and labels {y.shape} differ")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("labels must be 0 or 1")
    if mask is None:
        idx = np.arange(len(y))
    else:
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(int)
    if idx.size == 0:
        raise ContractError("bce_loss: no admissions included")
    z = logits if mask is None else T.getitem(logits, idx)
    ys = y[idx]
    # positives: w * softplus(-z) = w * (softplus(z) - z); negatives: softplus(z)
    c_sp = 1.0 + (pos_weight - 1.0) * ys
    c_z = pos_weight * ys
    per = T.mul(T.softplus(z), Tensor(c_sp)) - T.mul(z, Tensor(c_z))
    return T.mean(per)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState) -> None:
    """Bias-corrected Adam update of every parameter, then clear the gradients."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.lr != 0.0:
            p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.zero_grad()


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int | None = 30  # None trains every epoch
    pos_weight: float = 1.0
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ParameterError(f"lr must be non-negative, got {self.lr}")
        if self.patience is not None and self.patience < 1:
            raise ParameterError(f"patience must be >= 1 or null, got {self.patience}")
        if self.precision not in ("float32", "float64"):
            raise ParameterError(f"precision must be float32 or float64, got {self.precision!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ParameterError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ParameterStore
    history: list[dict]
    best_epoch: int
    best_val_auc: float
    seconds: float = 0.0

    def write_history(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def predict(inputs: ModelInputs, cfg: MustConfig, params: ParameterStore) -> np.ndarray:
    """Inference probabilities for every node."""
    with T.no_grad():
        return T.sigmoid(must_forward(inputs, cfg, params, training=False).data).astype(np.float64)


def _split_mask(inputs: ModelInputs, split: str) -> np.ndarray:
    idx = np.flatnonzero(inputs.splits == split)
    if idx.size == 0:
        raise ContractError(f"cohort has no {split!r} admissions")
    return idx


def train(data, cfg: MustConfig, tcfg: TrainConfig, params: ParameterStore | None = None,
          provider=None, log=None) -> TrainResult:
    """Full-graph training with the loss on train nodes only.

    ``data`` is a :class:`Cohort` or prepared :class:`ModelInputs`. After the
    last epoch the parameters hold the best-validation-AUC snapshot.
    """
    start = time.perf_counter()
    with T.precision(tcfg.precision):
        inputs = prepare_inputs(data, cfg, provider) if isinstance(data, Cohort) else data
        train_idx = _split_mask(inputs, "train")
        val_idx = _split_mask(inputs, "val")
        if params is None:
            params = init_parameters(cfg, inputs.raw_dims())
        else:
            for t in params.tensors.values():
                t.data = t.data.astype(T.get_dtype())
        state = AdamState(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
        rng = np.random.default_rng(tcfg.seed)
        history: list[dict] = []
        best = (-np.inf, 0, params.snapshot())
        since_best = 0
        for epoch in range(1, tcfg.epochs + 1):
            params.zero_grad()
            logits = must_forward(inputs, cfg, params, training=True, rng=rng)
            loss = bce_loss(logits, inputs.labels, train_idx, tcfg.pos_weight)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"training loss is {loss.item()} at epoch {epoch}", checkpoint=best[2])
            loss.backward()
            try:
                adam_step(params, state)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}", checkpoint=best[2]) from None
            probs = predict(inputs, cfg, params)
            if not np.isfinite(probs).all():
                raise NumericalError(f"non-finite predictions at epoch {epoch}", checkpoint=best[2])
            row = {"epoch": epoch, "train_loss": float(loss.item()),
                   "val_auc": auc(probs[val_idx], inputs.labels[val_idx]),
                   "val_acc": accuracy(probs[val_idx], inputs.labels[val_idx])}
            history.append(row)
            if log is not None:
                log(row)
            if row["val_auc"] > best[0]:
                best = (row["val_auc"], epoch, params.snapshot())
                since_best = 0
            else:
                since_best += 1
                if tcfg.patience is not None and since_best >= tcfg.patience:
                    break
        params.restore(best[2])
    return TrainResult(params, history, best[1], float(best[0]), time.perf_counter() - start)
