"""Mini-batch Adagrad training of the surrogate network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, TrainingDivergedError
from .network import NetworkParameters, TrainingBatch, backward, zero_gradients

ADAGRAD_LR = 0.01
ADAGRAD_EPS = 1e-7


@dataclass
class OptimizerState:
    """Per-parameter squared-gradient accumulators."""

    accumulators: dict[str, np.ndarray]
    lr: float = ADAGRAD_LR
    eps: float = ADAGRAD_EPS

    @classmethod
    def fresh(
        cls, params: NetworkParameters, lr: float = ADAGRAD_LR, eps: float = ADAGRAD_EPS
    ) -> "OptimizerState":
        return cls(accumulators=zero_gradients(params), lr=lr, eps=eps)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            accumulators={k: v.copy() for k, v in self.accumulators.items()},
            lr=self.lr,
            eps=self.eps,
        )


def adagrad_step(
    params: NetworkParameters, grads: dict[str, np.ndarray], opt: OptimizerState
) -> None:
    """In-place update: acc += g^2; p -= lr * g / (sqrt(acc) + eps)."""
    for name, g in grads.items():
        acc = opt.accumulators[name]
        acc += g * g
        getattr(params, name)[...] -= opt.lr * g / (np.sqrt(acc) + opt.eps)


@dataclass
class TrainingDataset:
    """Flat sample arrays: inputs (T, m), targets (T, N_f, m), weights alike."""

    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def make_dataset(states: np.ndarray, weights: np.ndarray, n_lead: int) -> TrainingDataset:
    """Build (input, future targets, target-time weights) tuples from a series.

    ``states`` is the (T, m) analysis/interpolated field and ``weights`` the
    per-entry loss weights aligned with it; the weight applied to the residual
    at lead i is the weight at the target time k+i.
    """
    states = np.asarray(states, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if states.shape != weights.shape or states.ndim != 2:
        raise ContractViolation("states/weights must be matching (T, m) arrays")
    T = states.shape[0]
    if n_lead < 1 or T <= n_lead:
        raise ContractViolation(f"series of length {T} cannot supply lead {n_lead}")
    n = T - n_lead
    idx = np.arange(n)[:, None] + np.arange(1, n_lead + 1)[None, :]
    return TrainingDataset(
        inputs=states[:n],
        targets=states[idx],
        weights=weights[idx],
    )


def train(
    params: NetworkParameters,
    dataset: TrainingDataset,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    opt: OptimizerState | None = None,
) -> list[float]:
    """Shuffled mini-batch Adagrad; returns the mean batch loss per epoch.

    Batch-norm running statistics are updated by each train-mode forward.
    """
    if batch_size < 1:
        raise ContractViolation("batch_size must be positive")
    if dataset.weights.sum() == 0:
        raise ContractViolation("all loss weights are zero: vacuous training set")
    if opt is None:
        opt = OptimizerState.fresh(params)
    history: list[float] = []
    n = dataset.size
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            batch = TrainingBatch(
                inputs=dataset.inputs[sel],
                targets=dataset.targets[sel],
                weights=dataset.weights[sel],
            )
            value, grads = backward(params, batch, update_stats=True)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch start {start}"
                )
            adagrad_step(params, grads, opt)
            losses.append(value)
        history.append(float(np.mean(losses)))
    return history
