"""Client update rules and server aggregation for the four FL algorithms.

* fedavg  - plain local SGD, server averages full parameter vectors weighted
            by client sample counts.
* fedprox - fedavg plus a proximal pull mu*(w - w_global) added to every
            batch gradient.
* fedper  - the representation block is shared and averaged; each client
            keeps its own classifier head across rounds.
* creff   - clients additionally report per-class head gradients at the
            frozen global model; the server maintains learnable per-class
            feature prototypes whose induced head gradients are optimized to
            match the averaged real ones, then re-trains the head on the
            balanced union of prototypes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError
from .nn import (
    ARCH_LINEAR,
    ModelConfig,
    ModelParams,
    TrainConfig,
    loss_and_grad,
    sgd_epochs,
    softmax,
)
from .seeding import rng_from

logger = logging.getLogger(__name__)

ALGO_FEDAVG = "fedavg"
ALGO_FEDPROX = "fedprox"
ALGO_FEDPER = "fedper"
ALGO_CREFF = "creff"
ALGORITHMS = (ALGO_FEDAVG, ALGO_FEDPROX, ALGO_FEDPER, ALGO_CREFF)


@dataclass(frozen=True)
class AlgoConfig:
    algorithm: str
    rounds: int
    participation_fraction: float = 1.0
    mu: float = 0.01
    ff_per_class: int = 100
    ff_steps: int = 100
    retrain_steps: int = 300
    ff_lr: float = 0.01
    retrain_lr: float = 0.1

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ValueError("participation_fraction must lie in (0, 1]")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.ff_per_class < 1 or self.ff_steps < 0 or self.retrain_steps < 0:
            raise ValueError("feature re-training knobs must be non-negative")


@dataclass
class ClientUpdate:
    client_id: int
    params: ModelParams
    n_k: int
    head_class_grads: dict[int, np.ndarray] | None = None


def local_update_fedavg(
    global_params: ModelParams,
    model_config: ModelConfig,
    shard_x: np.ndarray,
    shard_y: np.ndarray,
    train_config: TrainConfig,
    client_id: int = 0,
) -> ClientUpdate:
    """Local epochs of SGD from the global model; returns full parameters."""
    trained = sgd_epochs(global_params, model_config, train_config, shard_x, shard_y)
    return ClientUpdate(client_id=client_id, params=trained, n_k=shard_y.shape[0])


def local_update_fedprox(
    global_params: ModelParams,
    model_config: ModelConfig,
    shard_x: np.ndarray,
    shard_y: np.ndarray,
    train_config: TrainConfig,
    mu: float,
    client_id: int = 0,
) -> ClientUpdate:
    """FedAvg update with mu*(w - w_global) added to every batch gradient."""
    anchor = global_params.copy()

    def proximal_pull(w: ModelParams) -> ModelParams:
        return ModelParams(
            mu * (w.rep_block - anchor.rep_block),
            mu * (w.head_block - anchor.head_block),
        )

    trained = sgd_epochs(
        global_params, model_config, train_config, shard_x, shard_y,
        extra_grad_hook=proximal_pull,
    )
    return ClientUpdate(client_id=client_id, params=trained, n_k=shard_y.shape[0])


def local_update_fedper(
    global_params: ModelParams,
    local_head: np.ndarray,
    model_config: ModelConfig,
    shard_x: np.ndarray,
    shard_y: np.ndarray,
    train_config: TrainConfig,
    client_id: int = 0,
) -> ClientUpdate:
    """Train the shared representation together with the client's own head.

    The returned update carries the trained head only so the caller can
    persist it client-side; aggregation must use aggregate_rep_only.
    """
    start = ModelParams(global_params.rep_block.copy(), np.asarray(local_head, dtype=np.float64).copy())
    trained = sgd_epochs(start, model_config, train_config, shard_x, shard_y)
    return ClientUpdate(client_id=client_id, params=trained, n_k=shard_y.shape[0])


def aggregate_weighted(updates: list[ClientUpdate]) -> ModelParams:
    """Sample-count-weighted mean of client parameters, in client-id order."""
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(u.n_k for u in ordered)
    if total <= 0:
        raise ValueError("total sample count is zero")
    rep = np.zeros_like(ordered[0].params.rep_block)
    head = np.zeros_like(ordered[0].params.head_block)
    for u in ordered:
        weight = u.n_k / total
        rep += weight * u.params.rep_block
        head += weight * u.params.head_block
    return ModelParams(rep, head)


def aggregate_rep_only(updates: list[ClientUpdate], server_params: ModelParams) -> ModelParams:
    """Weighted mean of representation blocks; the server head is untouched."""
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(u.n_k for u in ordered)
    if total <= 0:
        raise ValueError("total sample count is zero")
    rep = np.zeros_like(server_params.rep_block)
    for u in ordered:
        rep += (u.n_k / total) * u.params.rep_block
    return ModelParams(rep, server_params.head_block.copy())


# ---------------------------------------------------------------------------
# CReFF: gradient-matched feature prototypes and head re-training
# ---------------------------------------------------------------------------

def creff_client_head_grads(
    global_params: ModelParams,
    model_config: ModelConfig,
    shard_x: np.ndarray,
    shard_y: np.ndarray,
) -> dict[int, np.ndarray]:
    """Per-class gradients of the head at the frozen global model.

    For every class present in the shard, the mean cross-entropy gradient of
    the head block over that class's samples (no weight decay). Absent
    classes are simply missing from the dict, never reported as zero.
    """
    grads: dict[int, np.ndarray] = {}
    for cls in np.unique(shard_y):
        sel = shard_y == cls
        _, grad = loss_and_grad(global_params, model_config, shard_x[sel], shard_y[sel])
        grads[int(cls)] = grad.head_block
    return grads


def head_gradient_on_features(
    features: np.ndarray, label: int, w: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Mean head gradient induced by a batch of same-label feature vectors."""
    logits = features @ w.T + b
    probs = softmax(logits)
    delta = probs
    delta[:, label] -= 1.0
    delta /= features.shape[0]
    return delta.T @ features, delta.sum(axis=0)


def matching_loss_and_grad(
    features: np.ndarray,
    label: int,
    w: np.ndarray,
    b: np.ndarray,
    target_w: np.ndarray,
    target_b: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Squared distance between induced and target head gradients, with dF.

    The induced gradient depends on the features both directly (outer
    product with the softmax error) and through the logits, so the feature
    gradient has two terms: U R / B plus the softmax backward of
    (F R^T + 1 r^T) / B mapped through W.
    """
    n = features.shape[0]
    logits = features @ w.T + b
    probs = softmax(logits)
    u = probs.copy()
    u[:, label] -= 1.0
    g_w = u.T @ features / n
    g_b = u.sum(axis=0) / n
    r_w = 2.0 * (g_w - target_w)
    r_b = 2.0 * (g_b - target_b)
    loss = float(((g_w - target_w) ** 2).sum() + ((g_b - target_b) ** 2).sum())

    direct = u @ r_w / n
    d_probs = (features @ r_w.T + r_b[None, :]) / n
    d_logits = probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))
    return loss, direct + d_logits @ w


def retrain_head(
    head_block: np.ndarray,
    features: np.ndarray,
    num_classes: int,
    learning_rate: float,
    steps: int,
) -> np.ndarray:
    """Full-batch gradient descent of the head on labeled feature prototypes.

    features is (M, per_class, feature_dim); every prototype carries its
    class label, so the training set is balanced by construction.
    """
    m, per_class, feat_dim = features.shape
    if m != num_classes:
        raise ValueError("feature prototypes must cover every class")
    flat_x = features.reshape(m * per_class, feat_dim)
    flat_y = np.repeat(np.arange(m, dtype=np.int64), per_class)
    head_cfg = ModelConfig(arch=ARCH_LINEAR, input_dim=feat_dim, num_classes=m)
    head = ModelParams(np.empty(0, dtype=np.float64), head_block.copy())
    for _ in range(steps):
        _, grad = loss_and_grad(head, head_cfg, flat_x, flat_y)
        head.head_block -= learning_rate * grad.head_block
    return head.head_block


class CreffServer:
    """Server-side state: persistent per-class feature prototypes.

    Prototypes start from a seeded Gaussian and are refined every round so
    the head gradient they induce matches the averaged real head gradients
    reported by clients; the head is then re-trained on their balanced union.
    """

    def __init__(self, model_config: ModelConfig, algo_config: AlgoConfig, seed: int) -> None:
        self.model_config = model_config
        self.algo_config = algo_config
        self.features = rng_from(seed).standard_normal(
            (model_config.num_classes, algo_config.ff_per_class, model_config.feature_dim)
        )

    def server_round(
        self, global_params: ModelParams, client_grads: list[dict[int, np.ndarray]]
    ) -> np.ndarray:
        """One aggregation step: match prototypes, then return a re-trained head."""
        cfg = self.model_config
        m, f = cfg.num_classes, cfg.feature_dim
        w = global_params.head_block[: m * f].reshape(m, f)
        b = global_params.head_block[m * f :]
        for cls in range(m):
            reported = [g[cls] for g in client_grads if cls in g]
            if not reported:
                logger.debug("no client reported class %d this round; prototypes kept", cls)
                continue
            mean_grad = np.mean(reported, axis=0)
            target_w = mean_grad[: m * f].reshape(m, f)
            target_b = mean_grad[m * f :]
            feats = self.features[cls]
            for step in range(self.algo_config.ff_steps):
                _, d_feats = matching_loss_and_grad(feats, cls, w, b, target_w, target_b)
                feats = feats - self.algo_config.ff_lr * d_feats
                if not np.isfinite(feats).all():
                    raise NonFiniteError(
                        f"feature optimization diverged for class {cls} at step {step}"
                    )
            self.features[cls] = feats
        return retrain_head(
            global_params.head_block,
            self.features,
            m,
            self.algo_config.retrain_lr,
            self.algo_config.retrain_steps,
        )
