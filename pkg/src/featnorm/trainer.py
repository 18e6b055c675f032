"""Training regimes: plain source aggregation, feature-norm training, and
collaborative two-network feature-norm training, all with SGD + momentum.

One run is strictly sequential over its own tape; runs never share state, so
a harness may execute many of them in parallel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datagen import Scenario, make_batches
from .errors import ContractError
from .losses import LossValues, NormLossConfig, cfnn_total, fnn_total
from .network import ModelParams, NetworkSpec, forward_features, forward_logits, init_params, parameters

REGIMES = ("source_only", "fnn", "cfnn")

DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_MOMENTUM = 0.9
DEFAULT_GAMMA = 0.05
DEFAULT_DELTA_R = 1.0


@dataclass(frozen=True)
class TrainConfig:
    regime: str
    network_spec: NetworkSpec
    epochs: int
    batch_size: int
    seed: int
    learning_rate: float = DEFAULT_LEARNING_RATE
    momentum: float = DEFAULT_MOMENTUM
    gamma: float = DEFAULT_GAMMA
    delta_r: float = DEFAULT_DELTA_R

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ContractError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")
        if self.learning_rate <= 0.0:
            raise ContractError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.gamma < 0.0 or self.delta_r < 0.0:
            raise ContractError("gamma and delta_r must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")


@dataclass
class OptimizerState:
    """Momentum velocity buffers, one per parameter tensor."""

    velocities: list[np.ndarray]

    @staticmethod
    def zeros_like(params: list[ad.Tensor]) -> "OptimizerState":
        return OptimizerState([np.zeros_like(p.values) for p in params])


@dataclass
class TrainResult:
    final_params: ModelParams
    peer_params: ModelParams | None  # second network, cfnn only
    loss_history: list[LossValues]
    norm_trace: list[float]
    domain_sample_counts: dict[int, int] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.loss_history)


def sgd_momentum_step(
    params: list[ad.Tensor],
    grads: list[np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float,
) -> None:
    """In place: v <- momentum*v + g; theta <- theta - lr*v."""
    if len(grads) != len(params) or len(state.velocities) != len(params):
        raise ContractError("parameter, gradient, and velocity counts disagree")
    for p, g, v in zip(params, grads, state.velocities):
        if g.shape != p.values.shape or v.shape != p.values.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.values.shape}")
        v *= momentum
        v += g
        p.values -= lr * v


def _epoch_shuffle_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2**63)


def _mean_feature_norm(features: ad.Tensor) -> float:
    return float(np.mean(np.linalg.norm(features.values, axis=1)))


def _grad_for(param: ad.Tensor, grads: dict[int, np.ndarray], tape: ad.Tape) -> np.ndarray:
    if param._tape is tape and param.node_id is not None:
        return grads[param.node_id]
    return np.zeros_like(param.values)


def _count_batch(counts: dict[int, int], domain_indices: np.ndarray) -> None:
    for dom, n in zip(*np.unique(domain_indices, return_counts=True)):
        counts[int(dom)] = counts.get(int(dom), 0) + int(n)


def _train_single(scenario: Scenario, sources, cfg: TrainConfig, gamma: float) -> TrainResult:
    params = init_params(cfg.network_spec, cfg.seed)
    flat = parameters(params)
    state = OptimizerState.zeros_like(flat)
    norm_cfg = NormLossConfig(gamma=gamma, delta_r=cfg.delta_r)

    history: list[LossValues] = []
    trace: list[float] = []
    counts: dict[int, int] = {}
    for epoch in range(cfg.epochs):
        for batch in make_batches(scenario, sources, cfg.batch_size, _epoch_shuffle_seed(cfg.seed, epoch)):
            with ad.Tape() as tape:
                features = forward_features(params, batch.inputs)
                logits = forward_logits(params, features)
                terms = fnn_total(logits, batch.labels, features, norm_cfg)
            grads = ad.backward(terms.total, tape)
            trace.append(_mean_feature_norm(features))
            history.append(terms.as_values())
            _count_batch(counts, batch.domain_indices)
            sgd_momentum_step(
                flat, [_grad_for(p, grads, tape) for p in flat], state, cfg.learning_rate, cfg.momentum
            )
    return TrainResult(params, None, history, trace, counts)


def train_source_only(scenario: Scenario, sources, cfg: TrainConfig) -> TrainResult:
    """Pooled-source baseline: classification loss only."""
    if cfg.regime != "source_only":
        raise ContractError(f"config regime is {cfg.regime!r}, expected 'source_only'")
    return _train_single(scenario, sources, cfg, gamma=0.0)


def train_fnn(scenario: Scenario, sources, cfg: TrainConfig) -> TrainResult:
    """Classification plus feature-norm enlargement."""
    if cfg.regime != "fnn":
        raise ContractError(f"config regime is {cfg.regime!r}, expected 'fnn'")
    return _train_single(scenario, sources, cfg, gamma=cfg.gamma)


def train_cfnn(
    scenario: Scenario,
    sources,
    cfg: TrainConfig,
    init_seeds: tuple[int, int] | None = None,
) -> TrainResult:
    """Two networks from different seeds, coupled by detached mimicry, updated together.

    Network 1 is the reported model; loss_history and norm_trace record its
    terms. Both parameter sets are returned.
    """
    if cfg.regime != "cfnn":
        raise ContractError(f"config regime is {cfg.regime!r}, expected 'cfnn'")
    seed_1, seed_2 = init_seeds if init_seeds is not None else (cfg.seed, cfg.seed + 1)
    params_1 = init_params(cfg.network_spec, seed_1)
    params_2 = init_params(cfg.network_spec, seed_2)
    flat_1, flat_2 = parameters(params_1), parameters(params_2)
    state_1 = OptimizerState.zeros_like(flat_1)
    state_2 = OptimizerState.zeros_like(flat_2)
    norm_cfg = NormLossConfig(gamma=cfg.gamma, delta_r=cfg.delta_r)

    history: list[LossValues] = []
    trace: list[float] = []
    counts: dict[int, int] = {}
    for epoch in range(cfg.epochs):
        for batch in make_batches(scenario, sources, cfg.batch_size, _epoch_shuffle_seed(cfg.seed, epoch)):
            with ad.Tape() as tape_1:
                features_1 = forward_features(params_1, batch.inputs)
                logits_1 = forward_logits(params_1, features_1)
            with ad.Tape() as tape_2:
                features_2 = forward_features(params_2, batch.inputs)
                logits_2 = forward_logits(params_2, features_2)

            # Peer probabilities are consumed detached; computing them off-tape
            # keeps each network's graph self-contained.
            peer_for_1 = ad.softmax_rows(ad.constant(logits_2.values))
            peer_for_2 = ad.softmax_rows(ad.constant(logits_1.values))

            with tape_1:
                terms_1 = cfnn_total(logits_1, batch.labels, features_1, peer_for_1, norm_cfg)
            grads_1 = ad.backward(terms_1.total, tape_1)
            with tape_2:
                terms_2 = cfnn_total(logits_2, batch.labels, features_2, peer_for_2, norm_cfg)
            grads_2 = ad.backward(terms_2.total, tape_2)

            trace.append(_mean_feature_norm(features_1))
            history.append(terms_1.as_values())
            _count_batch(counts, batch.domain_indices)

            # both gradients are in hand before either network moves
            sgd_momentum_step(
                flat_1, [_grad_for(p, grads_1, tape_1) for p in flat_1], state_1, cfg.learning_rate, cfg.momentum
            )
            sgd_momentum_step(
                flat_2, [_grad_for(p, grads_2, tape_2) for p in flat_2], state_2, cfg.learning_rate, cfg.momentum
            )
    return TrainResult(params_1, params_2, history, trace, counts)


def train(scenario: Scenario, sources, cfg: TrainConfig, **kwargs) -> TrainResult:
    """Dispatch on cfg.regime."""
    if cfg.regime == "source_only":
        return train_source_only(scenario, sources, cfg)
    if cfg.regime == "fnn":
        return train_fnn(scenario, sources, cfg)
    return train_cfnn(scenario, sources, cfg, **kwargs)


def training_log_lines(result: TrainResult) -> list[str]:
    """One machine-parseable line per optimization step."""
    lines = []
    for step, (loss, norm) in enumerate(zip(result.loss_history, result.norm_trace)):
        lines.append(
            f"step={step} class_loss={loss.class_loss!r} domain_loss={loss.domain_loss!r} "
            f"mimicry_loss={loss.mimicry_loss!r} total={loss.total!r} mean_feature_norm={norm!r}"
        )
    return lines
