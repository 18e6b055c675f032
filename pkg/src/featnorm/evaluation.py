"""Domain-generalization evaluation protocols.

Leave-one-domain-out accuracy, category-shift experiments with degraded
accuracy and transfer gain, residual-norm-step sensitivity sweeps, and
embedding export. Every number in a report is a pure function of the
scenario, the seeds, and the hyperparameters; reports render to a flat CSV
(the contract for downstream checks) and a nested JSON document.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datagen import Scenario, apply_category_shift
from .errors import ConfigurationError, ContractError
from .network import ModelParams, NetworkSpec, forward_features, forward_logits
from .trainer import (
    DEFAULT_DELTA_R,
    DEFAULT_GAMMA,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MOMENTUM,
    REGIMES,
    TrainConfig,
    TrainResult,
    train,
)

DEFAULT_EPOCHS = 80
DEFAULT_BATCH_SIZE = 30
DEFAULT_SEEDS = (1, 2, 3, 4, 5)
DEFAULT_DELTA_R_SWEEP = (0.5, 1.0, 1.5)
DEFAULT_FEATURE_DIM = 64
DEFAULT_CATEGORY_SHIFT = {0: frozenset({0, 1}), 1: frozenset({2, 3}), 2: frozenset({4, 0})}

CSV_COLUMNS = (
    "experiment_id",
    "regime",
    "seed",
    "target_domain",
    "category_shift_flag",
    "delta_r",
    "accuracy",
    "degraded_accuracy",
    "transfer_gain",
)


def default_network_spec(scenario: Scenario) -> NetworkSpec:
    """Single linear feature layer, wide feature space.

    A linear extractor keeps feature-norm growth additive (hidden relu layers
    compound it multiplicatively, which eventually destabilizes training), and
    the wide feature layer shrinks the head's init scale enough that the early
    classification transient does not mask norm growth.
    """
    return NetworkSpec(
        input_dim=scenario.input_dim,
        hidden_dims=(),
        feature_dim=DEFAULT_FEATURE_DIM,
        num_classes=scenario.num_classes,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario
    target_domain_index: int
    network_spec: NetworkSpec
    regimes: tuple[str, ...] = REGIMES
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    momentum: float = DEFAULT_MOMENTUM
    gamma: float = DEFAULT_GAMMA
    delta_r: float = DEFAULT_DELTA_R
    category_shift: dict | None = None
    delta_r_values: tuple[float, ...] | None = None
    experiment_id: str = "experiment"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")
        if not self.regimes:
            raise ConfigurationError("regimes must be nonempty")
        for regime in self.regimes:
            if regime not in REGIMES:
                raise ConfigurationError(f"unknown regime {regime!r}, expected one of {REGIMES}")
        if not 0 <= self.target_domain_index < self.scenario.num_domains:
            raise ConfigurationError(
                f"target domain {self.target_domain_index} outside "
                f"[0, {self.scenario.num_domains})"
            )
        n_sources = self.scenario.num_domains - 1
        if n_sources < 1:
            raise ConfigurationError("need at least one source domain besides the target")
        if self.batch_size % n_sources != 0:
            raise ConfigurationError(
                f"batch_size {self.batch_size} not divisible by {n_sources} source domains"
            )

    def sources(self) -> tuple[int, ...]:
        return tuple(d for d in range(self.scenario.num_domains) if d != self.target_domain_index)


@dataclass(frozen=True)
class RunRecord:
    experiment_id: str
    regime: str
    seed: int
    target_domain: int
    category_shift: bool
    delta_r: float
    accuracy: float
    degraded_accuracy: float | None = None
    transfer_gain: float | None = None


@dataclass
class MetricsReport:
    experiment_id: str
    records: list[RunRecord]
    target_samples_consumed: int = 0

    def accuracies(
        self, regime: str, *, category_shift: bool = False, delta_r: float | None = None
    ) -> list[float]:
        return [
            r.accuracy
            for r in self.records
            if r.regime == regime
            and r.category_shift == category_shift
            and (delta_r is None or r.delta_r == delta_r)
        ]

    def mean_accuracy(self, regime: str, **kwargs) -> float:
        return float(np.mean(self.accuracies(regime, **kwargs)))

    def std_accuracy(self, regime: str, **kwargs) -> float:
        return float(np.std(self.accuracies(regime, **kwargs)))

    def mean_transfer_gain(self, regime: str) -> float:
        gains = [r.transfer_gain for r in self.records if r.regime == regime and r.transfer_gain is not None]
        return float(np.mean(gains))

    def mean_degraded_accuracy(self, regime: str) -> float:
        values = [
            r.degraded_accuracy for r in self.records if r.regime == regime and r.degraded_accuracy is not None
        ]
        return float(np.mean(values))

    def _summary_rows(self) -> list[dict]:
        seen: list[tuple[str, bool, float]] = []
        for r in self.records:
            key = (r.regime, r.category_shift, r.delta_r)
            if key not in seen:
                seen.append(key)
        rows = []
        for regime, shift, delta_r in seen:
            group = [
                r
                for r in self.records
                if (r.regime, r.category_shift, r.delta_r) == (regime, shift, delta_r)
            ]
            accs = [r.accuracy for r in group]
            gains = [r.transfer_gain for r in group if r.transfer_gain is not None]
            degraded = [r.degraded_accuracy for r in group if r.degraded_accuracy is not None]
            rows.append(
                {
                    "regime": regime,
                    "category_shift": shift,
                    "delta_r": delta_r,
                    "n_seeds": len(group),
                    "mean_accuracy": float(np.mean(accs)),
                    "std_accuracy": float(np.std(accs)),
                    "mean_degraded_accuracy": float(np.mean(degraded)) if degraded else None,
                    "mean_transfer_gain": float(np.mean(gains)) if gains else None,
                }
            )
        return rows

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.records:
            lines.append(
                ",".join(
                    [
                        r.experiment_id,
                        r.regime,
                        str(r.seed),
                        str(r.target_domain),
                        "1" if r.category_shift else "0",
                        repr(r.delta_r),
                        repr(r.accuracy),
                        "" if r.degraded_accuracy is None else repr(r.degraded_accuracy),
                        "" if r.transfer_gain is None else repr(r.transfer_gain),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def to_json_text(self) -> str:
        doc = {
            "experiment_id": self.experiment_id,
            "target_samples_consumed": self.target_samples_consumed,
            "runs": [
                {
                    "regime": r.regime,
                    "seed": r.seed,
                    "target_domain": r.target_domain,
                    "category_shift": r.category_shift,
                    "delta_r": r.delta_r,
                    "accuracy": r.accuracy,
                    "degraded_accuracy": r.degraded_accuracy,
                    "transfer_gain": r.transfer_gain,
                }
                for r in self.records
            ],
            "summary": self._summary_rows(),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def evaluate_accuracy(params: ModelParams, scenario: Scenario, target_domain_index: int) -> float:
    """Argmax accuracy on the target domain; ties go to the lowest class index."""
    mask = scenario.domain_mask(target_domain_index)
    if not mask.any():
        raise ContractError(f"target domain {target_domain_index} has no samples")
    inputs = ad.constant(scenario.features[mask])
    logits = forward_logits(params, forward_features(params, inputs))
    predictions = np.argmax(logits.values, axis=1)
    labels = scenario.labels[mask]
    return float(np.count_nonzero(predictions == labels)) / float(labels.size)


def _cell_config(cfg: ExperimentConfig, regime: str, seed: int, delta_r: float | None = None) -> TrainConfig:
    return TrainConfig(
        regime=regime,
        network_spec=cfg.network_spec,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=seed,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        gamma=cfg.gamma,
        delta_r=cfg.delta_r if delta_r is None else delta_r,
    )


def _run_cell(
    cfg: ExperimentConfig, scenario: Scenario, regime: str, seed: int, delta_r: float | None = None
) -> tuple[TrainResult, float, int]:
    """Train one cell and audit it: returns the trained result, its target
    accuracy, and the number of target samples the training loop consumed
    (counted from the actual batches; anything above zero is a protocol
    violation and raises)."""
    result = train(scenario, cfg.sources(), _cell_config(cfg, regime, seed, delta_r))
    touched = result.domain_sample_counts.get(cfg.target_domain_index, 0)
    if touched:
        raise ContractError(f"target domain leaked into training: {touched} samples consumed")
    accuracy = evaluate_accuracy(result.final_params, scenario, cfg.target_domain_index)
    return result, accuracy, touched


def run_dg_experiment(cfg: ExperimentConfig) -> MetricsReport:
    """Leave-one-domain-out: train each regime x seed on the sources, test on the target."""
    records = []
    consumed = 0
    for regime in cfg.regimes:
        for seed in cfg.seeds:
            _, accuracy, touched = _run_cell(cfg, cfg.scenario, regime, seed)
            consumed += touched
            records.append(
                RunRecord(
                    experiment_id=cfg.experiment_id,
                    regime=regime,
                    seed=seed,
                    target_domain=cfg.target_domain_index,
                    category_shift=False,
                    delta_r=cfg.delta_r,
                    accuracy=accuracy,
                )
            )
    return MetricsReport(cfg.experiment_id, records, target_samples_consumed=consumed)


def run_category_shift_experiment(cfg: ExperimentConfig) -> MetricsReport:
    """Each regime under full-label and category-shift sources.

    Per seed: degraded accuracy is the same regime's shift-minus-full
    accuracy; transfer gain is the regime's shift accuracy minus the
    source_only baseline's shift accuracy (zero for source_only itself,
    by definition). source_only always runs, anchoring the gains.
    """
    if not cfg.category_shift:
        raise ConfigurationError("category-shift experiment needs a nonempty removal map")
    shifted = apply_category_shift(cfg.scenario, cfg.category_shift, cfg.target_domain_index)

    regimes = cfg.regimes if "source_only" in cfg.regimes else ("source_only", *cfg.regimes)
    full_acc: dict[tuple[str, int], float] = {}
    shift_acc: dict[tuple[str, int], float] = {}
    consumed = 0
    for regime in regimes:
        for seed in cfg.seeds:
            _, full_acc[(regime, seed)], touched_full = _run_cell(cfg, cfg.scenario, regime, seed)
            _, shift_acc[(regime, seed)], touched_shift = _run_cell(cfg, shifted, regime, seed)
            consumed += touched_full + touched_shift

    records = []
    for regime in regimes:
        for seed in cfg.seeds:
            records.append(
                RunRecord(
                    experiment_id=cfg.experiment_id,
                    regime=regime,
                    seed=seed,
                    target_domain=cfg.target_domain_index,
                    category_shift=False,
                    delta_r=cfg.delta_r,
                    accuracy=full_acc[(regime, seed)],
                )
            )
            records.append(
                RunRecord(
                    experiment_id=cfg.experiment_id,
                    regime=regime,
                    seed=seed,
                    target_domain=cfg.target_domain_index,
                    category_shift=True,
                    delta_r=cfg.delta_r,
                    accuracy=shift_acc[(regime, seed)],
                    degraded_accuracy=shift_acc[(regime, seed)] - full_acc[(regime, seed)],
                    transfer_gain=shift_acc[(regime, seed)] - shift_acc[("source_only", seed)],
                )
            )
    return MetricsReport(cfg.experiment_id, records, target_samples_consumed=consumed)


def run_sensitivity_sweep(cfg: ExperimentConfig) -> MetricsReport:
    """One full leave-one-out experiment per residual-step value, shared seeds."""
    if cfg.delta_r_values is None or len(cfg.delta_r_values) < 2:
        raise ConfigurationError("sweep needs at least two delta_r values")
    records = []
    consumed = 0
    for delta_r in cfg.delta_r_values:
        for regime in cfg.regimes:
            for seed in cfg.seeds:
                _, accuracy, touched = _run_cell(cfg, cfg.scenario, regime, seed, delta_r=delta_r)
                consumed += touched
                records.append(
                    RunRecord(
                        experiment_id=cfg.experiment_id,
                        regime=regime,
                        seed=seed,
                        target_domain=cfg.target_domain_index,
                        category_shift=False,
                        delta_r=delta_r,
                        accuracy=accuracy,
                    )
                )
    return MetricsReport(cfg.experiment_id, records, target_samples_consumed=consumed)


# ---------------------------------------------------------------------------
# Embedding export (projection/plotting happens outside this package)
# ---------------------------------------------------------------------------

def embeddings_to_text(params: ModelParams, scenario: Scenario) -> str:
    """One line per sample: index, domain, label, then the feature vector."""
    features = forward_features(params, ad.constant(scenario.features)).values
    lines = []
    for i in range(scenario.n_samples):
        row = " ".join(repr(float(v)) for v in features[i])
        lines.append(f"{i} {scenario.domain_indices[i]} {scenario.labels[i]} {row}")
    return "\n".join(lines) + "\n"


def embeddings_from_text(text: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Parse a dump back into (sample_indices, domain_indices, labels, features)."""
    sample_indices, domain_indices, labels, rows = [], [], [], []
    for line in text.splitlines():
        tokens = line.split()
        sample_indices.append(int(tokens[0]))
        domain_indices.append(int(tokens[1]))
        labels.append(int(tokens[2]))
        rows.append([float(v) for v in tokens[3:]])
    return (
        np.asarray(sample_indices, dtype=np.int64),
        np.asarray(domain_indices, dtype=np.int64),
        np.asarray(labels, dtype=np.int64),
        np.asarray(rows),
    )


def export_embeddings(params: ModelParams, scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(embeddings_to_text(params, scenario), encoding="utf-8")
