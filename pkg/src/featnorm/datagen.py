"""Seeded synthetic multi-domain classification scenarios.

Every domain sees the same class prototypes (points on a sphere of radius 3)
through its own affine lens: per-sample gaussian noise around the prototype,
then scale, then a planar rotation of the first two coordinates, then a
translation. Category shift is modelled by removing classes from individual
source domains.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

PROTOTYPE_RADIUS = 3.0
SCENARIO_MAGIC = "featnorm-scenario v1"


@dataclass(frozen=True)
class DomainSpec:
    rotation_angle: float
    scale: float
    translation: tuple[float, ...]
    noise_sigma: float
    present_classes: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "present_classes", frozenset(int(c) for c in self.present_classes))
        if self.scale <= 0.0:
            raise ConfigurationError(f"domain scale must be positive, got {self.scale}")
        if self.noise_sigma < 0.0:
            raise ConfigurationError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")

    @staticmethod
    def identity(input_dim: int, noise_sigma: float, classes) -> "DomainSpec":
        return DomainSpec(
            rotation_angle=0.0,
            scale=1.0,
            translation=(0.0,) * input_dim,
            noise_sigma=noise_sigma,
            present_classes=frozenset(classes),
        )


@dataclass(frozen=True)
class Scenario:
    num_classes: int
    input_dim: int
    class_prototypes: np.ndarray  # (K, d)
    domains: tuple[DomainSpec, ...]
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    domain_indices: np.ndarray  # (n,)
    generation_seed: int

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def domain_mask(self, domain_index: int) -> np.ndarray:
        return self.domain_indices == domain_index


@dataclass(frozen=True)
class Batch:
    inputs: ad.Tensor
    labels: np.ndarray
    domain_indices: np.ndarray

    def __post_init__(self):
        b = self.inputs.rows
        if len(self.labels) != b or len(self.domain_indices) != b:
            raise ConfigurationError("batch fields have inconsistent lengths")


def _rotation_matrix(input_dim: int, angle: float) -> np.ndarray:
    """Planar rotation embedded in the first two coordinates."""
    rot = np.eye(input_dim)
    c, s = np.cos(angle), np.sin(angle)
    rot[0, 0], rot[0, 1] = c, -s
    rot[1, 0], rot[1, 1] = s, c
    return rot


def generate_scenario(
    num_classes: int,
    input_dim: int,
    n_per_class_per_domain: int,
    domain_specs,
    seed: int,
) -> Scenario:
    """Draw a fully seeded multi-domain dataset; bitwise reproducible."""
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    if input_dim < 2:
        raise ConfigurationError(f"need input_dim >= 2, got {input_dim}")
    if n_per_class_per_domain < 1:
        raise ConfigurationError("need at least one sample per class per domain")
    domain_specs = tuple(domain_specs)
    for idx, dom in enumerate(domain_specs):
        if not dom.present_classes:
            raise ConfigurationError(f"domain {idx} has no present classes")
        if any(c < 0 or c >= num_classes for c in dom.present_classes):
            raise ConfigurationError(f"domain {idx} lists classes outside [0, {num_classes})")
        if len(dom.translation) != input_dim:
            raise ConfigurationError(
                f"domain {idx} translation has length {len(dom.translation)}, expected {input_dim}"
            )

    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(num_classes, input_dim))
    prototypes = raw * (PROTOTYPE_RADIUS / np.linalg.norm(raw, axis=1, keepdims=True))

    feature_blocks, label_blocks, domain_blocks = [], [], []
    for dom_idx, dom in enumerate(domain_specs):
        rot = _rotation_matrix(input_dim, dom.rotation_angle)
        translation = np.asarray(dom.translation)
        for cls in sorted(dom.present_classes):
            noise = rng.normal(0.0, dom.noise_sigma, size=(n_per_class_per_domain, input_dim))
            points = (dom.scale * (prototypes[cls] + noise)) @ rot.T + translation
            feature_blocks.append(points)
            label_blocks.append(np.full(n_per_class_per_domain, cls, dtype=np.int64))
            domain_blocks.append(np.full(n_per_class_per_domain, dom_idx, dtype=np.int64))

    return Scenario(
        num_classes=num_classes,
        input_dim=input_dim,
        class_prototypes=prototypes,
        domains=domain_specs,
        features=np.concatenate(feature_blocks),
        labels=np.concatenate(label_blocks),
        domain_indices=np.concatenate(domain_blocks),
        generation_seed=int(seed),
    )


def apply_category_shift(
    scenario: Scenario,
    removed: dict[int, "set[int] | frozenset[int]"],
    target_domain_index: int,
) -> Scenario:
    """Drop the given classes from the named source domains.

    The target domain must not appear in the removal map and no source may be
    emptied; all classes stay defined globally.
    """
    keep = np.ones(scenario.n_samples, dtype=bool)
    new_domains = list(scenario.domains)
    for dom_idx, classes in removed.items():
        classes = frozenset(int(c) for c in classes)
        if dom_idx == target_domain_index:
            raise ConfigurationError(f"removal map names the target domain {dom_idx}")
        if not 0 <= dom_idx < scenario.num_domains:
            raise ConfigurationError(f"removal map names unknown domain {dom_idx}")
        if any(c < 0 or c >= scenario.num_classes for c in classes):
            raise ConfigurationError(f"removal for domain {dom_idx} lists unknown classes")
        remaining = scenario.domains[dom_idx].present_classes - classes
        if not remaining:
            raise ConfigurationError(f"removing {sorted(classes)} empties domain {dom_idx}")
        new_domains[dom_idx] = replace(scenario.domains[dom_idx], present_classes=remaining)
        keep &= ~(scenario.domain_mask(dom_idx) & np.isin(scenario.labels, sorted(classes)))

    return replace(
        scenario,
        domains=tuple(new_domains),
        features=scenario.features[keep],
        labels=scenario.labels[keep],
        domain_indices=scenario.domain_indices[keep],
    )


def make_batches(
    scenario: Scenario,
    source_domain_indices,
    batch_size: int,
    shuffle_seed: int,
) -> list[Batch]:
    """One epoch of balanced mixed-domain batches.

    Every batch holds batch_size / n_sources samples from each source domain,
    shuffled within domain; trailing samples that cannot fill a balanced
    batch are dropped.
    """
    sources = list(source_domain_indices)
    if not sources:
        raise ConfigurationError("need at least one source domain")
    if batch_size % len(sources) != 0:
        raise ConfigurationError(
            f"batch_size {batch_size} not divisible by {len(sources)} source domains"
        )
    per_domain = batch_size // len(sources)

    rng = np.random.default_rng(shuffle_seed)
    shuffled: list[np.ndarray] = []
    for dom_idx in sources:
        indices = np.flatnonzero(scenario.domain_indices == dom_idx)
        rng.shuffle(indices)
        shuffled.append(indices)

    n_batches = min(len(idx) // per_domain for idx in shuffled)
    batches = []
    for b in range(n_batches):
        sel = np.concatenate([idx[b * per_domain : (b + 1) * per_domain] for idx in shuffled])
        batches.append(
            Batch(
                inputs=ad.constant(scenario.features[sel]),
                labels=scenario.labels[sel].copy(),
                domain_indices=scenario.domain_indices[sel].copy(),
            )
        )
    return batches


# ---------------------------------------------------------------------------
# Scenario text format (17 significant digits, exact round-trip)
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def scenario_to_text(scenario: Scenario) -> str:
    lines = [
        SCENARIO_MAGIC,
        f"num_classes {scenario.num_classes}",
        f"input_dim {scenario.input_dim}",
        f"num_domains {scenario.num_domains}",
        f"seed {scenario.generation_seed}",
    ]
    for proto in scenario.class_prototypes:
        lines.append("prototype " + " ".join(_fmt(v) for v in proto))
    for idx, dom in enumerate(scenario.domains):
        classes = ",".join(str(c) for c in sorted(dom.present_classes))
        lines.append(
            f"domain {idx} rotation {_fmt(dom.rotation_angle)} scale {_fmt(dom.scale)} "
            f"noise {_fmt(dom.noise_sigma)} classes {classes} translation "
            + " ".join(_fmt(t) for t in dom.translation)
        )
    lines.append(f"samples {scenario.n_samples}")
    for i in range(scenario.n_samples):
        row = " ".join(_fmt(v) for v in scenario.features[i])
        lines.append(f"{scenario.domain_indices[i]} {scenario.labels[i]} {row}")
    return "\n".join(lines) + "\n"


def scenario_from_text(text: str) -> Scenario:
    lines = text.splitlines()
    if not lines or lines[0] != SCENARIO_MAGIC:
        raise ConfigurationError("not a scenario file (bad header line)")

    header: dict[str, str] = {}
    prototypes: list[list[float]] = []
    domains: list[DomainSpec] = []
    i = 1
    while i < len(lines) and not lines[i].startswith("samples "):
        tokens = lines[i].split()
        if tokens[0] == "prototype":
            prototypes.append([float(v) for v in tokens[1:]])
        elif tokens[0] == "domain":
            classes = frozenset(int(c) for c in tokens[9].split(","))
            translation = tuple(float(t) for t in tokens[11:])
            domains.append(
                DomainSpec(
                    rotation_angle=float(tokens[3]),
                    scale=float(tokens[5]),
                    translation=translation,
                    noise_sigma=float(tokens[7]),
                    present_classes=classes,
                )
            )
        else:
            header[tokens[0]] = tokens[1]
        i += 1

    n_samples = int(lines[i].split()[1])
    i += 1
    input_dim = int(header["input_dim"])
    features = np.empty((n_samples, input_dim))
    labels = np.empty(n_samples, dtype=np.int64)
    domain_indices = np.empty(n_samples, dtype=np.int64)
    for row in range(n_samples):
        tokens = lines[i + row].split()
        domain_indices[row] = int(tokens[0])
        labels[row] = int(tokens[1])
        features[row] = [float(v) for v in tokens[2:]]

    return Scenario(
        num_classes=int(header["num_classes"]),
        input_dim=input_dim,
        class_prototypes=np.asarray(prototypes),
        domains=tuple(domains),
        features=features,
        labels=labels,
        domain_indices=domain_indices,
        generation_seed=int(header["seed"]),
    )


def save_scenario(path: str | Path, scenario: Scenario) -> None:
    Path(path).write_text(scenario_to_text(scenario), encoding="utf-8")


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Default scenario used by the experiment harness and acceptance runs
# ---------------------------------------------------------------------------

DEFAULT_NUM_CLASSES = 5
DEFAULT_INPUT_DIM = 4
DEFAULT_SAMPLES_PER_CLASS = 200
DEFAULT_NOISE_SIGMA = 0.3
DEFAULT_SCENARIO_SEED = 20240


SOURCE_ROTATIONS = (-0.4, 0.0, 0.4)
TARGET_ROTATION = 0.8


def default_domain_specs(
    num_classes: int = DEFAULT_NUM_CLASSES,
    input_dim: int = DEFAULT_INPUT_DIM,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> tuple[DomainSpec, ...]:
    """Three rotation-shifted source domains plus one extrapolated target (index 3).

    The shift is a pure planar rotation: sources span [-0.4, 0.4] rad and the
    target sits at 0.8 rad, outside the source span. Norm-enlarged training
    widens the angular margins between class cones, which is exactly the slack
    a rotated target needs.
    """
    all_classes = frozenset(range(num_classes))

    def spec(angle):
        return DomainSpec(
            rotation_angle=angle,
            scale=1.0,
            translation=(0.0,) * input_dim,
            noise_sigma=noise_sigma,
            present_classes=all_classes,
        )

    return tuple(spec(a) for a in (*SOURCE_ROTATIONS, TARGET_ROTATION))


def default_scenario(seed: int = DEFAULT_SCENARIO_SEED) -> Scenario:
    return generate_scenario(
        num_classes=DEFAULT_NUM_CLASSES,
        input_dim=DEFAULT_INPUT_DIM,
        n_per_class_per_domain=DEFAULT_SAMPLES_PER_CLASS,
        domain_specs=default_domain_specs(),
        seed=seed,
    )
