"""Synthetic multi-label tasks with known latent concepts.

Samples carry hidden binary latent concepts; features are a linear
embedding of the latents plus Gaussian noise, and labels evaluate a
per-class DNF formula over the latents (optionally flipped for label
noise).  The latents serve as the oracle for concept-recovery scoring.
A shifted variant rotates the concept basis and amplifies the noise to
emulate a domain gap with identical label semantics.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rulebase as rbm

DATASET_FORMAT_VERSION = 1


class TaskError(Exception):
    pass


@dataclass
class SyntheticTaskSpec:
    feature_dim: int = 64
    n_latent: int = 12
    n_classes: int = 6
    n_train: int = 8000
    n_val: int = 2000
    noise_sigma: float = 0.0
    label_flip_prob: float = 0.0
    seed: int = 0
    terms_per_class: int = 2
    term_size_min: int = 2
    term_size_max: int = 3
    shift_angle_deg: float = 15.0
    shift_noise_factor: float = 1.5

    def __post_init__(self):
        if self.n_classes < 1 or self.n_latent < 1:
            raise TaskError("need at least one class and one latent concept")
        if self.feature_dim < 2 * self.n_latent:
            raise TaskError(
                "feature_dim must be >= 2 * n_latent so the shifted basis "
                "has room to rotate"
            )
        if not 1 <= self.term_size_min <= self.term_size_max <= self.n_latent:
            raise TaskError("bad term size bounds")
        if self.terms_per_class < 1:
            raise TaskError("terms_per_class must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**d)


@dataclass
class Dataset:
    x: np.ndarray        # [N, F]
    labels: np.ndarray   # [N, K] in {0,1}
    latents: np.ndarray  # [N, n_latent] in {0,1}, hidden from the model

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    concept_basis: np.ndarray       # [n_latent, F]
    shifted_basis: np.ndarray       # [n_latent, F]
    class_formulas: list            # per class: list of concept-index tuples (DNF)
    train: Dataset = field(default=None)
    val: Dataset = field(default=None)
    shifted_val: Dataset = field(default=None)


def _build_formulas(spec: SyntheticTaskSpec, rng: np.random.Generator) -> list:
    """Random DNF per class; a shuffled round-robin over concepts
    guarantees every latent appears in at least one formula."""
    pool = list(rng.permutation(spec.n_latent))
    cursor = 0

    def next_concepts(size):
        nonlocal cursor, pool
        picked = []
        while len(picked) < size:
            if cursor >= len(pool):
                pool = list(rng.permutation(spec.n_latent))
                cursor = 0
            c = pool[cursor]
            cursor += 1
            if c not in picked:
                picked.append(c)
        return tuple(sorted(picked))

    formulas = []
    for _ in range(spec.n_classes):
        terms = []
        for _ in range(spec.terms_per_class):
            size = int(rng.integers(spec.term_size_min, spec.term_size_max + 1))
            terms.append(next_concepts(size))
        formulas.append(terms)
    if not all(formulas):
        raise TaskError("degenerate task: a class has no formula terms")
    return formulas


def _eval_formulas(latents: np.ndarray, formulas: list) -> np.ndarray:
    n = latents.shape[0]
    labels = np.zeros((n, len(formulas)), dtype=np.int64)
    for k, terms in enumerate(formulas):
        active = np.zeros(n, dtype=bool)
        for term in terms:
            active |= latents[:, list(term)].all(axis=1)
        labels[:, k] = active
    return labels


def _orthonormal_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(dim, rows)))
    return q.T[:rows]


def _make_split(
    spec: SyntheticTaskSpec,
    basis: np.ndarray,
    formulas: list,
    n: int,
    noise_sigma: float,
    rng: np.random.Generator,
) -> Dataset:
    latents = rng.integers(0, 2, size=(n, spec.n_latent))
    signed = 2.0 * latents - 1.0
    x = signed @ basis
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    labels = _eval_formulas(latents, formulas)
    if spec.label_flip_prob > 0:
        flips = rng.random(labels.shape) < spec.label_flip_prob
        labels = np.where(flips, 1 - labels, labels)
    return Dataset(x=x, labels=labels, latents=latents)


def generate_task(spec: SyntheticTaskSpec) -> SyntheticTask:
    """Deterministic by spec.seed; returns train / val / shifted-val splits."""
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    frame = _orthonormal_rows(rng, 2 * spec.n_latent, spec.feature_dim)
    basis, complement = frame[: spec.n_latent], frame[spec.n_latent :]
    theta = np.deg2rad(spec.shift_angle_deg)
    shifted_basis = np.cos(theta) * basis + np.sin(theta) * complement
    formulas = _build_formulas(spec, rng)

    train = _make_split(spec, basis, formulas, spec.n_train, spec.noise_sigma, rng)
    val = _make_split(spec, basis, formulas, spec.n_val, spec.noise_sigma, rng)
    shifted_val = _make_split(
        spec,
        shifted_basis,
        formulas,
        spec.n_val,
        spec.noise_sigma * spec.shift_noise_factor,
        rng,
    )
    return SyntheticTask(
        spec=spec,
        concept_basis=basis,
        shifted_basis=shifted_basis,
        class_formulas=formulas,
        train=train,
        val=val,
        shifted_val=shifted_val,
    )


def task_rulebase(task: SyntheticTask) -> rbm.RuleBase:
    """Rule base derived from the task's own label formulas.

    Every DNF term of class k becomes a forward-positive rule
    ``term concepts => class k`` plus its converse, so the knowledge is
    ground truth by construction (the synthetic stand-in for a curated
    real-world rule base).  Concept indices coincide with latent
    indices, so a model using this rule base needs
    ``n_concepts == n_latent``.
    """
    rules = []
    for k, terms in enumerate(task.class_formulas):
        for term in terms:
            antecedent = tuple(sorted(term))
            rules.append(rbm.Rule(k, rbm.FORWARD, rbm.POSITIVE, k, antecedent))
            rules.append(rbm.Rule(k, rbm.CONVERSE, rbm.POSITIVE, k, antecedent))
    rb = rbm.RuleBase(
        T=task.spec.n_latent,
        K=task.spec.n_classes,
        l=task.spec.terms_per_class,
        q_min=task.spec.term_size_min,
        q_max=task.spec.term_size_max,
        p_neg=0.0,
        seed=task.spec.seed,
        phase2_negatives=False,
        rules=rules,
    )
    rb.usage = rbm._compute_usage(rules, rb.T)
    return rb


# ---------------------------------------------------------------------------
# dataset container I/O


def save_dataset(path, ds: Dataset) -> None:
    np.savez_compressed(
        path,
        format_version=np.int64(DATASET_FORMAT_VERSION),
        x=ds.x,
        labels=ds.labels,
        latents=ds.latents,
    )


def load_dataset(path) -> Dataset:
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != DATASET_FORMAT_VERSION:
            raise TaskError(f"unsupported dataset format version {version}")
        return Dataset(x=z["x"], labels=z["labels"], latents=z["latents"])


def dataset_to_csv(ds: Dataset) -> str:
    """Flat CSV export for inspection: features, then labels, then latents."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = (
        [f"x{i}" for i in range(ds.x.shape[1])]
        + [f"y{k}" for k in range(ds.labels.shape[1])]
        + [f"latent{t}" for t in range(ds.latents.shape[1])]
    )
    writer.writerow(header)
    for i in range(len(ds)):
        writer.writerow(
            [repr(float(v)) for v in ds.x[i]]
            + [int(v) for v in ds.labels[i]]
            + [int(v) for v in ds.latents[i]]
        )
    return buf.getvalue()
