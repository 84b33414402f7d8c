"""Differentiable Knowledge Unit.

Evaluates forward rules over class/concept probabilities under the chosen
fuzzy semantics, aggregates per-class positive and negative truth into a
logit adjustment, refines the logits, and scores converse-rule
satisfiability for the SAT loss.  All operations are batched: probability
inputs are [B, K] / [B, S] nodes and rule truths are [B] vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fuzzy
from . import rulebase as rbm
from .autodiff import Node

log = logging.getLogger(__name__)


class DkuError(Exception):
    pass


@dataclass
class DkuConfig:
    alpha_temp: float = 5.0
    semantics: fuzzy.FuzzySemantics = field(default_factory=fuzzy.FuzzySemantics)
    connector: fuzzy.ConnectorParams = field(default_factory=fuzzy.ConnectorParams)

    def __post_init__(self):
        if not np.isfinite(self.alpha_temp):
            raise DkuError(f"alpha_temp must be finite, got {self.alpha_temp}")


@dataclass
class RuleTruths:
    """Per-class lists of positive / negative forward-rule truth vectors."""

    positive: list  # [K] lists of Node [B]
    negative: list  # [K] lists of Node [B]

    @property
    def n_classes(self) -> int:
        return len(self.positive)


def _check_rule_indices(rb: rbm.RuleBase, n_classes: int, n_concepts: int) -> None:
    if rb.K > n_classes:
        raise DkuError(
            f"rule base references {rb.K} classes but model provides {n_classes}"
        )
    if rb.T > n_concepts:
        raise DkuError(
            f"rule base references {rb.T} concepts but model provides {n_concepts}"
        )


class _AntecedentCache:
    """Memoizes antecedent conjunction nodes per antecedent tuple.

    Negative rules share antecedents with the positive rule that spawned
    them, so caching cuts the graph size substantially.
    """

    def __init__(self, concept_probs: Node, cfg: DkuConfig):
        self.concept_probs = concept_probs
        self.cfg = cfg
        self._cols = {}
        self._conj = {}

    def col(self, s: int) -> Node:
        node = self._cols.get(s)
        if node is None:
            node = ad.getcol(self.concept_probs, s)
            self._cols[s] = node
        return node

    def conjunction(self, antecedent: tuple) -> Node:
        node = self._conj.get(antecedent)
        if node is None:
            values = [self.col(s) for s in antecedent]
            node = fuzzy.conjunction(values, self.cfg.semantics, self.cfg.connector)
            self._conj[antecedent] = node
        return node


def evaluate_forward_rules(
    class_probs: Node, concept_probs: Node, rb: rbm.RuleBase, cfg: DkuConfig
) -> RuleTruths:
    """Truth of every forward rule: implication(antecedent conjunction,
    class literal), grouped by consequent class and polarity."""
    n_classes = class_probs.value.shape[1]
    _check_rule_indices(rb, n_classes, concept_probs.value.shape[1])
    cache = _AntecedentCache(concept_probs, cfg)
    class_cols = {}
    positive = [[] for _ in range(n_classes)]
    negative = [[] for _ in range(n_classes)]
    for rule in rb.forward_rules():
        antecedent = cache.conjunction(rule.antecedent)
        k = rule.class_index
        if k not in class_cols:
            class_cols[k] = ad.getcol(class_probs, k)
        if rule.is_positive():
            consequent = class_cols[k]
        else:
            consequent = 1.0 - class_cols[k]
        truth = fuzzy.implication(antecedent, consequent, cfg.semantics)
        (positive if rule.is_positive() else negative)[k].append(truth)
    return RuleTruths(positive=positive, negative=negative)


def compute_delta(truths: RuleTruths, cfg: DkuConfig, batch_size: int) -> Node:
    """Adjustment per class: Agg(positive truths) - Agg(negative truths).

    A missing side contributes 0; a class with no rules at all gets
    delta 0 with a warning.
    """
    tau = cfg.semantics.tau
    columns = []
    for k in range(truths.n_classes):
        pos, neg = truths.positive[k], truths.negative[k]
        if not pos and not neg:
            log.warning("class %d has no forward rules; delta forced to 0", k)
            columns.append(ad.constant(np.zeros(batch_size)))
            continue
        agg_pos = fuzzy.agg_softmax_wa(ad.stack_cols(pos), tau) if pos else None
        agg_neg = fuzzy.agg_softmax_wa(ad.stack_cols(neg), tau) if neg else None
        if agg_pos is not None and agg_neg is not None:
            columns.append(agg_pos - agg_neg)
        elif agg_pos is not None:
            columns.append(agg_pos)
        else:
            columns.append(-agg_neg)
    return ad.stack_cols(columns)


def refine_logits(z: Node, delta: Node, cfg: DkuConfig):
    """z_hat = z + alpha_temp * delta; refined probs = sigmoid(z_hat)."""
    if z.value.shape != delta.value.shape:
        raise DkuError(
            f"logits shape {z.value.shape} != delta shape {delta.value.shape}"
        )
    z_hat = z + cfg.alpha_temp * delta
    return z_hat, ad.sigmoid(z_hat)


def sat_loss(
    class_probs: Node,
    concept_probs: Node,
    rb: rbm.RuleBase,
    cfg: DkuConfig,
    labels: np.ndarray,
) -> Node:
    """Converse-rule satisfiability loss 1 - SAT over the batch.

    Positive converse rules (y_k -> conj) apply to samples with label
    k = 1; negative ones (not-y_k -> conj) to samples with label k = 0.
    Applicable truths are pooled across the batch before aggregation.
    """
    n_classes = class_probs.value.shape[1]
    _check_rule_indices(rb, n_classes, concept_probs.value.shape[1])
    labels = np.asarray(labels)
    cache = _AntecedentCache(concept_probs, cfg)
    class_cols = {}
    pooled = []
    for rule in rb.converse_rules():
        k = rule.class_index
        if rule.is_positive():
            idx = np.flatnonzero(labels[:, k] == 1)
        else:
            idx = np.flatnonzero(labels[:, k] == 0)
        if idx.size == 0:
            continue
        if k not in class_cols:
            class_cols[k] = ad.getcol(class_probs, k)
        literal = class_cols[k] if rule.is_positive() else 1.0 - class_cols[k]
        consequent = cache.conjunction(rule.antecedent)
        truth = fuzzy.implication(literal, consequent, cfg.semantics)
        pooled.append(ad.take(truth, idx))
    if not pooled:
        return ad.constant(0.0)
    all_truths = pooled[0] if len(pooled) == 1 else ad.concat(pooled)
    sat = fuzzy.agg_sat_pmean(all_truths, cfg.semantics.sat_p)
    return 1.0 - sat
