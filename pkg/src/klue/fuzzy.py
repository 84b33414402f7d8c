"""Differentiable fuzzy-logic connectives.

Conjunction: learnable parameterized-activation connector or the Yager
t-norm.  Implication: Reichenbach or its sigmoidal transform.
Aggregation: softmax-weighted average over rule truths, and a p-mean
error aggregator for satisfiability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from . import autodiff as ad
from .autodiff import Node

PARAMETRIC = "parametric"
YAGER = "yager"
REICHENBACH = "reichenbach"
SIGMOIDAL_REICHENBACH = "sigmoidal_reichenbach"

# floors the base of fractional powers inside gradients only
_POW_GRAD_EPS = 1e-12


class FuzzyConfigError(ValueError):
    pass


@dataclass
class FuzzySemantics:
    """Operator selection plus operator parameters."""

    conjunction: str = PARAMETRIC
    implication: str = REICHENBACH
    yager_p: float = 2.0
    sigmoid_slope: float = 9.0
    tau: float = 5.0
    sat_p: float = 2.0

    def __post_init__(self):
        if self.conjunction not in (PARAMETRIC, YAGER):
            raise FuzzyConfigError(f"unknown conjunction {self.conjunction!r}")
        if self.implication not in (REICHENBACH, SIGMOIDAL_REICHENBACH):
            raise FuzzyConfigError(f"unknown implication {self.implication!r}")
        if self.yager_p <= 0:
            raise FuzzyConfigError(f"yager_p must be > 0, got {self.yager_p}")
        if self.sigmoid_slope <= 0:
            raise FuzzyConfigError(
                f"sigmoid_slope must be > 0, got {self.sigmoid_slope}"
            )
        if self.sat_p < 1:
            raise FuzzyConfigError(f"sat_p must be >= 1, got {self.sat_p}")

    @classmethod
    def v1(cls, **kw) -> "FuzzySemantics":
        return cls(conjunction=PARAMETRIC, implication=REICHENBACH, **kw)

    @classmethod
    def v2(cls, **kw) -> "FuzzySemantics":
        return cls(conjunction=YAGER, implication=SIGMOIDAL_REICHENBACH, **kw)


@dataclass
class ConnectorParams:
    """Learnable scalars of the parameterized activation connector,
    shared across all rules."""

    alpha: Node = field(default_factory=lambda: ad.param(1.0))
    beta: Node = field(default_factory=lambda: ad.param(1.0))
    gamma: Node = field(default_factory=lambda: ad.param(1.0))
    delta: Node = field(default_factory=lambda: ad.param(-2.0))

    def nodes(self) -> dict:
        return {
            "connector.alpha": self.alpha,
            "connector.beta": self.beta,
            "connector.gamma": self.gamma,
            "connector.delta": self.delta,
        }

    def values(self) -> dict:
        return {k.split(".")[1]: float(v.value) for k, v in self.nodes().items()}

    @classmethod
    def from_values(cls, alpha, beta, gamma, delta) -> "ConnectorParams":
        return cls(
            ad.param(float(alpha)),
            ad.param(float(beta)),
            ad.param(float(gamma)),
            ad.param(float(delta)),
        )


def conj_parametric_pair(x: Node, y: Node, cp: ConnectorParams) -> Node:
    """sigma(alpha*x + beta*y + gamma*x*y + delta), elementwise."""
    return ad.sigmoid(cp.alpha * x + cp.beta * y + cp.gamma * (x * y) + cp.delta)


def conj_parametric(values: Sequence[Node], cp: ConnectorParams) -> Node:
    """n-ary connector via a left fold over the canonical concept order."""
    if not values:
        raise FuzzyConfigError("conj_parametric: empty input")
    acc = values[0]
    for v in values[1:]:
        acc = conj_parametric_pair(acc, v, cp)
    return acc


def conj_yager(values: Sequence[Node], p: float) -> Node:
    """n-ary Yager t-norm: max(0, 1 - (sum_i (1 - a_i)^p)^(1/p))."""
    if not values:
        raise FuzzyConfigError("conj_yager: empty input")
    if p <= 0:
        raise FuzzyConfigError(f"conj_yager: p must be > 0, got {p}")
    total = ad.power(1.0 - values[0], p, grad_eps=_POW_GRAD_EPS)
    for v in values[1:]:
        total = total + ad.power(1.0 - v, p, grad_eps=_POW_GRAD_EPS)
    root = ad.power(total, 1.0 / p, grad_eps=_POW_GRAD_EPS)
    return ad.relu(1.0 - root)


def impl_reichenbach(a: Node, c: Node) -> Node:
    """I(a, c) = 1 - a + a*c, elementwise."""
    return 1.0 - a + a * c


def sigmoidal_transform(i: Node, s: float) -> Node:
    """Endpoint-normalized sigmoidal squash of a truth value in [0, 1]:
    ((1 + e^{s/2}) * sigma(s*(I - 1/2)) - 1) / (e^{s/2} - 1)."""
    if s <= 0:
        raise FuzzyConfigError(f"sigmoidal_transform: slope must be > 0, got {s}")
    e_half = math.exp(s / 2.0)
    scaled = ad.sigmoid(s * i - (s / 2.0))
    return ((1.0 + e_half) * scaled - 1.0) * (1.0 / (e_half - 1.0))


def impl_sigmoidal_reichenbach(a: Node, c: Node, s: float) -> Node:
    return sigmoidal_transform(impl_reichenbach(a, c), s)


def conjunction(values: Sequence[Node], sem: FuzzySemantics, cp: ConnectorParams) -> Node:
    if len(values) == 1:
        return values[0]
    if sem.conjunction == PARAMETRIC:
        return conj_parametric(values, cp)
    return conj_yager(values, sem.yager_p)


def implication(a: Node, c: Node, sem: FuzzySemantics) -> Node:
    if sem.implication == REICHENBACH:
        return impl_reichenbach(a, c)
    return impl_sigmoidal_reichenbach(a, c, sem.sigmoid_slope)


def agg_softmax_wa(truths: Node, tau: float) -> Node:
    """Softmax-weighted average over the last axis: sum_i softmax(tau*t)_i * t_i.

    tau=0 gives the arithmetic mean; tau -> +inf approaches the max.
    """
    if truths.value.size == 0:
        raise FuzzyConfigError("agg_softmax_wa: empty truth vector")
    weights = ad.softmax_last(truths, tau)
    return ad.sum_last(weights * truths)


def agg_sat_pmean(truths: Node, p: float) -> Node:
    """Satisfiability degree 1 - (mean_i (1 - t_i)^p)^(1/p), in [0, 1]."""
    if truths.value.size == 0:
        raise FuzzyConfigError("agg_sat_pmean: empty truth vector")
    if p < 1:
        raise FuzzyConfigError(f"agg_sat_pmean: p must be >= 1, got {p}")
    err = ad.amean(ad.power(1.0 - truths, p, grad_eps=_POW_GRAD_EPS))
    return 1.0 - ad.power(err, 1.0 / p, grad_eps=_POW_GRAD_EPS)
