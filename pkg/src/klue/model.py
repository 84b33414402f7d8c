"""Trainable network: toy backbone, class/concept heads, losses, optimizer."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import dku as dkum
from . import fuzzy
from .autodiff import Node

log = logging.getLogger(__name__)

BACKBONES = ("identity", "linear", "mlp")


class ModelError(Exception):
    pass


@dataclass
class ModelDims:
    feature_dim: int
    embed_dim: int
    n_classes: int
    n_concepts: int
    backbone: str = "linear"
    hidden_dim: int = 64


class KlueModel:
    """Backbone plus two single-layer affine heads and DKU connector params.

    Head weights are stored row-per-classifier ([K, D] and [S, D]) so the
    uniqueness losses operate directly on classifier vectors.
    """

    def __init__(self, dims: ModelDims, dku_config: Optional[dkum.DkuConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        if dims.backbone not in BACKBONES:
            raise ModelError(f"unknown backbone {dims.backbone!r}")
        if dims.backbone == "identity" and dims.embed_dim != dims.feature_dim:
            raise ModelError(
                "identity backbone requires embed_dim == feature_dim "
                f"({dims.embed_dim} != {dims.feature_dim})"
            )
        self.dims = dims
        self.dku_config = dku_config if dku_config is not None else dkum.DkuConfig()
        rng = rng if rng is not None else np.random.default_rng(0)

        def init(rows, cols):
            return ad.param(rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols)))

        self.params = {}
        if dims.backbone == "linear":
            self.params["backbone.W"] = init(dims.embed_dim, dims.feature_dim)
            self.params["backbone.b"] = ad.param(np.zeros(dims.embed_dim))
        elif dims.backbone == "mlp":
            self.params["backbone.W1"] = init(dims.hidden_dim, dims.feature_dim)
            self.params["backbone.b1"] = ad.param(np.zeros(dims.hidden_dim))
            self.params["backbone.W2"] = init(dims.embed_dim, dims.hidden_dim)
            self.params["backbone.b2"] = ad.param(np.zeros(dims.embed_dim))
        self.params["class_head.W"] = init(dims.n_classes, dims.embed_dim)
        self.params["class_head.b"] = ad.param(np.zeros(dims.n_classes))
        self.params["concept_head.W"] = init(dims.n_concepts, dims.embed_dim)
        self.params["concept_head.b"] = ad.param(np.zeros(dims.n_concepts))
        self.params.update(self.dku_config.connector.nodes())

    # -- forward -----------------------------------------------------------

    def embed(self, x: np.ndarray) -> Node:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dims.feature_dim:
            raise ModelError(
                f"input shape {x.shape} incompatible with feature_dim "
                f"{self.dims.feature_dim}"
            )
        h = ad.constant(x)
        if self.dims.backbone == "identity":
            return h
        if self.dims.backbone == "linear":
            return self._affine(h, "backbone.W", "backbone.b")
        h = ad.tanh(self._affine(h, "backbone.W1", "backbone.b1"))
        return self._affine(h, "backbone.W2", "backbone.b2")

    def _affine(self, x: Node, w_key: str, b_key: str) -> Node:
        return ad.add_bias(
            ad.matmul(x, ad.transpose(self.params[w_key])), self.params[b_key]
        )

    def forward(self, x: np.ndarray):
        """Returns (class logits z, class probs, concept probs)."""
        e = self.embed(x)
        z = self._affine(e, "class_head.W", "class_head.b")
        p_class = ad.sigmoid(z)
        p_concept = ad.sigmoid(self._affine(e, "concept_head.W", "concept_head.b"))
        return z, p_class, p_concept

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.value)):
                raise ModelError(f"parameter {name} became non-finite")

    def state_dict(self) -> dict:
        return {name: p.value.tolist() for name, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64).reshape(p.value.shape)
            p.value = arr


def uniqueness_losses(model: KlueModel):
    """Orthogonality penalties on row-normalized head weights:
    concept-vs-concept gram against identity, concept-vs-class gram
    against zero.  Biases are excluded."""
    ws = ad.row_normalize(model.params["concept_head.W"])
    wk = ad.row_normalize(model.params["class_head.W"])
    gram_ss = ad.matmul(ws, ad.transpose(ws))
    eye = ad.constant(np.eye(model.dims.n_concepts))
    l_concept = ad.frobenius_sq(gram_ss - eye)
    l_class = ad.frobenius_sq(ad.matmul(ws, ad.transpose(wk)))
    return l_concept, l_class


def classification_loss(p_delta: Node, labels: np.ndarray) -> Node:
    """Multi-label binary cross-entropy, averaged over classes and batch."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != p_delta.value.shape:
        raise ModelError(
            f"labels shape {labels.shape} != probs shape {p_delta.value.shape}"
        )
    p = ad.clamp_prob(p_delta)
    y = ad.constant(labels)
    ll = y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)
    return -(1.0 / labels.size) * ad.asum(ll)


@dataclass
class LossWeights:
    lambda_class: float = 0.01
    lambda_concept: float = 0.1
    lambda_sat: float = 1.0

    def __post_init__(self):
        for name in ("lambda_class", "lambda_concept", "lambda_sat"):
            if getattr(self, name) < 0:
                raise ModelError(f"{name} must be >= 0")


def total_loss(
    model: KlueModel,
    x: np.ndarray,
    labels: np.ndarray,
    rb,
    weights: LossWeights,
    use_dku: bool = True,
    use_sat: bool = True,
):
    """Composite training loss; returns (total, parts) where parts maps
    term name to its (unweighted) scalar node."""
    z, p_class, p_concept = model.forward(x)
    cfg = model.dku_config
    if use_dku:
        truths = dkum.evaluate_forward_rules(p_class, p_concept, rb, cfg)
        delta = dkum.compute_delta(truths, cfg, batch_size=x.shape[0])
        _, p_delta = dkum.refine_logits(z, delta, cfg)
    else:
        p_delta = p_class

    parts = {"class": classification_loss(p_delta, labels)}
    total = parts["class"]
    if weights.lambda_concept > 0 or weights.lambda_class > 0:
        l_concept, l_class = uniqueness_losses(model)
        parts["uniq_concept"] = l_concept
        parts["uniq_class"] = l_class
        total = total + weights.lambda_concept * l_concept
        total = total + weights.lambda_class * l_class
    if use_sat and weights.lambda_sat > 0:
        l_sat = dkum.sat_loss(p_class, p_concept, rb, cfg, labels)
        parts["sat"] = l_sat
        total = total + weights.lambda_sat * l_sat
    return total, parts


class Adam:
    """Adam with optional classic L2 weight decay (added to the gradient)."""

    def __init__(self, params: dict, lr: float = 1e-2, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=np.float64).reshape(
                self.m[k].shape
            )
            self.v[k] = np.asarray(state["v"][k], dtype=np.float64).reshape(
                self.v[k].shape
            )
