"""Gradient-check suites for the fuzzy connectives, the DKU, the model
losses, and the full composed loss on a micro-instance.

These are the runnable oracles behind the ``gradcheck`` CLI command; the
test suite reuses them.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import dku as dkum
from . import fuzzy
from . import model as mdl
from . import rulebase as rbm
from .autodiff import GradCheckReport

# random probability inputs stay inside this band, away from the clamp
# and Yager kink boundaries
_LO, _HI = 0.05, 0.95


def _rand_probs(rng, shape):
    return rng.uniform(_LO, _HI, size=shape)


def micro_rulebase(seed: int = 7) -> rbm.RuleBase:
    """3-class / 6-concept instance with 4 forward rules per the micro
    gradcheck contract (plus converses)."""
    rules = []
    specs = [
        ((0, 1), 0, rbm.POSITIVE, 0),
        ((2, 3), 1, rbm.POSITIVE, 1),
        ((0, 1), 2, rbm.NEGATIVE, 0),
        ((4, 5), 2, rbm.POSITIVE, 2),
    ]
    for antecedent, k, polarity, origin in specs:
        rules.append(rbm.Rule(origin, rbm.FORWARD, polarity, k, antecedent))
        rules.append(rbm.Rule(origin, rbm.CONVERSE, polarity, k, antecedent))
    rb = rbm.RuleBase(
        T=6, K=3, l=1, q_min=2, q_max=2, p_neg=0.0, seed=seed,
        phase2_negatives=False, rules=rules,
    )
    rb.usage = rbm._compute_usage(rules, rb.T)
    return rb


def check_fuzzy(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> dict:
    """Gradcheck every connective; returns {name: GradCheckReport}."""
    rng = np.random.default_rng(seed)
    reports = {}

    a = ad.param(_rand_probs(rng, 5))
    b = ad.param(_rand_probs(rng, 5))
    cp = fuzzy.ConnectorParams.from_values(0.9, 1.1, 0.8, -1.5)
    params = {"a": a, "b": b, **cp.nodes()}
    reports["conj_parametric"] = ad.gradcheck(
        lambda: ad.asum(fuzzy.conj_parametric([a, b], cp)), params, step, tol
    )

    vals = [ad.param(_rand_probs(rng, 5)) for _ in range(3)]
    reports["conj_yager"] = ad.gradcheck(
        lambda: ad.asum(fuzzy.conj_yager(vals, 2.0)),
        {f"v{i}": v for i, v in enumerate(vals)},
        step,
        tol,
    )

    a2 = ad.param(_rand_probs(rng, 6))
    c2 = ad.param(_rand_probs(rng, 6))
    reports["impl_reichenbach"] = ad.gradcheck(
        lambda: ad.asum(fuzzy.impl_reichenbach(a2, c2)),
        {"a": a2, "c": c2}, step, tol,
    )
    reports["impl_sigmoidal_reichenbach"] = ad.gradcheck(
        lambda: ad.asum(fuzzy.impl_sigmoidal_reichenbach(a2, c2, 9.0)),
        {"a": a2, "c": c2}, step, tol,
    )

    t = ad.param(_rand_probs(rng, 7))
    reports["agg_softmax_wa"] = ad.gradcheck(
        lambda: fuzzy.agg_softmax_wa(t, 5.0), {"t": t}, step, tol
    )
    reports["agg_sat_pmean"] = ad.gradcheck(
        lambda: fuzzy.agg_sat_pmean(t, 2.0), {"t": t}, step, tol
    )
    return reports


def _micro_setup(seed: int, variant: str = "v1"):
    rng = np.random.default_rng(seed)
    rb = micro_rulebase()
    if variant == "v2":
        semantics = fuzzy.FuzzySemantics.v2(tau=5.0)
    else:
        semantics = fuzzy.FuzzySemantics.v1(tau=5.0)
    cfg = dkum.DkuConfig(alpha_temp=5.0, semantics=semantics)
    dims = mdl.ModelDims(
        feature_dim=4, embed_dim=4, n_classes=3, n_concepts=6, backbone="linear"
    )
    model = mdl.KlueModel(dims, cfg, rng=rng)
    x = rng.normal(size=(4, 4))
    labels = rng.integers(0, 2, size=(4, 3))
    return model, rb, x, labels


def check_dku(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> dict:
    """Gradcheck delta computation and SAT loss through raw probability
    inputs (independent of the model)."""
    rng = np.random.default_rng(seed)
    rb = micro_rulebase()
    cfg = dkum.DkuConfig(alpha_temp=5.0, semantics=fuzzy.FuzzySemantics.v1(tau=5.0))
    class_p = ad.param(_rand_probs(rng, (4, 3)))
    concept_p = ad.param(_rand_probs(rng, (4, 6)))
    labels = rng.integers(0, 2, size=(4, 3))
    params = {"class_probs": class_p, "concept_probs": concept_p,
              **cfg.connector.nodes()}

    def delta_scalar():
        truths = dkum.evaluate_forward_rules(class_p, concept_p, rb, cfg)
        return ad.asum(dkum.compute_delta(truths, cfg, batch_size=4))

    def sat_scalar():
        return dkum.sat_loss(class_p, concept_p, rb, cfg, labels)

    return {
        "delta": ad.gradcheck(delta_scalar, params, step, tol),
        "sat_loss": ad.gradcheck(sat_scalar, params, step, tol),
    }


def check_model(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> dict:
    """Gradcheck both uniqueness losses and the classification loss."""
    model, rb, x, labels = _micro_setup(seed)
    head_params = {
        k: v for k, v in model.params.items() if k.endswith(".W")
    }

    def uniq_scalar():
        l_concept, l_class = mdl.uniqueness_losses(model)
        return l_concept + l_class

    def bce_scalar():
        _, p_class, _ = model.forward(x)
        return mdl.classification_loss(p_class, labels)

    return {
        "uniqueness": ad.gradcheck(uniq_scalar, head_params, step, tol),
        "classification": ad.gradcheck(bce_scalar, model.params, step, tol),
    }


def check_loss(seed: int = 0, step: float = 1e-5, tol: float = 1e-4,
               variant: str = "v1") -> dict:
    """Gradcheck the full composed loss on the 3-class/6-concept micro-model."""
    model, rb, x, labels = _micro_setup(seed, variant)
    weights = mdl.LossWeights(lambda_class=0.01, lambda_concept=0.1, lambda_sat=1.0)

    def scalar():
        total, _ = mdl.total_loss(model, x, labels, rb, weights,
                                  use_dku=True, use_sat=True)
        return total

    return {"total_loss": ad.gradcheck(scalar, model.params, step, tol)}


SUITES = {
    "fuzzy": check_fuzzy,
    "dku": check_dku,
    "model": check_model,
    "loss": check_loss,
}


def run_suite(target: str, seed: int = 0) -> dict:
    if target not in SUITES:
        raise KeyError(f"unknown gradcheck target {target!r}")
    return SUITES[target](seed=seed)
