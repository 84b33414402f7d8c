import math

import numpy as np
import pytest

from klue import autodiff as ad
from klue import dku as dkum
from klue import fuzzy
from klue import rulebase as rbm
from klue.gradchecks import check_dku, check_loss, micro_rulebase


def cfg_v1(tau=5.0, alpha=5.0):
    return dkum.DkuConfig(alpha_temp=alpha, semantics=fuzzy.FuzzySemantics.v1(tau=tau))


def cfg_v2(tau=5.0, alpha=5.0):
    return dkum.DkuConfig(alpha_temp=alpha, semantics=fuzzy.FuzzySemantics.v2(tau=tau))


def single_rule_base(antecedent=(0, 1), k=0, polarity=rbm.POSITIVE, T=3, K=2):
    rules = [
        rbm.Rule(k, rbm.FORWARD, polarity, k, tuple(antecedent)),
        rbm.Rule(k, rbm.CONVERSE, polarity, k, tuple(antecedent)),
    ]
    rb = rbm.RuleBase(T=T, K=K, l=1, q_min=1, q_max=len(antecedent), p_neg=0.0,
                      seed=0, phase2_negatives=False, rules=rules)
    rb.usage = rbm._compute_usage(rules, T)
    return rb


def probs(arr):
    return ad.constant(np.asarray(arr, dtype=np.float64))


def test_vacuous_antecedent_gives_truth_one():
    rb = single_rule_base()
    cfg = cfg_v2()  # Yager conjunction gives exact 0 for zero inputs
    class_p = probs([[0.123, 0.5]])
    concept_p = probs([[0.0, 0.0, 0.9]])
    truths = dkum.evaluate_forward_rules(class_p, concept_p, rb, cfg)
    assert truths.positive[0][0].value[0] == pytest.approx(1.0, abs=1e-9)


def test_satisfied_rule_truth_near_one():
    rb = single_rule_base()
    cfg = cfg_v2()
    class_p = probs([[1.0, 0.5]])
    concept_p = probs([[1.0, 1.0, 0.2]])
    truths = dkum.evaluate_forward_rules(class_p, concept_p, rb, cfg)
    assert truths.positive[0][0].value[0] == pytest.approx(1.0, abs=1e-6)


def test_micro_rulebase_truth_table_matches_brute_force():
    # brute-force oracle: direct formula substitution per rule
    rb = micro_rulebase()
    cfg = cfg_v1()
    rng = np.random.default_rng(4)
    cp_vals = rng.uniform(0.1, 0.9, size=(3, 3))
    sp_vals = rng.uniform(0.1, 0.9, size=(3, 6))
    truths = dkum.evaluate_forward_rules(probs(cp_vals), probs(sp_vals), rb, cfg)

    def sigma(v):
        return 1.0 / (1.0 + np.exp(-v))

    def conj(vals):
        acc = vals[0]
        for v in vals[1:]:
            acc = sigma(1.0 * acc + 1.0 * v + 1.0 * acc * v - 2.0)
        return acc

    for rule in rb.forward_rules():
        a = conj([sp_vals[:, s] for s in rule.antecedent])
        consequent = (
            cp_vals[:, rule.class_index]
            if rule.is_positive()
            else 1.0 - cp_vals[:, rule.class_index]
        )
        expected = 1.0 - a + a * consequent
        bucket = truths.positive if rule.is_positive() else truths.negative
        got = [
            t.value
            for t in bucket[rule.class_index]
        ]
        assert any(np.allclose(g, expected, atol=1e-12) for g in got)


def test_rule_with_bad_concept_index_errors():
    rb = single_rule_base(antecedent=(0, 5), T=6)
    class_p = probs([[0.5, 0.5]])
    concept_p = probs([[0.5, 0.5, 0.5]])  # only 3 concepts provided
    with pytest.raises(dkum.DkuError):
        dkum.evaluate_forward_rules(class_p, concept_p, rb, cfg_v1())


def test_delta_bounds_and_symmetry():
    cfg = cfg_v1(tau=3.0)
    ones = [ad.constant(np.ones(2))]
    zeros = [ad.constant(np.zeros(2))]
    truths = dkum.RuleTruths(positive=[ones], negative=[zeros])
    delta = dkum.compute_delta(truths, cfg, batch_size=2)
    np.testing.assert_allclose(delta.value, 1.0)

    same = [ad.constant(np.full(2, 0.37)), ad.constant(np.full(2, 0.81))]
    truths = dkum.RuleTruths(positive=[same], negative=[list(same)])
    delta = dkum.compute_delta(truths, cfg, batch_size=2)
    np.testing.assert_allclose(delta.value, 0.0, atol=1e-15)


def test_delta_tau_zero_is_mean_difference():
    cfg = cfg_v1(tau=0.0)
    pos = [ad.constant(np.array([0.8])), ad.constant(np.array([0.6]))]
    neg = [ad.constant(np.array([0.5]))]
    truths = dkum.RuleTruths(positive=[pos], negative=[neg])
    delta = dkum.compute_delta(truths, cfg, batch_size=1)
    assert delta.value[0, 0] == pytest.approx(0.2, abs=1e-12)


def test_delta_missing_sides():
    cfg = cfg_v1(tau=0.0)
    pos = [ad.constant(np.array([0.9]))]
    truths = dkum.RuleTruths(positive=[pos, []], negative=[[], [pos[0]]])
    delta = dkum.compute_delta(truths, cfg, batch_size=1)
    assert delta.value[0, 0] == pytest.approx(0.9)
    assert delta.value[0, 1] == pytest.approx(-0.9)


def test_delta_no_rules_warns_and_zeroes(caplog):
    cfg = cfg_v1()
    truths = dkum.RuleTruths(positive=[[]], negative=[[]])
    with caplog.at_level("WARNING", logger="klue.dku"):
        delta = dkum.compute_delta(truths, cfg, batch_size=3)
    np.testing.assert_array_equal(delta.value, np.zeros((3, 1)))
    assert any("no forward rules" in r.message for r in caplog.records)


def test_delta_bounded_for_random_inputs():
    rng = np.random.default_rng(0)
    cfg = cfg_v1(tau=7.0)
    pos = [ad.constant(rng.uniform(0, 1, size=4)) for _ in range(5)]
    neg = [ad.constant(rng.uniform(0, 1, size=4)) for _ in range(3)]
    truths = dkum.RuleTruths(positive=[pos], negative=[neg])
    delta = dkum.compute_delta(truths, cfg, batch_size=4).value
    assert np.all(delta >= -1.0 - 1e-12) and np.all(delta <= 1.0 + 1e-12)


def test_mean_aggregation_monotone_under_perturbation():
    cfg = cfg_v1(tau=0.0)
    base = [0.3, 0.6, 0.2]
    for i in range(3):
        bumped = list(base)
        bumped[i] += 0.05
        lo = dkum.compute_delta(
            dkum.RuleTruths([[ad.constant(np.array([v])) for v in base]], [[]]),
            cfg, batch_size=1,
        ).value[0, 0]
        hi = dkum.compute_delta(
            dkum.RuleTruths([[ad.constant(np.array([v])) for v in bumped]], [[]]),
            cfg, batch_size=1,
        ).value[0, 0]
        assert hi >= lo


def test_refine_logits_identity_and_known_value():
    cfg = cfg_v1(alpha=5.0)
    z = probs([[0.0, 2.0]])
    zero_delta = probs([[0.0, 0.0]])
    z_hat, p = dkum.refine_logits(z, zero_delta, cfg)
    assert np.array_equal(p.value, ad.sigmoid(z).value)

    one_delta = probs([[1.0, 0.0]])
    _, p = dkum.refine_logits(probs([[0.0, 0.0]]), one_delta, cfg)
    assert p.value[0, 0] == pytest.approx(1.0 / (1.0 + math.exp(-5.0)), rel=1e-12)


def test_refine_logits_monotone_in_delta():
    cfg = cfg_v1(alpha=5.0)
    z = probs([[0.3]])
    lo = dkum.refine_logits(z, probs([[0.1]]), cfg)[1].value[0, 0]
    hi = dkum.refine_logits(z, probs([[0.2]]), cfg)[1].value[0, 0]
    assert hi > lo


def test_refine_logits_shape_mismatch():
    with pytest.raises(dkum.DkuError):
        dkum.refine_logits(probs([[0.0, 1.0]]), probs([[1.0]]), cfg_v1())


def test_sat_loss_extremes():
    rb = single_rule_base(antecedent=(0, 1), k=0)
    cfg = cfg_v2()
    labels = np.array([[1, 0]])
    # satisfied: class prob 1, concepts 1 -> implication truth 1 -> loss 0
    loss = dkum.sat_loss(probs([[1.0, 0.5]]), probs([[1.0, 1.0, 0.5]]), rb, cfg,
                         labels)
    assert loss.value == pytest.approx(0.0, abs=1e-9)
    # violated: class prob 1, concepts 0 -> truth 0 -> loss 1
    loss = dkum.sat_loss(probs([[1.0, 0.5]]), probs([[0.0, 0.0, 0.5]]), rb, cfg,
                         labels)
    assert loss.value == pytest.approx(1.0, abs=1e-9)


def test_sat_loss_pmean_known_value():
    # two applicable converse rules at truths [1, 0] with p=2
    rules = [
        rbm.Rule(0, rbm.FORWARD, rbm.POSITIVE, 0, (0,)),
        rbm.Rule(0, rbm.CONVERSE, rbm.POSITIVE, 0, (0,)),
        rbm.Rule(1, rbm.FORWARD, rbm.POSITIVE, 1, (1,)),
        rbm.Rule(1, rbm.CONVERSE, rbm.POSITIVE, 1, (1,)),
    ]
    rb = rbm.RuleBase(T=2, K=2, l=1, q_min=1, q_max=1, p_neg=0.0, seed=0,
                      phase2_negatives=False, rules=rules)
    rb.usage = rbm._compute_usage(rules, 2)
    cfg = cfg_v2()
    labels = np.array([[1, 1]])
    class_p = probs([[1.0, 1.0]])
    concept_p = probs([[1.0, 0.0]])
    loss = dkum.sat_loss(class_p, concept_p, rb, cfg, labels)
    assert loss.value == pytest.approx(math.sqrt(0.5), abs=1e-9)


def test_sat_loss_gating_by_labels():
    rb = single_rule_base(antecedent=(0,), k=0, T=1)
    cfg = cfg_v1()
    # label 0 for class 0: positive converse rule does not apply
    loss = dkum.sat_loss(probs([[0.9, 0.1]]), probs([[0.1]]), rb, cfg,
                         np.array([[0, 0]]))
    assert loss.value == 0.0
    assert loss.parents == ()


def test_negative_converse_gates_on_label_zero():
    rb = single_rule_base(antecedent=(0,), k=1, polarity=rbm.NEGATIVE, T=1)
    cfg = cfg_v1()
    # not-y1 -> concept0; sample has y1 = 0, literal truth = 1 - p(y1)
    class_p = probs([[0.5, 0.2]])
    concept_p = probs([[0.7]])
    loss = dkum.sat_loss(class_p, concept_p, rb, cfg, np.array([[1, 0]]))
    expected = 1.0 - (1.0 - 0.8 + 0.8 * 0.7)
    assert loss.value == pytest.approx(expected, abs=1e-12)
    # y1 = 1: rule skipped
    loss = dkum.sat_loss(class_p, concept_p, rb, cfg, np.array([[1, 1]]))
    assert loss.value == 0.0


def test_gradient_reaches_concept_probabilities():
    rb = micro_rulebase()
    cfg = cfg_v1()
    rng = np.random.default_rng(8)
    class_p = ad.param(rng.uniform(0.2, 0.8, size=(2, 3)))
    concept_p = ad.param(rng.uniform(0.2, 0.8, size=(2, 6)))
    truths = dkum.evaluate_forward_rules(class_p, concept_p, rb, cfg)
    delta = dkum.compute_delta(truths, cfg, batch_size=2)
    z = ad.constant(rng.normal(size=(2, 3)))
    _, p_delta = dkum.refine_logits(z, delta, cfg)
    ad.backward(ad.amean(p_delta))
    assert np.max(np.abs(concept_p.grad)) > 1e-8


def test_dku_gradchecks_pass():
    for name, report in check_dku(seed=2).items():
        assert report.passed, f"{name}: {report.summary()}"


@pytest.mark.parametrize("variant", ["v1", "v2"])
def test_full_loss_gradcheck_micro_model(variant):
    for name, report in check_loss(seed=2, variant=variant).items():
        assert report.passed, f"{name}: {report.summary()}"


def test_alpha_temp_must_be_finite():
    with pytest.raises(dkum.DkuError):
        dkum.DkuConfig(alpha_temp=float("inf"))
