import math

import numpy as np
import pytest

from klue import autodiff as ad
from klue import model as mdl
from klue import gradchecks


def make_model(backbone="linear", feature_dim=4, embed_dim=4, n_classes=3,
               n_concepts=6, seed=0):
    dims = mdl.ModelDims(
        feature_dim=feature_dim, embed_dim=embed_dim, n_classes=n_classes,
        n_concepts=n_concepts, backbone=backbone,
    )
    return mdl.KlueModel(dims, rng=np.random.default_rng(seed))


def test_forward_shapes_all_backbones():
    x = np.random.default_rng(0).normal(size=(5, 4))
    for backbone in mdl.BACKBONES:
        m = make_model(backbone=backbone)
        z, p_class, p_concept = m.forward(x)
        assert z.value.shape == (5, 3)
        assert p_class.value.shape == (5, 3)
        assert p_concept.value.shape == (5, 6)
        assert np.all((p_class.value > 0) & (p_class.value < 1))


def test_identity_backbone_requires_matching_dims():
    with pytest.raises(mdl.ModelError, match="identity"):
        mdl.ModelDims(4, 8, 3, 6, backbone="identity")
        make_model(backbone="identity", embed_dim=8)


def test_unknown_backbone_rejected():
    with pytest.raises(mdl.ModelError, match="backbone"):
        make_model(backbone="transformer")


def test_forward_rejects_bad_input_shape():
    m = make_model()
    with pytest.raises(mdl.ModelError, match="feature_dim"):
        m.forward(np.zeros((5, 9)))


def test_state_dict_roundtrip():
    m1 = make_model(seed=1)
    m2 = make_model(seed=2)
    m2.load_state_dict(m1.state_dict())
    x = np.random.default_rng(3).normal(size=(4, 4))
    _, p1, _ = m1.forward(x)
    _, p2, _ = m2.forward(x)
    np.testing.assert_array_equal(p1.value, p2.value)


# -- uniqueness losses with hand-computed values -----------------------------


def set_heads(model, w_concept, w_class):
    model.params["concept_head.W"].value = np.asarray(w_concept, dtype=np.float64)
    model.params["class_head.W"].value = np.asarray(w_class, dtype=np.float64)


def test_uniqueness_zero_for_orthogonal_heads():
    m = make_model(feature_dim=6, embed_dim=6, n_classes=2, n_concepts=3)
    # orthonormal concept rows, class rows orthogonal to them
    set_heads(m, np.eye(6)[:3] * 2.0, np.eye(6)[3:5] * 0.5)
    l_concept, l_class = mdl.uniqueness_losses(m)
    assert l_concept.value == pytest.approx(0.0, abs=1e-12)
    assert l_class.value == pytest.approx(0.0, abs=1e-12)


def test_uniqueness_class_loss_when_heads_coincide():
    # W_S == W_K with orthonormal rows: gram is the identity, so the
    # cross penalty equals the number of shared rows
    m = make_model(feature_dim=6, embed_dim=6, n_classes=3, n_concepts=3)
    set_heads(m, np.eye(6)[:3], np.eye(6)[:3])
    l_concept, l_class = mdl.uniqueness_losses(m)
    assert l_concept.value == pytest.approx(0.0, abs=1e-12)
    assert l_class.value == pytest.approx(3.0, abs=1e-12)


def test_uniqueness_concept_loss_at_45_degrees():
    # two unit rows at 45 degrees: off-diagonal gram entries are
    # cos(45deg) each, so ||G - I||_F^2 = 2 * (1/sqrt(2))^2 = 1
    m = make_model(feature_dim=6, embed_dim=6, n_classes=2, n_concepts=2)
    w = np.zeros((2, 6))
    w[0, 0] = 1.0
    w[1, 0] = w[1, 1] = 1.0 / math.sqrt(2)
    set_heads(m, w, np.eye(6)[4:6])
    l_concept, _ = mdl.uniqueness_losses(m)
    assert l_concept.value == pytest.approx(1.0, abs=1e-12)


def test_uniqueness_invariant_to_row_scale():
    m = make_model(feature_dim=6, embed_dim=6, n_classes=2, n_concepts=3)
    rng = np.random.default_rng(4)
    w_s, w_k = rng.normal(size=(3, 6)), rng.normal(size=(2, 6))
    set_heads(m, w_s, w_k)
    a = [n.value for n in mdl.uniqueness_losses(m)]
    set_heads(m, 7.5 * w_s, 0.01 * w_k)
    b = [n.value for n in mdl.uniqueness_losses(m)]
    np.testing.assert_allclose(a, b, rtol=1e-9)


# -- classification loss -----------------------------------------------------


def test_bce_at_half_is_ln2():
    p = ad.constant(np.full((3, 4), 0.5))
    labels = np.random.default_rng(0).integers(0, 2, size=(3, 4))
    assert mdl.classification_loss(p, labels).value == pytest.approx(math.log(2))


def test_bce_perfect_prediction_is_tiny():
    labels = np.array([[1, 0], [0, 1]])
    p = ad.constant(labels.astype(np.float64))
    # clamp keeps the loss finite and near zero
    assert mdl.classification_loss(p, labels).value == pytest.approx(
        -math.log(1 - 1e-7), rel=1e-6
    )


def test_bce_gradient_is_scaled_residual():
    # d/dp of mean BCE is (p - y) / (p (1-p) N); checked via the sigmoid
    # composition where it collapses to (p - y) / N on the logit
    labels = np.array([[1.0, 0.0, 1.0]])
    z = ad.param(np.array([[0.3, -0.8, 1.2]]))
    p = ad.sigmoid(z)
    ad.backward(mdl.classification_loss(p, labels))
    expected = (p.value - labels) / labels.size
    np.testing.assert_allclose(z.grad, expected, atol=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(mdl.ModelError, match="shape"):
        mdl.classification_loss(ad.constant(np.full((2, 3), 0.5)), np.zeros((3, 2)))


def test_loss_weights_reject_negative():
    with pytest.raises(mdl.ModelError):
        mdl.LossWeights(lambda_sat=-1.0)


# -- total loss composition ---------------------------------------------------


def test_total_loss_decomposes_additively():
    model, rb, x, labels = gradchecks._micro_setup(seed=3)
    weights = mdl.LossWeights(lambda_class=0.01, lambda_concept=0.1, lambda_sat=1.0)
    total, parts = mdl.total_loss(model, x, labels, rb, weights)
    recomposed = (
        parts["class"].value
        + 0.1 * parts["uniq_concept"].value
        + 0.01 * parts["uniq_class"].value
        + 1.0 * parts["sat"].value
    )
    assert total.value == pytest.approx(recomposed, abs=1e-12)


def test_total_loss_zero_weights_is_pure_class_loss():
    model, rb, x, labels = gradchecks._micro_setup(seed=3)
    weights = mdl.LossWeights(lambda_class=0.0, lambda_concept=0.0, lambda_sat=0.0)
    total, parts = mdl.total_loss(model, x, labels, rb, weights)
    assert set(parts) == {"class"}
    assert total is parts["class"]


def test_total_loss_without_dku_ignores_rules():
    model, rb, x, labels = gradchecks._micro_setup(seed=3)
    weights = mdl.LossWeights(lambda_class=0.0, lambda_concept=0.0, lambda_sat=0.0)
    total_off, _ = mdl.total_loss(model, x, labels, rb, weights,
                                  use_dku=False, use_sat=False)
    _, p_class, _ = model.forward(x)
    assert total_off.value == pytest.approx(
        mdl.classification_loss(p_class, labels).value, abs=1e-12
    )


def test_uniqueness_and_classification_gradchecks():
    for name, report in gradchecks.check_model(seed=5).items():
        assert report.passed, f"{name}: {report.summary()}"


@pytest.mark.parametrize("variant", ["v1", "v2"])
def test_total_loss_gradcheck(variant):
    report = gradchecks.check_loss(seed=2, variant=variant)["total_loss"]
    assert report.passed, report.summary()


# -- optimizer ----------------------------------------------------------------


def test_adam_first_step_size_is_lr():
    # with a constant gradient, the bias-corrected first Adam step is
    # exactly lr * sign(g) (up to eps)
    p = ad.param(np.array([1.0, -2.0]))
    opt = mdl.Adam({"p": p}, lr=0.05)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.value, [1.0 - 0.05, -2.0 + 0.05], atol=1e-8)


def test_adam_converges_on_quadratic():
    p = ad.param(np.array([4.0, -3.0]))
    opt = mdl.Adam({"p": p}, lr=0.1)
    for _ in range(400):
        opt.zero_grad()
        ad.backward(ad.asum(p * p))
        opt.step()
    np.testing.assert_allclose(p.value, [0.0, 0.0], atol=1e-3)


def test_adam_weight_decay_shrinks_params():
    p = ad.param(np.array([10.0]))
    opt = mdl.Adam({"p": p}, lr=0.1, weight_decay=1.0)
    p.grad = np.zeros(1)
    opt.step()
    assert p.value[0] < 10.0


def test_adam_state_roundtrip():
    p = ad.param(np.array([1.0]))
    opt = mdl.Adam({"p": p}, lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    state = opt.state_dict()
    opt2 = mdl.Adam({"p": p}, lr=0.1)
    opt2.load_state_dict(state)
    assert opt2.t == 1
    np.testing.assert_array_equal(opt2.m["p"], opt.m["p"])
    np.testing.assert_array_equal(opt2.v["p"], opt.v["p"])


def test_uniqueness_optimization_decorrelates_heads():
    # 200 isolated steps on the uniqueness objective alone should
    # substantially reduce head correlations
    m = make_model(feature_dim=16, embed_dim=16, n_classes=4, n_concepts=8,
                   seed=11)
    heads = {k: v for k, v in m.params.items() if k.endswith("head.W")}

    def mean_abs_cos():
        ws = m.params["concept_head.W"].value
        ws = ws / np.linalg.norm(ws, axis=1, keepdims=True)
        gram = np.abs(ws @ ws.T)
        off = gram[~np.eye(len(gram), dtype=bool)]
        return float(off.mean())

    before = mean_abs_cos()
    opt = mdl.Adam(heads, lr=0.01)
    for _ in range(200):
        l_concept, l_class = mdl.uniqueness_losses(m)
        opt.zero_grad()
        ad.backward(l_concept + l_class)
        opt.step()
    after = mean_abs_cos()
    assert after < 0.5 * before
