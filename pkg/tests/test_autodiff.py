"""Gradient engine tests.

Expected values come from three independent routes: closed-form hand
differentiation of tiny models, central finite differences, and consistency
between the batched and per-example gradient paths.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atlab import ad, models


def tiny_mlp(seed=0, layers=(4, 5, 3)):
    spec = models.ModelSpec(kind="mlp", layers=layers,
                            input_shape=(layers[0],), num_classes=layers[-1])
    return models.build_model(spec, rng=np.random.default_rng(seed))


def rand_batch(rng, model, b):
    x = rng.uniform(0.0, 1.0, size=(b,) + model.spec.input_shape)
    y = rng.integers(0, model.spec.num_classes, size=b)
    return x, y


# ---------------------------------------------------------------- forward

def test_cross_entropy_two_class_closed_form():
    # Single affine 1->2 with weights [1, 0], bias 0, input x=1:
    # logits (1, 0), true label 0. CE = log(1 + e^{-1}), differentiated by hand.
    gb = ad.GraphBuilder((1,))
    h = gb.affine(gb.input_id, 2, "fc")
    g = gb.build(logits=h, loss="cross_entropy")
    params = ad.ParamVector.zeros(g.slots)
    params.view("fc.w")[...] = [[1.0, 0.0]]
    losses, logits = ad.forward(g, params, [[1.0]], [0])
    assert np.allclose(logits, [[1.0, 0.0]], atol=0)
    assert losses[0] == pytest.approx(0.31326168751822286, abs=1e-15)


def test_cross_entropy_uniform_logits_is_log_c():
    model = tiny_mlp()
    zeroed = ad.ParamVector.zeros(model.graph.slots)
    x = np.ones((3, 4))
    losses, _ = ad.forward(model.graph, zeroed, x, [0, 1, 2])
    assert np.allclose(losses, np.log(3.0), atol=1e-15)


def test_cross_entropy_stable_for_huge_logits():
    gb = ad.GraphBuilder((1,))
    h = gb.affine(gb.input_id, 2, "fc", bias=False)
    g = gb.build(logits=h, loss="cross_entropy")
    params = ad.ParamVector.zeros(g.slots)
    params.view("fc.w")[...] = [[1000.0, -1000.0]]
    losses, _ = ad.forward(g, params, [[1.0]], [0])
    assert losses[0] == pytest.approx(0.0, abs=1e-12)
    grad = ad.backward_batch(g, params, [[1.0]], [0])
    assert np.isfinite(grad).all()


def test_margin_loss_sign_tracks_misclassification():
    model = tiny_mlp(seed=3)
    g = model.graph.with_loss("margin")
    rng = np.random.default_rng(0)
    x, _ = rand_batch(rng, model, 16)
    _, logits = ad.forward(model.graph, model.params, x, np.zeros(16, int))
    pred = logits.argmax(axis=1)
    # Correct label: margin < 0 (unless there is an exact tie).
    losses_true, _ = ad.forward(g, model.params, x, pred)
    assert (losses_true < 0).all()
    # Wrong label: margin > 0.
    wrong = (pred + 1) % model.spec.num_classes
    losses_wrong, _ = ad.forward(g, model.params, x, wrong)
    assert (losses_wrong > 0).all()
    # Node value agrees with the standalone helper.
    assert np.allclose(losses_true, models.margin_loss(logits, pred), atol=0)


def test_loss_swap_keeps_params_and_logits():
    model = tiny_mlp(seed=1)
    g2 = model.graph.with_loss("margin")
    assert g2.slots == model.graph.slots
    rng = np.random.default_rng(1)
    x, y = rand_batch(rng, model, 4)
    _, logits_a = ad.forward(model.graph, model.params, x, y)
    _, logits_b = ad.forward(g2, model.params, x, y)
    assert np.array_equal(logits_a, logits_b)


# --------------------------------------------------------------- backward

def test_hand_differentiated_scalar_chain():
    # f(theta) = mean over batch of (theta * x)^2, via mul and sum nodes.
    # df/dtheta at theta=1, x=2 is 2*theta*x^2 = 8.
    gb = ad.GraphBuilder((1,))
    w = gb.affine(gb.input_id, 1, "scale", bias=False)  # theta * x
    sq = gb.mul(w, w, "square")
    loss_vec = gb.sum(sq, "per_ex")
    g = gb.build(loss_vec=loss_vec)
    params = ad.ParamVector.zeros(g.slots)
    params.view("scale.w")[...] = [[1.0]]
    grad = ad.backward_batch(g, params, [[2.0]], [0])
    assert grad == pytest.approx([8.0], abs=1e-15)


def test_backward_matches_finite_differences_mlp():
    model = tiny_mlp(seed=7)
    rng = np.random.default_rng(7)
    x, y = rand_batch(rng, model, 6)
    grad = ad.backward_batch(model.graph, model.params, x, y)
    fd = ad.finite_diff_gradient(model.graph, model.params, x, y, h=1e-6)
    assert np.max(np.abs(grad - fd)) < 1e-7


def test_backward_matches_finite_differences_margin():
    model = tiny_mlp(seed=11)
    g = model.graph.with_loss("margin")
    rng = np.random.default_rng(11)
    x, y = rand_batch(rng, model, 5)
    grad = ad.backward_batch(g, model.params, x, y)
    fd = ad.finite_diff_gradient(g, model.params, x, y, h=1e-6)
    assert np.max(np.abs(grad - fd)) < 1e-7


def test_backward_matches_finite_differences_convnet():
    spec = models.ModelSpec(kind="convnet", input_shape=(1, 8, 8), num_classes=3)
    model = models.build_model(spec, rng=np.random.default_rng(2))
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, size=(2, 1, 8, 8))
    y = np.array([0, 2])
    grad = ad.backward_batch(model.graph, model.params, x, y)
    fd = ad.finite_diff_gradient(model.graph, model.params, x, y, h=1e-6)
    assert np.max(np.abs(grad - fd)) < 1e-6


def test_input_grads_match_finite_differences():
    model = tiny_mlp(seed=5)
    rng = np.random.default_rng(5)
    x, y = rand_batch(rng, model, 3)
    gx = ad.input_grads(model.graph, model.params, x, y)
    h = 1e-6
    for b in range(3):
        for j in range(4):
            up, down = x.copy(), x.copy()
            up[b, j] += h
            down[b, j] -= h
            lu, _ = ad.forward(model.graph, model.params, up, y)
            ld, _ = ad.forward(model.graph, model.params, down, y)
            fd = (lu[b] - ld[b]) / (2 * h)
            assert gx[b, j] == pytest.approx(fd, abs=1e-7)


def test_per_example_rows_match_singleton_batches():
    model = tiny_mlp(seed=9, layers=(6, 8, 4))
    rng = np.random.default_rng(9)
    x, y = rand_batch(rng, model, 12)
    rows = ad.per_example_grads(model.graph, model.params, x, y)
    for i in range(12):
        single = ad.backward_batch(model.graph, model.params, x[i:i + 1], y[i:i + 1])
        assert np.max(np.abs(rows[i] - single)) < 1e-9


def test_per_example_rows_match_singletons_convnet():
    spec = models.ModelSpec(kind="convnet", input_shape=(1, 8, 8), num_classes=3)
    model = models.build_model(spec, rng=np.random.default_rng(4))
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, size=(3, 1, 8, 8))
    y = np.array([0, 1, 2])
    rows = ad.per_example_grads(model.graph, model.params, x, y)
    for i in range(3):
        single = ad.backward_batch(model.graph, model.params, x[i:i + 1], y[i:i + 1])
        assert np.max(np.abs(rows[i] - single)) < 1e-9


def test_grad_norms_match_explicit_rows():
    model = tiny_mlp(seed=13)
    rng = np.random.default_rng(13)
    x, y = rand_batch(rng, model, 10)
    rows = ad.per_example_grads(model.graph, model.params, x, y)
    norms = ad.per_example_grad_norms(model.graph, model.params, x, y)
    assert np.allclose(norms, np.linalg.norm(rows, axis=1), atol=1e-12)


def test_grad_norms_match_explicit_rows_convnet():
    spec = models.ModelSpec(kind="convnet", input_shape=(1, 8, 8), num_classes=3)
    model = models.build_model(spec, rng=np.random.default_rng(6))
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 1, size=(4, 1, 8, 8))
    y = np.array([0, 1, 2, 0])
    rows = ad.per_example_grads(model.graph, model.params, x, y)
    norms = ad.per_example_grad_norms(model.graph, model.params, x, y)
    assert np.allclose(norms, np.linalg.norm(rows, axis=1), atol=1e-12)


def test_batch_grad_is_mean_of_rows():
    model = tiny_mlp(seed=17)
    rng = np.random.default_rng(17)
    x, y = rand_batch(rng, model, 8)
    rows = ad.per_example_grads(model.graph, model.params, x, y)
    batch = ad.backward_batch(model.graph, model.params, x, y)
    assert np.max(np.abs(batch - rows.mean(axis=0))) < 1e-12


def test_weighted_backward_matches_weighted_row_mean():
    model = tiny_mlp(seed=19)
    rng = np.random.default_rng(19)
    x, y = rand_batch(rng, model, 8)
    w = rng.uniform(0.1, 1.0, size=8)
    rows = ad.per_example_grads(model.graph, model.params, x, y)
    got = ad.backward_batch(model.graph, model.params, x, y, weights=w)
    want = (w[:, None] * rows).mean(axis=0)
    assert np.max(np.abs(got - want)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_gradient_linearity_in_weights(a, b):
    # backward(a*w1 + b*w2) == a*backward(w1) + b*backward(w2)
    model = tiny_mlp(seed=23)
    rng = np.random.default_rng(23)
    x, y = rand_batch(rng, model, 4)
    w1 = rng.uniform(0.0, 1.0, size=4)
    w2 = rng.uniform(0.0, 1.0, size=4)
    g1 = ad.backward_batch(model.graph, model.params, x, y, weights=w1)
    g2 = ad.backward_batch(model.graph, model.params, x, y, weights=w2)
    combo = ad.backward_batch(model.graph, model.params, x, y,
                              weights=a * w1 + b * w2)
    assert np.max(np.abs(combo - (a * g1 + b * g2))) < 1e-10


def test_logit_jacobian_linear_model_is_weight_matrix():
    gb = ad.GraphBuilder((3,))
    h = gb.affine(gb.input_id, 4, "fc", bias=False)
    g = gb.build(logits=h, loss="cross_entropy")
    params = ad.ParamVector.zeros(g.slots)
    rng = np.random.default_rng(0)
    params.view("fc.w")[...] = rng.normal(size=(3, 4))
    jac = ad.logit_input_jacobian(g, params, rng.uniform(size=3))
    assert jac.shape == (4, 3)
    assert np.allclose(jac, params.view("fc.w").T, atol=1e-15)


def test_maxpool_ties_route_gradient_to_first_max():
    gb = ad.GraphBuilder((1, 2, 2))
    p = gb.maxpool2(gb.input_id, "pool")
    f = gb.flatten(p, "flat")
    loss_vec = gb.sum(f, "per_ex")
    g = gb.build(loss_vec=loss_vec)
    params = ad.ParamVector.zeros(g.slots)
    x = np.full((1, 1, 2, 2), 0.5)  # all four entries tie
    gx = ad.input_grads(g, params, x, [0])
    want = np.zeros((1, 1, 2, 2))
    want[0, 0, 0, 0] = 1.0
    assert np.array_equal(gx, want)


# ---------------------------------------------------------- determinism

def test_repeated_passes_are_bitwise_identical():
    model = tiny_mlp(seed=29)
    rng = np.random.default_rng(29)
    x, y = rand_batch(rng, model, 8)
    g1 = ad.backward_batch(model.graph, model.params, x, y)
    g2 = ad.backward_batch(model.graph, model.params, x, y)
    assert np.array_equal(g1, g2)
    r1 = ad.per_example_grads(model.graph, model.params, x, y)
    r2 = ad.per_example_grads(model.graph, model.params, x, y)
    assert np.array_equal(r1, r2)


def test_backward_pass_counter_counts_traversals():
    model = tiny_mlp()
    rng = np.random.default_rng(0)
    x, y = rand_batch(rng, model, 4)
    ad.counters.reset()
    ad.backward_batch(model.graph, model.params, x, y)
    assert ad.counters.backward == 1
    ad.per_example_grads(model.graph, model.params, x, y)
    ad.per_example_grad_norms(model.graph, model.params, x, y)
    ad.input_grads(model.graph, model.params, x, y)
    assert ad.counters.backward == 4


# -------------------------------------------------------------- failures

def test_unbatched_input_is_rejected_with_node_name():
    model = tiny_mlp()
    with pytest.raises(ad.ShapeError, match="input"):
        ad.forward(model.graph, model.params, np.ones(4), [0])


def test_wrong_feature_shape_is_rejected():
    model = tiny_mlp()
    with pytest.raises(ad.ShapeError):
        ad.forward(model.graph, model.params, np.ones((2, 5)), [0, 1])


def test_label_out_of_range_is_rejected():
    model = tiny_mlp()
    with pytest.raises(ad.ShapeError, match="labels"):
        ad.forward(model.graph, model.params, np.ones((1, 4)), [3])


def test_nonfinite_loss_reports_example_index():
    gb = ad.GraphBuilder((1,))
    h = gb.affine(gb.input_id, 2, "fc", bias=False)
    g = gb.build(logits=h, loss="cross_entropy")
    params = ad.ParamVector.zeros(g.slots)
    params.view("fc.w")[...] = [[np.nan, 0.0]]
    with pytest.raises(ad.NonFiniteError) as exc:
        ad.forward(g, params, [[1.0], [1.0]], [0, 1])
    assert exc.value.example == 0


def test_mismatched_param_layout_is_rejected():
    model = tiny_mlp()
    other = tiny_mlp(layers=(4, 6, 3))
    with pytest.raises(ad.ShapeError, match="layout"):
        ad.forward(model.graph, other.params, np.ones((1, 4)), [0])


def test_cycle_detection():
    gb = ad.GraphBuilder((2,))
    h = gb.affine(gb.input_id, 2, "fc")
    g = gb.build(logits=h)
    bad_nodes = list(g.nodes)
    node = bad_nodes[1]
    bad_nodes[1] = ad.Node(node.kind, node.name, (3,), slots=node.slots,
                           attrs=node.attrs, out_shape=node.out_shape)
    bad = ad.Graph(bad_nodes, g.input_id, g.logits_id, g.loss_vec_id,
                   g.loss_id, g.input_shape, g.num_classes, g.slots)
    with pytest.raises(ad.GraphError, match="later"):
        bad.validate()
