import numpy as np
import pytest

from areil.corpus import build_graph, dense_normalized_adjacency
from areil.errors import ConfigError, ShapeError
from areil.model import (
    Model,
    ModelConfig,
    apply_grl,
    attention_matrix,
    classification_loss,
    domain_classify,
    inter_domain_enhance,
    merge_user_embedding,
    predict_scores,
    propagate_and_concat,
    split_user_embedding,
)
from areil.numcore import grad_check


def toy_graph():
    return build_graph([(0, 0), (0, 1), (1, 1)], 2, 2)


def random_instance(seed, num_users=8, num_items_x=12, num_items_y=10,
                    embed_dim=8, layers=2, batch=16, **config_overrides):
    rng = np.random.default_rng(seed)

    def random_graph(num_items):
        pairs = set()
        for u in range(num_users):
            for i in rng.choice(num_items, size=3, replace=False):
                pairs.add((u, int(i)))
        return build_graph(sorted(pairs), num_users, num_items)

    graphs = {"x": random_graph(num_items_x), "y": random_graph(num_items_y)}

    def random_batch(num_items):
        return (
            rng.integers(0, num_users, batch),
            rng.integers(0, num_items, batch),
            rng.integers(0, 2, batch).astype(float),
        )

    batches = {"x": random_batch(num_items_x), "y": random_batch(num_items_y)}
    config = dict(
        embed_dim=embed_dim, gcn_layers=layers, gamma_s=0.9, gamma_t=0.9,
        lambda1=0.1, lambda2=0.01,
    )
    config.update(config_overrides)
    model = Model(
        ModelConfig(**config), num_users, num_items_x, num_items_y, seed=seed + 1000
    )
    return model, graphs, batches


def relu_margin(model, graphs):
    """Smallest |pre-activation| over all classifier branches."""
    per = model.forward_factors(graphs)
    weights = model.classifier_weights()
    margin = np.inf
    for mat in (per["x"]["specific"], per["y"]["specific"],
                per["x"]["enhanced"], per["y"]["enhanced"]):
        _, (_, pre, _) = domain_classify(weights, mat)
        margin = min(margin, np.abs(pre).min())
    return margin


def checkable_instance(index, **overrides):
    """Random instance whose classifier pre-activations clear the kink band.

    Central differences straddling a rectifier kink do not measure the
    derivative, so instances are redrawn until every pre-activation has a
    margin far larger than the probe step.
    """
    seed = index
    while True:
        model, graphs, batches = random_instance(seed, **overrides)
        if relu_margin(model, graphs) > 5e-4:
            return model, graphs, batches
        seed += 1000


def full_grad_check(model, graphs, batches, grl_coef=0.7, epsilon=1e-5):
    model.store.zero_grads()
    model.compute(graphs, batches, grl_coef, want_grads=True)
    anchor = model.grl_surrogate_anchor(graphs, grl_coef)
    loss = lambda store: model.compute(
        graphs, batches, grl_coef, want_grads=False, grl_surrogate=anchor
    ).l_total
    precise = lambda store: model.compute(
        graphs, batches, grl_coef, want_grads=False, grl_surrogate=anchor,
        dtype=np.longdouble,
    ).l_total
    return grad_check(loss, model.store, epsilon=epsilon, refine_loss_fn=precise)


class TestConfig:
    def test_no_arem_forces_unit_gammas(self):
        cfg = ModelConfig(gamma_s=0.8, gamma_t=0.85, variant="no_arem")
        assert cfg.gamma_s == 1.0 and cfg.gamma_t == 1.0

    def test_no_irlm_forces_zero_lambda1(self):
        assert ModelConfig(lambda1=0.5, variant="no_irlm").lambda1 == 0.0

    def test_no_graph_collapses_width(self):
        cfg = ModelConfig(embed_dim=64, gcn_layers=3, variant="no_graph")
        assert cfg.combined_dim == 64
        assert ModelConfig(embed_dim=64, gcn_layers=3).combined_dim == 256

    def test_odd_embed_dim_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(embed_dim=7)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError, match="no_such"):
            ModelConfig(variant="no_such")

    def test_gamma_range(self):
        with pytest.raises(ConfigError):
            ModelConfig(gamma_s=0.0)
        with pytest.raises(ConfigError):
            ModelConfig(gamma_t=1.5)


class TestPropagation:
    def test_zero_layers_identity(self):
        rng = np.random.default_rng(0)
        user = rng.standard_normal((2, 4))
        item = rng.standard_normal((2, 4))
        u_out, i_out = propagate_and_concat(toy_graph(), user, item, 0)
        assert np.array_equal(u_out, user)
        assert np.array_equal(i_out, item)

    def test_single_edge_one_layer(self):
        g = build_graph([(0, 0)], 1, 1)
        user = np.array([[1.0, 2.0]])
        item = np.array([[5.0, -3.0]])
        u_out, _ = propagate_and_concat(g, user, item, 1)
        assert u_out[0].tolist() == [1.0, 2.0, 5.0, -3.0]

    def test_two_layers_match_dense_oracle(self):
        rng = np.random.default_rng(1)
        g = toy_graph()
        user = rng.standard_normal((2, 3))
        item = rng.standard_normal((2, 3))
        dense = dense_normalized_adjacency(g)
        nodes = np.vstack([user, item])
        expect = np.hstack([nodes, dense @ nodes, dense @ dense @ nodes])
        u_out, i_out = propagate_and_concat(g, user, item, 2)
        assert np.abs(np.vstack([u_out, i_out]) - expect).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            propagate_and_concat(toy_graph(), np.zeros((3, 2)), np.zeros((2, 2)), 1)

    def test_dimension_split_commutation(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            g = toy_graph()
            d = 6
            user = rng.standard_normal((2, d))
            item = rng.standard_normal((2, d))
            u_out, _ = propagate_and_concat(g, user, item, 2)
            shared_after, _ = split_user_embedding(u_out, d)
            half, _ = split_user_embedding(np.vstack([user]), d)
            u_half, _ = propagate_and_concat(g, user[:, :3], item[:, :3], 2)
            assert np.array_equal(shared_after, u_half)


class TestSplit:
    def test_two_column_split(self):
        row = np.array([[1.0, 2.0]])
        shared, specific = split_user_embedding(row, 2)
        assert shared.tolist() == [[1.0]]
        assert specific.tolist() == [[2.0]]

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        mat = rng.standard_normal((5, 12))  # d=4, three blocks
        shared, specific = split_user_embedding(mat, 4)
        assert np.array_equal(merge_user_embedding(shared, specific, 4), mat)

    def test_widths_for_default_dims(self):
        mat = np.zeros((1, 4 * 64))  # d=64, K=3
        shared, specific = split_user_embedding(mat, 64)
        assert shared.shape[1] == 128
        assert specific.shape[1] == 128

    def test_odd_dimension_rejected(self):
        with pytest.raises(ConfigError):
            split_user_embedding(np.zeros((1, 3)), 3)


class TestEnhance:
    def test_gamma_one_returns_self(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal((3, 2))
        w = rng.standard_normal((4, 4))
        enhanced, _ = inter_domain_enhance(a, b, w, w, gamma=1.0)
        assert np.array_equal(enhanced, a)

    def test_hand_case(self):
        # one user, one shared feature each: self=(2), other=(1), identity
        # projections give attention [[4, 2], [2, 1]], column sums (6, 3),
        # gate = softmax((3,)) * 1 = (1), so enhanced = 0.9*2 + 0.1*1 = 1.9
        a = np.array([[2.0]])
        b = np.array([[1.0]])
        eye = np.eye(2)
        att = attention_matrix(a, b, eye, eye)
        assert att.tolist() == [[4.0, 2.0], [2.0, 1.0]]
        enhanced, _ = inter_domain_enhance(a, b, eye, eye, gamma=0.9)
        assert enhanced[0, 0] == pytest.approx(1.9, abs=1e-12)

    def test_zero_other_scales_self(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((4, 3))
        w = rng.standard_normal((6, 6))
        enhanced, _ = inter_domain_enhance(a, np.zeros_like(a), w, w, gamma=0.7)
        assert np.abs(enhanced - 0.7 * a).max() < 1e-12

    def test_gate_sums_to_width(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((5, 4))
        wq = rng.standard_normal((8, 8))
        wk = rng.standard_normal((8, 8))
        _, cache = inter_domain_enhance(a, b, wq, wk, gamma=0.9)
        sm, width = cache[5], cache[8]
        assert (sm * width).sum() == pytest.approx(width)

    def test_constant_distribution_gives_unit_gate(self):
        # zero projections make p constant, so the gate is all ones and the
        # commonality equals the other domain's embedding
        a = np.full((2, 3), 0.5)
        b = np.arange(6.0).reshape(2, 3)
        zero = np.zeros((6, 6))
        enhanced, _ = inter_domain_enhance(a, b, zero, zero, gamma=0.6)
        assert np.abs(enhanced - (0.6 * a + 0.4 * b)).max() < 1e-12

    def test_gamma_out_of_range(self):
        a = np.zeros((1, 2))
        w = np.zeros((4, 4))
        with pytest.raises(ConfigError):
            inter_domain_enhance(a, a, w, w, gamma=0.0)

    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            inter_domain_enhance(
                np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((6, 6)),
                np.zeros((6, 6)), 0.9,
            )
        with pytest.raises(ShapeError):
            inter_domain_enhance(
                np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 3)),
                np.zeros((3, 3)), 0.9,
            )


class TestGrlAndClassifier:
    def test_grl_forward_is_bit_exact_identity(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 5))
        assert apply_grl(x, 1.3) is x

    def test_zero_weights_give_half_probability(self):
        weights = (np.zeros((3, 2)), np.zeros(2), np.zeros((2, 1)), np.zeros(1))
        logits, _ = domain_classify(weights, np.ones((4, 3)))
        assert not logits.any()

    def test_hand_relu_case(self):
        weights = (np.array([[1.0]]), np.zeros(1), np.array([[1.0]]), np.zeros(1))
        logits, _ = domain_classify(weights, np.array([[2.5], [-3.0]]))
        assert logits[:, 0].tolist() == [2.5, 0.0]

    def test_row_independence(self):
        rng = np.random.default_rng(8)
        weights = (
            rng.standard_normal((4, 3)), rng.standard_normal(3),
            rng.standard_normal((3, 1)), rng.standard_normal(1),
        )
        row = rng.standard_normal((1, 4))
        single, _ = domain_classify(weights, row)
        double, _ = domain_classify(weights, np.vstack([row, row]))
        assert double[0, 0] == double[1, 0] == single[0, 0]

    def test_max_entropy_loss_is_four_ln_two(self):
        weights = (np.zeros((3, 2)), np.zeros(2), np.zeros((2, 1)), np.zeros(1))
        rng = np.random.default_rng(9)
        mats = [rng.standard_normal((5, 3)) for _ in range(4)]
        loss, _, _ = classification_loss(weights, *mats, grl_lambda=1.0)
        assert loss == pytest.approx(4 * np.log(2), abs=1e-12)

    def test_perfect_separation_drives_specific_loss_to_zero(self):
        # last affine layer saturates the logistic for +/- inputs
        weights = (
            np.array([[1.0, -1.0]]), np.zeros(2),
            np.array([[-60.0], [60.0]]), np.zeros(1),
        )
        spe_x = np.full((3, 1), 1.0)   # logit -60, prob ~ 0, label 0
        spe_y = np.full((3, 1), -1.0)  # logit +60, prob ~ 1, label 1
        sha = np.zeros((3, 1))
        loss, _, _ = classification_loss(weights, sha, sha, spe_x, spe_y,
                                         grl_lambda=1.0)
        # the two shared branches contribute exactly 2 ln 2 (logit 0)
        assert loss - 2 * np.log(2) < 1e-10

    def test_reversal_scales_input_gradients(self):
        rng = np.random.default_rng(10)
        weights = (
            rng.standard_normal((4, 3)), rng.standard_normal(3),
            rng.standard_normal((3, 1)), rng.standard_normal(1),
        )
        mats = [rng.standard_normal((6, 4)) for _ in range(4)]
        lam = 0.37
        _, rev, _ = classification_loss(weights, *mats, grl_lambda=lam)
        _, plain, _ = classification_loss(weights, *mats, grl_lambda=lam,
                                          reverse=False)
        for name in ("shared_x", "shared_y"):
            assert np.abs(rev[name] + lam * plain[name]).max() < 1e-12
        for name in ("specific_x", "specific_y"):
            assert np.array_equal(rev[name], plain[name])

    def test_zero_lambda_disconnects_shared_gradient(self):
        rng = np.random.default_rng(11)
        weights = (
            rng.standard_normal((4, 3)), rng.standard_normal(3),
            rng.standard_normal((3, 1)), rng.standard_normal(1),
        )
        mats = [rng.standard_normal((6, 4)) for _ in range(4)]
        _, grads, _ = classification_loss(weights, *mats, grl_lambda=0.0)
        assert not grads["shared_x"].any()
        assert grads["specific_x"].any()

    def test_domain_swap_symmetry(self):
        # swapping domain roles and negating the output layer leaves the
        # total classification loss unchanged
        rng = np.random.default_rng(12)
        weights = (
            rng.standard_normal((4, 3)), rng.standard_normal(3),
            rng.standard_normal((3, 1)), rng.standard_normal(1),
        )
        flipped = (weights[0], weights[1], -weights[2], -weights[3])
        sha_x, sha_y, spe_x, spe_y = (rng.standard_normal((6, 4)) for _ in range(4))
        original, _, _ = classification_loss(
            weights, sha_x, sha_y, spe_x, spe_y, grl_lambda=1.0)
        swapped, _, _ = classification_loss(
            flipped, sha_y, sha_x, spe_y, spe_x, grl_lambda=1.0)
        assert swapped == pytest.approx(original, rel=1e-12)


class TestPredict:
    def test_identical_unit_vectors(self):
        v = np.array([[1.0, 0.0]])
        assert predict_scores(v, v)[0] == 1.0

    def test_orthogonal(self):
        assert predict_scores(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))[0] == 0.0

    def test_hand_dot(self):
        assert predict_scores(np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]))[0] == 1.0

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            predict_scores(np.zeros((1, 2)), np.zeros((1, 3)))


class TestGradients:
    def test_full_model_matches_finite_differences(self):
        worst = 0.0
        for index in range(4):
            model, graphs, batches = checkable_instance(index)
            report = full_grad_check(model, graphs, batches)
            worst = max(worst, report.max_rel_error)
        assert worst < 1e-5

    def test_variants_match_finite_differences(self):
        for variant in ("no_arem", "no_irlm", "no_graph"):
            model, graphs, batches = checkable_instance(7, variant=variant)
            report = full_grad_check(model, graphs, batches)
            assert report.max_rel_error < 1e-5, variant

    def test_grl_backward_contract_on_embeddings(self):
        # analytic shared-branch gradients equal -lambda times the
        # reversal-disabled gradients, entry for entry
        model, graphs, batches = random_instance(20)
        per = model.forward_factors(graphs)
        lam = 0.61
        _, rev, _ = classification_loss(
            model.classifier_weights(),
            per["x"]["enhanced"], per["y"]["enhanced"],
            per["x"]["specific"], per["y"]["specific"], grl_lambda=lam,
        )
        _, plain, _ = classification_loss(
            model.classifier_weights(),
            per["x"]["enhanced"], per["y"]["enhanced"],
            per["x"]["specific"], per["y"]["specific"], grl_lambda=lam,
            reverse=False,
        )
        for name in ("shared_x", "shared_y"):
            assert np.abs(rev[name] + lam * plain[name]).max() < 1e-12


class TestAblationEquivalence:
    def test_unit_gammas_match_enhancement_free_path(self):
        base, graphs, batches = random_instance(30, gamma_s=1.0, gamma_t=1.0)
        ablated, _, _ = random_instance(30, variant="no_arem")
        # identical init seeds produce identical embeddings
        for name in ("user_x", "item_x", "user_y", "item_y"):
            assert np.array_equal(
                base.store[name].value, ablated.store[name].value
            )
        factors_full = base.user_item_factors(graphs)
        factors_ablated = ablated.user_item_factors(graphs)
        for tag in ("x", "y"):
            for a, b in zip(factors_full[tag], factors_ablated[tag]):
                assert np.array_equal(a, b)

    def test_no_graph_equals_zero_layers(self):
        flat, graphs, _ = random_instance(31, variant="no_graph")
        factors = flat.user_item_factors(graphs)
        user, item = factors["x"]
        # propagation disabled: width collapses to embed_dim, items raw,
        # and the specific user half passes through untouched
        assert user.shape[1] == flat.config.embed_dim
        assert np.array_equal(item, flat.store["item_x"].value)
        d = flat.config.embed_dim
        _, raw_specific = split_user_embedding(flat.store["user_x"].value, d)
        _, final_specific = split_user_embedding(user, d)
        assert np.array_equal(final_specific, raw_specific)
