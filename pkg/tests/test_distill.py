import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddistill.distill import (
    ClassGroups,
    CompositeLossConfig,
    GDConfig,
    classify_groups,
    composite_loss,
    composite_terms,
    cross_predict,
    decompose,
    fc_kd,
    gd_loss,
    gd_loss_from_logits,
    gd_loss_graph,
    gd_terms_graph,
    kl_div,
    rc_kd,
    tc_kd,
)
from feddistill.nn import backward, cross_entropy, forward, small_mlp, softmax, split
from feddistill.nn.autograd import Tensor
from feddistill.nn.model import BoundModel, ConfigError

from .conftest import central_difference, max_relative_error


def random_probs(rng, c, floor=0.0):
    p = rng.dirichlet(np.ones(c))
    if floor:
        p = (p + floor) / (1 + c * floor)
    return p


def random_groups(rng, c):
    few_mask = rng.random(c) < 0.5
    return ClassGroups(frozenset(np.flatnonzero(~few_mask).tolist()), frozenset(np.flatnonzero(few_mask).tolist()), 0.1, c)


def oracle_group_kd(qg, ql, t, members, others):
    """Straight transcription over indices: inner sum over members minus t, plus lumped other-group term."""
    ng, nl = 1.0 - qg[t], 1.0 - ql[t]
    total = 0.0
    for i in members:
        if i == t:
            continue
        a, b = qg[i] / ng, ql[i] / nl
        if a > 0:
            total += a * math.log(a / b)
    lg = sum(qg[i] for i in others if i != t) / ng
    ll = sum(ql[i] for i in others if i != t) / nl
    if lg > 0:
        total += lg * math.log(lg / ll)
    return total


def oracle_kl(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


class TestGroups:
    def test_example(self):
        g = classify_groups([60, 40, 0, 0], 0.25)
        assert g.rich == {0, 1} and g.few == {2, 3}

    def test_gamma_extremes(self):
        assert classify_groups([3, 1, 2], 0.0).few == frozenset()
        assert classify_groups([3, 1, 2], 1.0).rich == frozenset()

    def test_strict_threshold(self):
        assert classify_groups([1, 1, 2], 0.5).rich == frozenset()
        assert classify_groups([1, 1, 2], 0.49).rich == {2}

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            classify_groups([0, 0, 0], 0.1)

    def test_invalid_groups(self):
        with pytest.raises(ValueError):
            ClassGroups({0, 1}, {1, 2}, 0.1)
        with pytest.raises(ValueError):
            ClassGroups({0}, {2}, 0.1, 3)

    @given(st.lists(st.integers(0, 50), min_size=2, max_size=12).filter(lambda c: sum(c) > 0), st.floats(0, 1))
    def test_exclusive_cover(self, counts, gamma):
        g = classify_groups(counts, gamma)
        for c in range(len(counts)):
            assert (c in g.rich) != (c in g.few)
            assert (c in g.rich) == (counts[c] / sum(counts) > gamma)


class TestDecompose:
    def test_example(self):
        d = decompose([0.5, 0.3, 0.2], 0, ClassGroups({0, 1}, {2}, 0.1))
        assert d.q_t == 0.5 and d.p_not_t == 0.5
        np.testing.assert_allclose(d.q_tilde, [0.0, 0.6, 0.4], atol=1e-15)
        assert d.p_tilde_r == pytest.approx(0.6, abs=1e-15)
        assert d.p_tilde_f == pytest.approx(0.4, abs=1e-15)

    def test_one_hot_degenerate(self):
        d = decompose([0.0, 1.0, 0.0], 1, ClassGroups({1}, {0, 2}, 0.1))
        assert d.q_t == 1.0 and d.p_not_t == 0.0 and d.degenerate
        assert np.all(d.q_tilde == 0) and d.p_tilde_f == 0 and d.p_tilde_r == 0

    def test_uniform(self):
        d = decompose(np.full(4, 0.25), 3, ClassGroups({0, 3}, {1, 2}, 0.1))
        np.testing.assert_allclose(d.q_tilde[:3], 1 / 3, atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 2**31 - 1))
    def test_invariants(self, c, seed):
        rng = np.random.default_rng(seed)
        p, g = random_probs(rng, c, 1e-6), random_groups(rng, c)
        t = int(rng.integers(c))
        d = decompose(p, t, g)
        assert abs(d.q_t + d.p_not_t - 1) < 1e-12
        assert abs(d.q_tilde.sum() - 1) < 1e-12
        assert abs(d.p_tilde_f + d.p_tilde_r - 1) < 1e-12


class TestKdTerms:
    def test_tc_example(self):
        g = ClassGroups({0}, {1}, 0.1)
        val = tc_kd(decompose([0.75, 0.25], 0, g), decompose([0.5, 0.5], 0, g))
        assert val == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-15)

    def test_kl_example(self):
        assert kl_div([0.75, 0.25], [0.5, 0.5]) == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-15)
        assert kl_div([0.2, 0.8], [0.2, 0.8]) == 0.0

    def test_identical_zero(self, rng):
        for _ in range(20):
            c = int(rng.integers(2, 9))
            p, g, t = random_probs(rng, c), random_groups(rng, c), int(rng.integers(c))
            d = decompose(p, t, g)
            assert tc_kd(d, d) == 0 and rc_kd(d, d, g) == 0 and fc_kd(d, d, g) == 0
            assert gd_loss(p, p, t, g, GDConfig(1.3, 0.7, 2.0)) <= 1e-10

    def test_rc_without_rich_others_is_zero(self, rng):
        g = ClassGroups({0}, {1, 2, 3}, 0.1)
        dg, dl = decompose(random_probs(rng, 4), 0, g), decompose(random_probs(rng, 4), 0, g)
        assert rc_kd(dg, dl, g) == pytest.approx(0.0, abs=1e-15)

    def test_brute_force_oracles(self, rng):
        for _ in range(200):
            c = int(rng.integers(2, 11))
            qg, ql = random_probs(rng, c, 1e-4), random_probs(rng, c, 1e-4)
            g, t = random_groups(rng, c), int(rng.integers(c))
            dg, dl = decompose(qg, t, g), decompose(ql, t, g)
            assert rc_kd(dg, dl, g) == pytest.approx(oracle_group_kd(qg, ql, t, g.rich, g.few), abs=1e-12)
            assert fc_kd(dg, dl, g) == pytest.approx(oracle_group_kd(qg, ql, t, g.few, g.rich), abs=1e-12)
            assert kl_div(qg, ql) == pytest.approx(oracle_kl(qg, ql), abs=1e-12)

    def test_fc_is_rc_of_swapped(self, rng):
        for _ in range(20):
            c = int(rng.integers(2, 8))
            qg, ql, g, t = random_probs(rng, c), random_probs(rng, c), random_groups(rng, c), int(rng.integers(c))
            s = g.swapped()
            assert fc_kd(decompose(qg, t, g), decompose(ql, t, g), g) == pytest.approx(
                rc_kd(decompose(qg, t, s), decompose(ql, t, s), s), abs=1e-14
            )

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 2**31 - 1))
    def test_non_negative(self, c, seed):
        rng = np.random.default_rng(seed)
        qg, ql = random_probs(rng, c), random_probs(rng, c)
        g, t = random_groups(rng, c), int(rng.integers(c))
        dg, dl = decompose(qg, t, g), decompose(ql, t, g)
        assert tc_kd(dg, dl) >= -1e-15
        assert rc_kd(dg, dl, g) >= -1e-12
        assert fc_kd(dg, dl, g) >= -1e-12
        assert kl_div(qg, ql) >= -1e-12


class TestGdLoss:
    def test_alpha_t_only_is_tc(self, rng):
        qg, ql, g = random_probs(rng, 5), random_probs(rng, 5), random_groups(rng, 5)
        assert gd_loss(qg, ql, 2, g, GDConfig(1.0, 0.0, 0.0)) == tc_kd(decompose(qg, 2, g), decompose(ql, 2, g))

    def test_kl_decomposition_identity(self, rng):
        for _ in range(200):
            c = int(rng.integers(2, 11))
            qg, ql, t = random_probs(rng, c, 1e-5), random_probs(rng, c, 1e-5), int(rng.integers(c))
            everyone = ClassGroups(set(range(c)), set(), 0.1)
            dg, dl = decompose(qg, t, everyone), decompose(ql, t, everyone)
            inner = sum(oracle_kl([dg.q_tilde[i]], [dl.q_tilde[i]]) for i in range(c) if i != t)
            assert kl_div(qg, ql) == pytest.approx(tc_kd(dg, dl) + dg.p_not_t * inner, abs=1e-10)

    def test_lumped_term_identity(self, rng):
        # GD with alpha = (1, p, p) exceeds KL by exactly the two lumped cross-group terms.
        for _ in range(200):
            c = int(rng.integers(2, 11))
            qg, ql = random_probs(rng, c, 1e-5), random_probs(rng, c, 1e-5)
            g, t = random_groups(rng, c), int(rng.integers(c))
            dg, dl = decompose(qg, t, g), decompose(ql, t, g)
            p = dg.p_not_t
            gd = gd_loss(qg, ql, t, g, GDConfig(1.0, p, p))
            lumped = oracle_kl([dg.p_tilde_f], [dl.p_tilde_f]) + oracle_kl([dg.p_tilde_r], [dl.p_tilde_r])
            assert gd - kl_div(qg, ql) == pytest.approx(p * lumped, abs=1e-10)

    def test_logit_entry_applies_temperature(self, rng):
        zg, zl, g = rng.normal(size=4), rng.normal(size=4), random_groups(rng, 4)
        cfg = GDConfig(0.2, 0.5, 1.0, temperature=3.0)
        assert gd_loss_from_logits(zg, zl, 1, g, cfg) == pytest.approx(
            gd_loss(softmax(zg, 3.0), softmax(zl, 3.0), 1, g, cfg), abs=1e-15
        )

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            GDConfig(alpha_r=-1.0)
        with pytest.raises(ConfigError):
            GDConfig(temperature=0.0)
        with pytest.raises(ConfigError):
            CompositeLossConfig(beta_E=float("nan"))


class TestGraphLevel:
    def test_matches_scalar(self, rng):
        n, c = 16, 6
        pg = np.stack([random_probs(rng, c) for _ in range(n)])
        pl = np.stack([random_probs(rng, c) for _ in range(n)])
        labels = rng.integers(0, c, size=n)
        pg[3] = np.eye(c)[labels[3]]  # degenerate teacher row
        g, cfg = random_groups(rng, c), GDConfig(0.3, 0.5, 1.0)
        terms = gd_terms_graph(pg, Tensor(pl, requires_grad=True), labels, g)
        for i in range(n):
            dg, dl = decompose(pg[i], labels[i], g), decompose(pl[i], labels[i], g)
            assert terms["tc"].data[i] == pytest.approx(tc_kd(dg, dl), abs=1e-12)
            assert terms["rc"].data[i] == pytest.approx(rc_kd(dg, dl, g), abs=1e-12)
            assert terms["fc"].data[i] == pytest.approx(fc_kd(dg, dl, g), abs=1e-12)
        batch = gd_loss_graph(pg, Tensor(pl), labels, g, cfg).data
        scalar = np.mean([gd_loss(pg[i], pl[i], labels[i], g, cfg) for i in range(n)])
        assert float(batch) == pytest.approx(scalar, abs=1e-12)

    def test_degenerate_student_finite_gradient(self):
        g = ClassGroups({0}, {1, 2}, 0.1)
        pl = Tensor(np.array([[1.0, 0.0, 0.0]]), requires_grad=True)
        loss = gd_loss_graph(np.array([[0.5, 0.3, 0.2]]), pl, [0], g, GDConfig())
        (grad,) = backward(loss, [pl])
        assert np.all(np.isfinite(grad))


def two_models(seed_g=1, seed_l=2, c=5, d=8, h=6):
    return small_mlp(c, in_dim=d, hidden=h, seed=seed_g), small_mlp(c, in_dim=d, hidden=h, seed=seed_l)


class TestCrossPredict:
    def test_same_model(self, rng):
        m, _ = two_models()
        p = cross_predict(m, m.copy(), rng.normal(size=(3, 8)))
        for y in (p.y_gl, p.y_lg, p.y_ll):
            np.testing.assert_array_equal(y, p.y_gg)

    def test_zero_local_classifier(self, rng):
        g, l = two_models()
        l.params[l.classifier_boundary]["weight"][:] = 0
        p = cross_predict(g, l, rng.normal(size=(3, 8)))
        np.testing.assert_allclose(p.y_gl, 0.2, atol=1e-15)
        np.testing.assert_allclose(p.y_ll, 0.2, atol=1e-15)

    def test_manual_composition(self, rng):
        g, l = two_models()
        x = rng.normal(size=(1, 8))
        p = cross_predict(g, l, x)
        eg, cg = split(g)
        el, cl = split(l)
        np.testing.assert_allclose(p.y_lg, softmax(cg.forward(el.forward(x))), atol=1e-15)
        np.testing.assert_allclose(p.y_gl, softmax(cl.forward(eg.forward(x))), atol=1e-15)
        np.testing.assert_allclose(p.y_ll, softmax(forward(l, x)[1]), atol=1e-15)
        np.testing.assert_allclose(p.y_gg.sum(axis=1), 1.0, atol=1e-12)

    def test_feature_mismatch(self, rng):
        g = small_mlp(5, in_dim=8, hidden=6)
        l = small_mlp(5, in_dim=8, hidden=7)
        with pytest.raises(ConfigError):
            cross_predict(g, l, rng.normal(size=(1, 8)))


def grads_of(term, preds):
    return backward(term, preds.local_params)


class TestCompositeLoss:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.g, self.l = two_models()
        self.x = rng.normal(size=(6, 8))
        self.y = rng.integers(0, 5, size=6)
        self.groups = ClassGroups({0, 1}, {2, 3, 4}, 0.2)

    def test_zero_betas_is_ce(self):
        p = cross_predict(self.g, self.l, self.x)
        loss = composite_loss(p, self.y, self.groups, CompositeLossConfig(0, 0, 0))
        assert float(loss.data) == pytest.approx(cross_entropy(softmax(forward(self.l, self.x)[1]), self.y), abs=1e-15)
        assert set(composite_terms(p, self.y, self.groups, CompositeLossConfig(0, 0, 0))) == {"ce"}

    def test_same_models(self):
        p = cross_predict(self.g, self.g.copy(), self.x)
        cfg = CompositeLossConfig(1.0, 0.3, 0.7)
        ce = cross_entropy(p.y_ll, self.y)
        assert float(composite_loss(p, self.y, self.groups, cfg).data) == pytest.approx(1.3 * ce, abs=1e-10)

    def test_recompose_from_terms(self):
        cfg = CompositeLossConfig(0.8, 0.3, 0.4, GDConfig(0.1, 0.5, 1.0))
        p = cross_predict(self.g, self.l, self.x)
        gd = lambda a, b: np.mean([gd_loss(a[i], b[i], self.y[i], self.groups, cfg.gd) for i in range(6)])  # noqa: E731
        expected = (
            cross_entropy(p.y_ll, self.y)
            + 0.8 * gd(p.y_gg, p.y_ll)
            + 0.3 * cross_entropy(p.y_lg, self.y)
            + 0.4 * gd(p.y_gg, p.y_gl)
        )
        assert float(composite_loss(p, self.y, self.groups, cfg).data) == pytest.approx(expected, abs=1e-12)

    def test_gradient_flow(self):
        cfg = CompositeLossConfig(1.0, 1.0, 1.0)
        p = cross_predict(self.g, self.l, self.x)
        terms = composite_terms(p, self.y, self.groups, cfg)
        boundary = self.l.classifier_boundary
        layer_of = [int(name.split(".")[0]) for name, _ in self.l.named_arrays()]
        ext_idx = [k for k, li in enumerate(layer_of) if li < boundary]
        cls_idx = [k for k, li in enumerate(layer_of) if li >= boundary]
        g_e = grads_of(terms["L_E"], p)
        assert all(np.all(g_e[k] == 0) for k in cls_idx)
        assert any(np.any(g_e[k] != 0) for k in ext_idx)
        g_fc = grads_of(terms["L_FC"], p)
        assert all(np.all(g_fc[k] == 0) for k in ext_idx)
        assert any(np.any(g_fc[k] != 0) for k in cls_idx)
        # global model is bound frozen: nothing from the loss reaches its arrays
        global_tensors = BoundModel(self.g, trainable=False).parameters()
        total = composite_loss(p, self.y, self.groups, cfg)
        assert all(np.all(gr == 0) for gr in backward(total, global_tensors))

    def test_global_model_untouched(self):
        before = self.g.flatten().copy()
        p = cross_predict(self.g, self.l, self.x)
        backward(composite_loss(p, self.y, self.groups, CompositeLossConfig()), p.local_params)
        assert np.array_equal(before, self.g.flatten())

    def test_finite_differences(self):
        rng = np.random.default_rng(11)
        g, l = small_mlp(6, in_dim=10, hidden=12, seed=0), small_mlp(6, in_dim=10, hidden=12, seed=1)
        for m in (g, l):
            for a in m.arrays():
                a[...] = rng.normal(0, 0.1, size=a.shape)
        x = rng.normal(size=(4, 10))
        y = rng.integers(0, 6, size=4)
        groups = random_groups(rng, 6)
        cfg = CompositeLossConfig(0.9, 0.4, 0.6, GDConfig(0.2, 0.5, 1.0, temperature=2.0))

        def value():
            return float(composite_loss(cross_predict(g, l, x), y, groups, cfg).data)

        p = cross_predict(g, l, x)
        analytic = backward(composite_loss(p, y, groups, cfg), p.local_params)
        numeric = central_difference(value, l.arrays())
        assert max_relative_error(analytic, numeric) < 1e-4
