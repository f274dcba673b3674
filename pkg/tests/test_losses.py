"""Pseudo-label selection, gating, and the combined objective."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_instance
from oracles import finite_difference_grads, max_rel_err
from usrn.clustering import Taxonomy
from usrn.errors import ConfigurationError, DataError
from usrn.grids import FeatureGrid, LabelGrid, ProbGrid
from usrn.losses import (
    GATE_TIE_TOL,
    LossWeights,
    class_mass,
    entropy_gated_select,
    entropy_map,
    select,
    selftrain_class_loss,
    selftrain_sub_loss,
    subclass_guided_select,
    supervised_loss,
    total_objective,
)
from usrn.netcore import ce_loss_and_grad, forward


def toy_taxonomy(num_classes=3, parents=(0, 0, 1, 2, 2), width=4):
    parents = np.asarray(parents)
    sizes = np.ones(len(parents), dtype=np.int64)
    class_sizes = np.bincount(parents, minlength=num_classes)
    return Taxonomy(num_classes, parents, np.zeros((len(parents), width)), sizes, class_sizes)


def prob_grid(rows, classes):
    arr = np.asarray(rows, dtype=np.float64).reshape(1, -1, classes)
    return ProbGrid(arr)


class TestSelect:
    def test_hand_case(self):
        probs = prob_grid([[0.8, 0.1, 0.1], [0.4, 0.3, 0.3]], 3)
        out = select(probs, 0.75)
        assert out.data.tolist() == [[0, 3]]

    def test_threshold_is_strict(self):
        probs = prob_grid([[0.75, 0.15, 0.10]], 3)
        assert select(probs, 0.75).data.tolist() == [[3]]
        assert select(probs, 0.74).data.tolist() == [[0]]

    def test_argmax_tie_takes_lowest_index(self):
        probs = prob_grid([[0.5, 0.5]], 2)
        assert select(probs, 0.4).data.tolist() == [[0]]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_coverage_shrinks_with_gamma(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.random((3, 4, 4))
        probs = ProbGrid(raw / raw.sum(axis=-1, keepdims=True))
        lo = select(probs, 0.4)
        hi = select(probs, 0.7)
        # every pixel kept at the high threshold is kept at the low one too
        assert np.all(lo.valid_mask() | ~hi.valid_mask())
        assert np.array_equal(lo.data[hi.valid_mask()], hi.data[hi.valid_mask()])


class TestClassMass:
    def test_hand_case(self):
        tax = toy_taxonomy(2, (0, 0, 1))
        out = class_mass(prob_grid([[0.2, 0.3, 0.5]], 3), tax)
        assert np.allclose(out.data, [[[0.5, 0.5]]])

    def test_mass_preserved(self):
        tax = toy_taxonomy()
        rng = np.random.default_rng(0)
        raw = rng.random((2, 3, 5))
        out = class_mass(ProbGrid(raw / raw.sum(-1, keepdims=True)), tax)
        assert np.allclose(out.data.sum(-1), 1.0)

    def test_width_mismatch(self):
        with pytest.raises(DataError):
            class_mass(prob_grid([[0.5, 0.5]], 2), toy_taxonomy())


class TestEntropyMap:
    def test_uniform(self):
        assert np.isclose(entropy_map(np.full((1, 1, 3), 1 / 3)), math.log(3)).all()

    def test_one_hot_is_zero(self):
        assert entropy_map(np.array([[[1.0, 0.0, 0.0]]]))[0, 0] == 0.0

    def test_half_half(self):
        assert np.isclose(entropy_map(np.array([[[0.5, 0.5]]]))[0, 0], math.log(2))


class TestGuidedSelect:
    def test_rare_class_rescue(self):
        # class head's argmax is 0, but the subclass head votes for class 1
        # and the class head is confident enough about class 1 to accept
        tax = toy_taxonomy()
        p_cls = prob_grid([[0.05, 0.85, 0.10]], 3)
        p_sub = prob_grid([[0.05, 0.05, 0.8, 0.05, 0.05]], 5)
        out = subclass_guided_select(p_cls, p_sub, tax, 0.75)
        assert out.data.tolist() == [[1]]
        assert select(p_cls, 0.75).data.tolist() == [[1]]  # here both agree
        p_cls2 = prob_grid([[0.55, 0.40, 0.05]], 3)
        # plain selection rejects (max 0.55 < gamma at 0.35 threshold no...)
        assert select(p_cls2, 0.35).data.tolist() == [[0]]
        out2 = subclass_guided_select(p_cls2, p_sub, tax, 0.35)
        assert out2.data.tolist() == [[1]]  # guide overrides the argmax

    def test_unconfident_parent_ignored(self):
        tax = toy_taxonomy()
        p_cls = prob_grid([[0.3, 0.4, 0.3]], 3)
        p_sub = prob_grid([[0.0, 0.0, 1.0, 0.0, 0.0]], 5)
        assert subclass_guided_select(p_cls, p_sub, tax, 0.75).data.tolist() == [[3]]

    def test_class_width_mismatch(self):
        with pytest.raises(DataError):
            subclass_guided_select(prob_grid([[0.5, 0.5]], 2),
                                   prob_grid([[0.2] * 5], 5), toy_taxonomy(), 0.5)


class TestGatedSelect:
    def _hand_grids(self):
        p_cls = ProbGrid(np.array([
            [[0.80, 0.10, 0.10], [0.50, 0.30, 0.20]],
            [[0.97, 0.02, 0.01], [0.50, 0.25, 0.25]],
        ]))
        p_sub = ProbGrid(np.array([
            [[0.90, 0.04, 0.03, 0.02, 0.01], [0.02, 0.02, 0.90, 0.03, 0.03]],
            [[0.20, 0.20, 0.20, 0.20, 0.20], [0.50, 0.00, 0.25, 0.25, 0.00]],
        ]))
        return p_cls, p_sub

    def test_hand_case_ignore_fallback(self):
        # (0,0) open+confident -> 0; (0,1) open but class 1 below gamma -> IGNORE
        # (1,0) sub head diffuse, gate closed -> IGNORE
        # (1,1) collapsed sub mass equals class probs: tie, closed -> IGNORE
        p_cls, p_sub = self._hand_grids()
        labels, open_mask = entropy_gated_select(p_cls, p_sub, toy_taxonomy(), 0.75)
        assert labels.data.tolist() == [[0, 3], [3, 3]]
        assert open_mask.tolist() == [[True, True], [False, False]]

    def test_hand_case_original_fallback(self):
        # closed pixels fall back to plain selection: (1,0) is confident
        p_cls, p_sub = self._hand_grids()
        labels, _ = entropy_gated_select(p_cls, p_sub, toy_taxonomy(), 0.75,
                                         fallback="original")
        assert labels.data.tolist() == [[0, 3], [0, 3]]

    def test_exact_tie_stays_closed(self):
        tax = toy_taxonomy(3, (0, 1, 2))  # identity collapse
        p = prob_grid([[0.5, 0.3, 0.2]], 3)
        _, open_mask = entropy_gated_select(p, prob_grid([[0.5, 0.3, 0.2]], 3), tax, 0.75)
        assert not open_mask[0, 0]

    def test_bad_fallback(self):
        p_cls, p_sub = self._hand_grids()
        with pytest.raises(ConfigurationError):
            entropy_gated_select(p_cls, p_sub, toy_taxonomy(), 0.75, fallback="retry")

    def test_lattice_sample_matches_reference(self):
        # 3-class probability vectors on a 0.05 lattice, identity taxonomy:
        # the gate must agree with a from-scratch entropy comparison
        tax = toy_taxonomy(3, (0, 1, 2))
        lattice = []
        for i in range(21):
            for j in range(21 - i):
                lattice.append((i * 0.05, j * 0.05, (20 - i - j) * 0.05))
        rng = np.random.default_rng(0)
        picks = rng.choice(len(lattice), size=30, replace=False)

        def ref_entropy(v):
            return -sum(x * math.log(x) for x in v if x > 0)

        for a in picks:
            for b in picks:
                p_cls = prob_grid([lattice[a]], 3)
                p_sub = prob_grid([lattice[b]], 3)
                _, open_mask = entropy_gated_select(p_cls, p_sub, tax, 0.75)
                expected = ref_entropy(lattice[b]) < ref_entropy(lattice[a]) - GATE_TIE_TOL
                assert open_mask[0, 0] == expected, (lattice[a], lattice[b])


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.gamma, w.lambda_u, w.lambda_sub) == (0.75, 1.0, 1.0)

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1, 1.5])
    def test_bad_gamma(self, gamma):
        with pytest.raises(ConfigurationError):
            LossWeights(gamma=gamma)

    def test_bad_lambda(self):
        with pytest.raises(ConfigurationError):
            LossWeights(lambda_u=-1)


class TestSupervisedLoss:
    def test_matches_composition(self):
        params, grid, y, y_sub = random_instance(0)
        w = LossWeights(lambda_sub=0.6)
        loss, grads = supervised_loss(params, grid, y, y_sub, w)
        lc, gc = ce_loss_and_grad(params, grid, y, "cls")
        ls, gs = ce_loss_and_grad(params, grid, y_sub, "sub", weight=0.6)
        assert np.isclose(loss.value, lc.value + ls.value)
        gc.add_(gs)
        for name in grads.arrays:
            assert np.allclose(grads.arrays[name], gc.arrays[name])

    def test_sub_term_optional(self):
        params, grid, y, _ = random_instance(1)
        loss, _ = supervised_loss(params, grid, y, None, LossWeights())
        lc, _ = ce_loss_and_grad(params, grid, y, "cls")
        assert loss.value == lc.value

    def test_finite_difference(self):
        params, grid, y, y_sub = random_instance(2, with_ignore=False)
        w = LossWeights(lambda_sub=0.8)
        _, grads = supervised_loss(params, grid, y, y_sub, w)
        numeric = finite_difference_grads(
            lambda p: supervised_loss(p, grid, y, y_sub, w)[0].value, params)
        assert max_rel_err(grads.arrays, numeric) < 1e-4


class TestSelftrainClass:
    def _unlabelled(self, seed=0):
        rng = np.random.default_rng(seed)
        weak = FeatureGrid(rng.normal(size=(3, 4, 3)))
        strong = FeatureGrid(weak.data + rng.normal(scale=0.1, size=weak.data.shape))
        return weak, strong

    def test_stop_gradient_contract(self):
        # gradients must equal a plain CE against the pseudo-labels held fixed
        params, _, _, _ = random_instance(3)
        weak, strong = self._unlabelled()
        w = LossWeights(gamma=0.4)
        loss, grads, _ = selftrain_class_loss(params, weak, strong, None, w, "plain")
        pseudo = select(forward(params, weak, "cls"), 0.4)
        ref_loss, ref_grads = ce_loss_and_grad(params, strong, pseudo, "cls", weight=1.0)
        assert loss.value == ref_loss.value
        for name in grads.arrays:
            assert np.array_equal(grads.arrays[name], ref_grads.arrays[name])

    def test_lambda_u_scales(self):
        params, _, _, _ = random_instance(4)
        weak, strong = self._unlabelled(1)
        l1, g1, _ = selftrain_class_loss(params, weak, strong, None,
                                         LossWeights(gamma=0.4, lambda_u=1.0), "plain")
        l2, g2, _ = selftrain_class_loss(params, weak, strong, None,
                                         LossWeights(gamma=0.4, lambda_u=2.0), "plain")
        assert np.isclose(l2.value, 2 * l1.value)
        for name in g1.arrays:
            assert np.allclose(g2.arrays[name], 2 * g1.arrays[name])

    def test_guided_needs_taxonomy(self):
        params, _, _, _ = random_instance(5)
        weak, strong = self._unlabelled()
        with pytest.raises(ConfigurationError):
            selftrain_class_loss(params, weak, strong, None, LossWeights(), "guided")

    def test_unknown_mode(self):
        params, _, _, _ = random_instance(5)
        weak, strong = self._unlabelled()
        with pytest.raises(ConfigurationError):
            selftrain_class_loss(params, weak, strong, toy_taxonomy(), LossWeights(), "loud")

    def test_gated_reports_open_fraction(self):
        params, _, _, _ = random_instance(6)
        weak, strong = self._unlabelled(2)
        _, _, info = selftrain_class_loss(params, weak, strong, toy_taxonomy(),
                                          LossWeights(gamma=0.4), "gated")
        assert 0.0 <= info["gate_open_fraction"] <= 1.0
        assert 0.0 <= info["pseudo_coverage"] <= 1.0

    def test_plain_mode_reports_nan_gate(self):
        params, _, _, _ = random_instance(7)
        weak, strong = self._unlabelled(3)
        _, _, info = selftrain_class_loss(params, weak, strong, None,
                                          LossWeights(gamma=0.4), "plain")
        assert math.isnan(info["gate_open_fraction"])


class TestSelftrainSub:
    def test_matches_composition(self):
        params, _, _, _ = random_instance(8)
        rng = np.random.default_rng(9)
        weak = FeatureGrid(rng.normal(size=(3, 4, 3)))
        strong = FeatureGrid(weak.data + 0.05)
        w = LossWeights(gamma=0.3, lambda_u=0.5, lambda_sub=0.4)
        loss, grads = selftrain_sub_loss(params, weak, strong, w)
        pseudo = select(forward(params, weak, "sub"), 0.3)
        ref_loss, ref_grads = ce_loss_and_grad(params, strong, pseudo, "sub", weight=0.2)
        assert np.isclose(loss.value, ref_loss.value)
        for name in grads.arrays:
            assert np.allclose(grads.arrays[name], ref_grads.arrays[name])


class TestTotalObjective:
    def _setup(self, seed=0):
        params, grid, y, y_sub = random_instance(seed, h=3, w=3)
        rng = np.random.default_rng(seed + 100)
        weak = FeatureGrid(rng.normal(size=(3, 3, 3)))
        strong = FeatureGrid(weak.data + rng.normal(scale=0.1, size=(3, 3, 3)))
        return params, (grid, y, y_sub), (weak, strong), toy_taxonomy()

    def test_parts_sum_to_total(self):
        params, labelled, unlabelled, tax = self._setup()
        w = LossWeights(gamma=0.4)
        loss, _, parts = total_objective(params, labelled, unlabelled, tax, w,
                                         sub_supervised=True, unlabelled_mode="gated",
                                         sub_selftrain=True)
        assert np.isclose(loss.value, parts["loss_sup"] + parts["loss_st"] + parts["loss_st_sub"])

    def test_supervised_only(self):
        params, labelled, _, _ = self._setup(1)
        w = LossWeights()
        loss, grads, parts = total_objective(params, labelled, None, None, w)
        ref, ref_grads = supervised_loss(params, labelled[0], labelled[1], None, w)
        assert loss.value == ref.value
        assert parts["loss_st"] == 0.0 and parts["loss_st_sub"] == 0.0
        assert math.isnan(parts["pseudo_coverage"])
        for name in grads.arrays:
            assert np.array_equal(grads.arrays[name], ref_grads.arrays[name])

    def test_validation(self):
        params, labelled, unlabelled, tax = self._setup(2)
        w = LossWeights()
        grid, y, _ = labelled
        with pytest.raises(ConfigurationError, match="subclass labels"):
            total_objective(params, (grid, y, None), None, None, w, sub_supervised=True)
        with pytest.raises(ConfigurationError, match="taxonomy"):
            total_objective(params, labelled, unlabelled, None, w, sub_selftrain=True)
        with pytest.raises(ConfigurationError, match="unlabelled"):
            total_objective(params, labelled, None, tax, w, unlabelled_mode="plain")
        with pytest.raises(ConfigurationError):
            total_objective(params, labelled, unlabelled, tax, w, unlabelled_mode="turbo")

    def test_finite_difference_full_stack(self):
        params, labelled, unlabelled, tax = self._setup(3)
        w = LossWeights(gamma=0.4, lambda_u=0.8, lambda_sub=0.7)
        kw = dict(sub_supervised=True, unlabelled_mode="gated", sub_selftrain=True)
        _, grads, _ = total_objective(params, labelled, unlabelled, tax, w, **kw)
        numeric = finite_difference_grads(
            lambda p: total_objective(p, labelled, unlabelled, tax, w, **kw)[0].value, params)
        assert max_rel_err(grads.arrays, numeric) < 1e-4

    def test_deterministic(self):
        params, labelled, unlabelled, tax = self._setup(4)
        w = LossWeights(gamma=0.4)
        kw = dict(sub_supervised=True, unlabelled_mode="guided", sub_selftrain=True)
        a = total_objective(params, labelled, unlabelled, tax, w, **kw)
        b = total_objective(params, labelled, unlabelled, tax, w, **kw)
        assert a[0].value == b[0].value
        for name in a[1].arrays:
            assert np.array_equal(a[1].arrays[name], b[1].arrays[name])
