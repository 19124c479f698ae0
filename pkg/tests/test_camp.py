import numpy as np
import pytest
from conftest import DATA_DIR

from hiq.autodiff import NEG_SENTINEL, Tensor, no_grad
from hiq.camp import CampHead, camp_forward, camp_refine, camp_scores, camp_targets, refine_logits
from hiq.config import ConfigError
from hiq.hierarchy import HierarchyError, from_branching, load_hierarchy
from hiq.losses import binary_cross_entropy_with_logits
from hiq.model import HierarchicalModel, hierarchical_forward


def identity_head(d):
    head = CampHead(d, d, d, np.random.default_rng(0))
    for lin in (head.query_proj, head.prior_proj):
        lin.weight.data[...] = np.eye(d)
    return head


class TestScores:
    def test_score_count(self, rng):
        h = from_branching([3, 1, 2, 3, 2])
        head = CampHead(4, 6, 3, rng)
        q1 = Tensor(rng.normal(size=(5, 1, 2, 2)))
        q2 = Tensor(rng.normal(size=(2, 3, 1, 2, 2)))
        assert h.N == (5, 11) and h.k[1] == 3
        assert camp_forward(q1, q2, Tensor(rng.normal(size=(2, 6))), head).shape == (2, 8)

    def test_orthogonal_is_zero(self):
        s = camp_scores(Tensor(np.array([[[1.0, 0.0]]])), Tensor(np.array([[0.0, 3.0]])), 1.0)
        assert s.data[0, 0] == 0.0

    def test_hand_score(self):
        head = identity_head(2)
        q1 = Tensor(np.array([1.0, 2.0]).reshape(1, 2, 1, 1))
        prior = Tensor(np.array([[3.0, -1.0]]))
        assert camp_forward(q1, None, prior, head).data[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_scale_multiplies(self, rng):
        qe, pe = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 4)))
        np.testing.assert_allclose(camp_scores(qe, pe, 0.5).data, 0.5 * camp_scores(qe, pe, 1.0).data)

    def test_width_mismatch(self, rng):
        with pytest.raises(ConfigError):
            camp_forward(Tensor(rng.normal(size=(2, 1, 2, 2))), None, Tensor(rng.normal(size=(1, 5))), CampHead(4, 6, 3, rng))


class TestTargets:
    def test_two_hot(self):
        h = from_branching([3, 1, 2, 3, 2])
        t = camp_targets(h, 2, h.fine_id(2, 1))
        assert np.nonzero(t)[0].tolist() == [2, 6]
        assert t.sum() == 2

    def test_wrong_parent_rejected(self):
        h = from_branching([2, 2])
        with pytest.raises(HierarchyError):
            camp_targets(h, 0, 3)

    def test_grocery_pepper_slot(self):
        h = load_hierarchy(DATA_DIR / "grocerystore_taxonomy.txt")
        pepper = h.coarse_names.index("Pepper")
        fine = h.fine_id(pepper, 3)
        t = camp_targets(h, pepper, fine)
        assert len(t) == 43 + 10
        assert np.nonzero(t)[0].tolist() == [pepper, 43 + 3]


class TestRefine:
    def test_zero_lambda_is_identity(self, rng):
        logits = rng.normal(size=(3, 4))
        assert refine_logits(logits, rng.normal(size=(3, 4)), 0.0) is logits

    def test_uniform_scores_keep_argmax(self, rng):
        logits = rng.normal(size=(5, 6))
        out = refine_logits(logits, np.full((5, 6), 0.3), 0.7)
        np.testing.assert_array_equal(out.argmax(1), logits.argmax(1))

    def test_hand_case(self):
        out = refine_logits(np.array([[1.0, 2.0]]), np.array([[0.0, np.log(3.0)]]), 1.0)
        np.testing.assert_allclose(out, [[1.0 + np.log(0.5), 2.0 + np.log(0.75)]], atol=1e-12)

    def test_sentinel_preserved(self):
        out = refine_logits(np.array([[0.0, NEG_SENTINEL]]), np.array([[1.0, 1.0]]), 0.5)
        assert out[0, 1] == NEG_SENTINEL

    def test_refine_output(self, tiny_cfg, rng):
        m = HierarchicalModel(from_branching([2, 3]), tiny_cfg, rng)
        with no_grad():
            out = hierarchical_forward(m, rng.normal(size=(2, 3, 32, 32)), "infer", use_camp=True)
        assert camp_refine(out, out.camp_scores, 0.0) is out
        refined = camp_refine(out, out.camp_scores, 1.0)
        assert refined.coarse_logits.shape == (2, 2)
        with pytest.raises(ConfigError):
            camp_refine(out, np.zeros((2, 3)), 1.0)


class TestGradients:
    def test_bce_reaches_prior_and_both_query_sets(self, rng):
        head = CampHead(4, 6, 3, rng)
        q1 = Tensor(rng.normal(size=(3, 1, 2, 2)), requires_grad=True)
        q2 = Tensor(rng.normal(size=(2, 2, 1, 2, 2)), requires_grad=True)
        prior = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
        h = from_branching([1, 2, 2])
        t = np.stack([camp_targets(h, 1, 2), camp_targets(h, 2, 3)])
        binary_cross_entropy_with_logits(camp_forward(q1, q2, prior, head), t).backward()
        for x in (q1, q2, prior):
            assert np.abs(x.grad).sum() > 0
