import numpy as np
import pytest
from conftest import tiny_model_config

from hiq.autodiff import NEG_SENTINEL, ShapeError, Tensor, count_flops, no_grad, ops
from hiq.backbone import Backbone, project_channels
from hiq.camp import camp_targets_batch
from hiq.config import ConfigError, LossConfig, ModelConfig
from hiq.decoder import LevelDecoder, decode_level, logits_from_decoded
from hiq.hierarchy import from_branching
from hiq.losses import total_loss
from hiq.model import ContractError, FlatModel, HierarchicalModel, hierarchical_forward, loss_terms
from hiq.nn import Conv2d


def images(rng, n, size=32):
    return rng.normal(size=(n, 3, size, size))


class TestBackbone:
    def test_default_tap_sizes(self, rng):
        bb = Backbone(ModelConfig(), rng)
        assert bb.tap_sizes() == [32, 16, 8, 4]
        taps = bb(Tensor(images(rng, 1, 64)))
        assert [m.shape[-1] for m in taps.maps] == [32, 16, 8, 4]
        assert taps.penultimate.shape == (1, 128)

    def test_zero_image_gives_zero_features(self, tiny_cfg, rng):
        taps = Backbone(tiny_cfg, rng)(Tensor(np.zeros((2, 3, 32, 32))))
        assert not taps.penultimate.data.any()

    def test_identical_images_identical_taps(self, tiny_cfg, rng):
        x = images(rng, 1)
        taps = Backbone(tiny_cfg, rng)(Tensor(np.concatenate([x, x])))
        for m in taps.maps:
            np.testing.assert_array_equal(m.data[0], m.data[1])

    def test_wrong_size_rejected(self, tiny_cfg, rng):
        with pytest.raises(ShapeError):
            Backbone(tiny_cfg, rng)(Tensor(images(rng, 1, 16)))

    def test_project_channels_hand_cases(self, rng):
        conv = Conv2d(2, 2, 1, rng)
        conv.weight.data[...] = np.eye(2).reshape(2, 2, 1, 1)
        x = Tensor(rng.normal(size=(1, 2, 3, 3)))
        np.testing.assert_allclose(project_channels(x, conv).data, x.data, atol=1e-15)
        conv.weight.data[...] = 0.0
        assert not project_channels(x, conv).data.any()
        conv.weight.data[...] = np.array([[1.0, 1.0], [2.0, -1.0]]).reshape(2, 2, 1, 1)
        out = project_channels(x, conv).data[0]
        np.testing.assert_allclose(out[0], x.data[0, 0] + x.data[0, 1], atol=1e-12)
        np.testing.assert_allclose(out[1], 2 * x.data[0, 0] - x.data[0, 1], atol=1e-12)


class TestDecoder:
    def test_zero_slots_rejected(self, rng):
        with pytest.raises(ConfigError):
            LevelDecoder(0, 4, 8, 2, rng)

    def test_zero_queries_rejected(self, rng):
        dec = LevelDecoder(1, 4, 8, 2, rng)
        with pytest.raises(ConfigError):
            decode_level(Tensor(np.zeros((0, 4, 2, 2))), Tensor(np.zeros((1, 8, 4, 4))), dec)

    @pytest.mark.parametrize("k", [1, 3, 6])
    def test_one_decoded_map_per_query(self, rng, k):
        dec = LevelDecoder(k, 4, 8, 2, rng)
        out = decode_level(Tensor(rng.normal(size=(2, k, 4, 2, 2))), Tensor(rng.normal(size=(2, 8, 4, 4))), dec)
        assert out.shape == (2, k, 8, 2, 2)
        assert logits_from_decoded(out, dec).shape == (2, k)

    def test_single_key_decoding(self, rng):
        dec = LevelDecoder(2, 4, 8, 2, rng)
        fused = Tensor(rng.normal(size=(1, 8, 1, 1)))
        queries = Tensor(rng.normal(size=(2, 4, 2, 2)))
        tokens = dec.query_tokens(queries).data.reshape(1, 8, 8)
        kv = dec.norm_kv(Tensor(fused.data.reshape(1, 1, 8))).data
        attended = tokens + (kv @ dec.attn.wv.weight.data) @ dec.attn.wo.weight.data
        maps = Tensor(attended.reshape(2, 4, 8).transpose(0, 2, 1).reshape(2, 8, 2, 2))
        expected = ops.relu(dec.refine2(ops.relu(dec.refine1(maps))))
        out = decode_level(queries, fused, dec)
        np.testing.assert_allclose(out.data[0], expected.data, atol=1e-12)

    def test_constant_map_unit_conv_gives_value(self, rng):
        dec = LevelDecoder(1, 4, 2, 1, rng)
        dec.logit.weight.data[...] = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        dec.logit.bias.data[...] = 0.0
        decoded = np.zeros((1, 1, 2, 3, 3))
        decoded[:, :, 0] = 2.5
        decoded[:, :, 1] = -7.0
        assert logits_from_decoded(Tensor(decoded), dec).data[0, 0] == pytest.approx(2.5, abs=1e-15)

    def test_hand_gap_logit(self, rng):
        dec = LevelDecoder(1, 4, 1, 1, rng)
        dec.logit.weight.data[...] = 2.0
        dec.logit.bias.data[...] = 0.5
        decoded = np.array([1.0, 2.0, 3.0, 6.0]).reshape(1, 1, 1, 2, 2)
        assert logits_from_decoded(Tensor(decoded), dec).data[0, 0] == pytest.approx(2.0 * 3.0 + 0.5)


@pytest.fixture
def model(tiny_cfg, rng):
    return HierarchicalModel(from_branching([2, 4, 3]), tiny_cfg, rng)


class TestHierarchicalForward:
    def test_shapes_and_sentinels(self, model, rng):
        with no_grad():
            out = hierarchical_forward(model, images(rng, 3), "train", [0, 1, 2])
        assert out.coarse_logits.shape == (3, 3)
        assert out.fine_logits_local.shape == (3, 4)
        local = out.fine_logits_local.data
        assert (local[0, 2:] == NEG_SENTINEL).all() and (local[0, :2] > NEG_SENTINEL).all()
        assert (local[1] > NEG_SENTINEL).all()
        assert local[2, 3] == NEG_SENTINEL

    def test_train_populates_only_parent_block(self, model, rng):
        with no_grad():
            out = hierarchical_forward(model, images(rng, 3), "train", [1, 0, 2])
        h = model.hierarchy
        for row, c in enumerate([1, 0, 2]):
            populated = np.nonzero(out.fine_logits_global[row] > NEG_SENTINEL)[0]
            assert set(populated) == set(h.subclass_mask(c).local_to_global)

    def test_train_requires_labels(self, model, rng):
        with pytest.raises(ContractError):
            hierarchical_forward(model, images(rng, 1), "train")

    def test_unknown_mode(self, model, rng):
        with pytest.raises(ContractError):
            hierarchical_forward(model, images(rng, 1), "eval")

    def test_infer_matches_train_with_chosen_parent(self, model, rng):
        x = images(rng, 4)
        with no_grad():
            inf = hierarchical_forward(model, x, "infer")
            tr = hierarchical_forward(model, x, "train", inf.chosen_coarse)
        np.testing.assert_array_equal(inf.fine_logits_local.data, tr.fine_logits_local.data)
        np.testing.assert_array_equal(inf.fine_logits_global, tr.fine_logits_global)

    def test_tie_resolves_to_lowest_id(self, model, rng):
        model.dec1.logit.weight.data[...] = 0.0
        with no_grad():
            out = hierarchical_forward(model, images(rng, 2), "infer")
        assert (out.chosen_coarse == 0).all()
        assert (out.predictions()[0] == 0).all()

    def test_other_coarse_queries_do_not_affect_fine_logits(self, model, rng):
        x = images(rng, 2)
        with no_grad():
            before = hierarchical_forward(model, x, "train", [1, 1]).fine_logits_local.data
            model.bank.q1.data[[0, 2]] += rng.normal(size=model.bank.q1.data[[0, 2]].shape)
            after = hierarchical_forward(model, x, "train", [1, 1]).fine_logits_local.data
        np.testing.assert_array_equal(before, after)

    def test_masked_slot_queries_change_nothing(self, model, rng):
        x = images(rng, 2)
        with no_grad():
            before = hierarchical_forward(model, x, "train", [0, 0])
            model.bank.q2_base.data[2:] += 5.0 * rng.normal(size=model.bank.q2_base.data[2:].shape)
            after = hierarchical_forward(model, x, "train", [0, 0])
        np.testing.assert_array_equal(before.coarse_logits.data, after.coarse_logits.data)
        np.testing.assert_array_equal(before.fine_logits_local.data, after.fine_logits_local.data)

    def test_gradients_reach_every_group(self, model, rng):
        h = model.hierarchy
        fine = np.array([h.fine_id(c, 0) for c in (0, 1, 2)])
        out = hierarchical_forward(model, images(rng, 3), "train", [0, 1, 2], use_camp=True)
        loss, _ = total_loss(loss_terms(out, [0, 1, 2], fine, camp_targets_batch(h, [0, 1, 2], fine)), LossConfig())
        loss.backward()
        for group, params in model.parameter_groups().items():
            assert any(np.abs(p.grad).sum() > 0 for p in params if p.grad is not None), group
        assert np.abs(model.backbone.stages[0][0].weight.grad).sum() > 0


class TestScalability:
    def test_level2_cost_independent_of_fine_count(self, tiny_cfg):
        counts, flops = [], []
        for branching in ([3] * 8, [3] * 16):
            h = from_branching(branching)
            m = HierarchicalModel(h, tiny_cfg, np.random.default_rng(0))
            counts.append(sum(p.size for p in m.level2_parameters()))
            x = np.random.default_rng(1).normal(size=(2, 3, 32, 32))
            with no_grad():
                taps = m.backbone(Tensor(x))
                with count_flops() as fc:
                    m.level2_decode(taps, np.array([0, 1]), "infer")
            flops.append(fc.total)
        assert h.n_fine == 48
        assert counts[0] == counts[1]
        assert flops[0] == flops[1] > 0


class TestFlatModel:
    def test_one_logit_per_fine_class(self, tiny_cfg, rng):
        m = FlatModel(from_branching([2, 3]), tiny_cfg, rng)
        assert m(images(rng, 2)).shape == (2, 5)

    def test_parameters_include_backbone(self, tiny_cfg, rng):
        names = [n for n, _ in FlatModel(from_branching([2]), tiny_cfg, rng).named_parameters()]
        assert any(n.startswith("backbone.stages.") for n in names)
