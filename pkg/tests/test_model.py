"""Energy network behaviour: shapes, determinism, non-causality, gradients."""

import numpy as np
import pytest

from ebmsynth import autodiff as ad
from ebmsynth.model import EnergyBreakdown, EnergyModel, ModelConfig, one_hot


TINY = ModelConfig(vocab_size=3, feature_dim=3, embed_dim=4, hidden_dim=4,
                   heads=2, encoder_layers=1, decoder_layers=1, head_hidden_dim=4)


@pytest.fixture(scope="module")
def tiny_model():
    return EnergyModel(TINY)


@pytest.fixture(scope="module")
def tiny_params(tiny_model):
    return tiny_model.init_params(np.random.default_rng(0))


def _zero_head(params):
    out = dict(params)
    for name in ("head.w1", "head.b1", "head.w2", "head.b2", "head.a", "head.b"):
        out[name] = np.zeros_like(params[name])
    return out


class TestConfig:
    def test_heads_must_divide_dims(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(vocab_size=4, feature_dim=3, embed_dim=6, hidden_dim=6, heads=4)

    def test_positive_dims_required(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=0, feature_dim=3)

    def test_roundtrip_dict(self):
        assert ModelConfig.from_dict(TINY.to_dict()) == TINY


class TestEncodeText:
    def test_single_token(self, tiny_model, tiny_params):
        memory = tiny_model.encode_text(tiny_params, [1])
        assert memory.shape == (1, TINY.hidden_dim)
        assert np.isfinite(memory).all()

    def test_token_order_matters(self, tiny_model, tiny_params):
        a = tiny_model.encode_text(tiny_params, [0, 2, 1])
        b = tiny_model.encode_text(tiny_params, [0, 1, 2])
        assert not np.allclose(a, b)

    def test_deterministic(self, tiny_model, tiny_params):
        a = tiny_model.encode_text(tiny_params, [0, 1, 2, 1])
        b = tiny_model.encode_text(tiny_params, [0, 1, 2, 1])
        assert a.tobytes() == b.tobytes()

    def test_rejects_out_of_range_ids(self, tiny_model, tiny_params):
        with pytest.raises(ValueError, match="out of range"):
            tiny_model.encode_text(tiny_params, [0, 3])


class TestDecodeFeatures:
    def test_single_frame(self, tiny_model, tiny_params):
        memory = tiny_model.encode_text(tiny_params, [0, 1])
        g = tiny_model.decode_features(tiny_params, memory, np.zeros((1, 3)))
        assert g.shape == (1, TINY.hidden_dim)

    def test_first_output_depends_on_last_frame(self, tiny_model, tiny_params):
        # non-causality: gradient of a g_1 component wrt the final frame
        nodes = tiny_model.energy_nodes(2, 4)
        out = ad.reduce_sum(ad.slice_(nodes["g"], [(0, 1), (0, 1)]))
        graph = ad.Graph(out)
        rng = np.random.default_rng(3)
        bound = {**tiny_params, "x": one_hot(np.array([0, 1]), 3),
                 "y": rng.normal(size=(4, 3))}
        grad = ad.gradients(graph, out, ["y"], leaf_values=bound)["y"]
        assert np.abs(grad[3]).max() > 0.0

    def test_duplicated_frame_stays_finite(self, tiny_model, tiny_params):
        rng = np.random.default_rng(4)
        memory = tiny_model.encode_text(tiny_params, [0, 1])
        Y = rng.normal(size=(3, 3))
        Y2 = np.vstack([Y, Y[-1:]])
        g = tiny_model.decode_features(tiny_params, memory, Y2)
        assert g.shape == (4, TINY.hidden_dim)
        assert np.isfinite(g).all()

    def test_dimension_mismatch_rejected(self, tiny_model, tiny_params):
        with pytest.raises(ValueError, match="memory"):
            tiny_model.decode_features(tiny_params, np.zeros((2, 5)), np.zeros((3, 3)))


class TestFrameEnergies:
    def test_zero_head_gives_zero_energies(self, tiny_model, tiny_params):
        params = _zero_head(tiny_params)
        e = tiny_model.frame_energies(params, np.random.default_rng(5).normal(size=(6, 4)))
        np.testing.assert_array_equal(e, np.zeros(6))

    def test_identity_passthrough_recovers_linear_head(self, tiny_model, tiny_params):
        params = dict(tiny_params)
        eye = np.eye(4)
        params["head.w1"] = eye
        params["head.w2"] = eye.copy()
        params["head.b1"] = np.zeros((1, 4))
        params["head.b2"] = np.zeros((1, 4))
        params["head.a"] = np.array([[1.0], [0.0], [0.0], [0.0]])
        params["head.b"] = np.zeros((1, 1))
        g = np.abs(np.random.default_rng(6).normal(size=(5, 4)))  # positive: relu inert
        e = tiny_model.frame_energies(params, g)
        np.testing.assert_allclose(e, g[:, 0], atol=1e-15)

    def test_row_permutation_equivariance(self, tiny_model, tiny_params):
        rng = np.random.default_rng(7)
        g = rng.normal(size=(5, 4))
        perm = rng.permutation(5)
        e = tiny_model.frame_energies(tiny_params, g)
        e_perm = tiny_model.frame_energies(tiny_params, g[perm])
        np.testing.assert_array_equal(e_perm, e[perm])


class TestUtteranceEnergy:
    def test_zero_weighting_is_mean_pooling(self, tiny_model, tiny_params):
        params = dict(tiny_params)
        params["weighting.v"] = np.zeros((1, 1))
        e = np.array([1.0, 2.0, 6.0])
        bd = tiny_model.utterance_energy(params, e)
        np.testing.assert_allclose(bd.weights, np.full(3, 1 / 3), atol=1e-15)
        assert abs(bd.energy - 3.0) < 1e-12

    def test_constant_energies_pool_to_constant(self, tiny_model, tiny_params):
        params = dict(tiny_params)
        params["weighting.v"] = np.array([[2.7]])
        bd = tiny_model.utterance_energy(params, np.full(7, -1.25))
        assert abs(bd.energy - (-1.25)) < 1e-12

    def test_softmax_weighting_values(self, tiny_model, tiny_params):
        # softmax([0, 10]): frozen from mpmath, alpha_0 = 4.5397868702434395e-05,
        # E = 9.999546021312976
        params = dict(tiny_params)
        params["weighting.v"] = np.array([[1.0]])
        bd = tiny_model.utterance_energy(params, np.array([0.0, 10.0]))
        assert abs(bd.weights[0] - 4.5397868702434395e-05) < 1e-15
        assert abs(bd.energy - 9.999546021312976) < 1e-12


class TestEnergy:
    def test_zero_head_zero_energy(self, tiny_model, tiny_params):
        params = _zero_head(tiny_params)
        rng = np.random.default_rng(8)
        bd = tiny_model.energy(params, [0, 1, 2], rng.normal(size=(5, 3)))
        assert bd.energy == 0.0

    def test_finite_on_random_inputs(self):
        config = ModelConfig(vocab_size=10, feature_dim=16)
        model = EnergyModel(config)
        rng = np.random.default_rng(9)
        params = model.init_params(rng)
        bd = model.energy(params, rng.integers(0, 10, size=5), rng.normal(size=(40, 16)))
        assert np.isfinite(bd.energy)
        assert np.isfinite(bd.frame_energies).all()

    def test_breakdown_consistency(self, tiny_model, tiny_params):
        rng = np.random.default_rng(10)
        for _ in range(20):
            ids = rng.integers(0, 3, size=int(rng.integers(1, 6)))
            Y = rng.normal(size=(int(rng.integers(1, 9)), 3))
            bd = tiny_model.energy(tiny_params, ids, Y)
            assert bd.weights.min() >= 0.0
            assert abs(bd.weights.sum() - 1.0) <= 1e-12
            assert abs(bd.energy - float(np.sum(bd.weights * bd.frame_energies))) < 1e-12

    def test_matches_composition_of_stages(self, tiny_model, tiny_params):
        rng = np.random.default_rng(11)
        ids = np.array([2, 0, 1])
        Y = rng.normal(size=(4, 3))
        memory = tiny_model.encode_text(tiny_params, ids)
        g = tiny_model.decode_features(tiny_params, memory, Y)
        e = tiny_model.frame_energies(tiny_params, g)
        bd_stage = tiny_model.utterance_energy(tiny_params, e)
        bd_full = tiny_model.energy(tiny_params, ids, Y)
        assert bd_full.energy == bd_stage.energy
        np.testing.assert_array_equal(bd_full.frame_energies, e)


class TestFeatureGradient:
    def test_zero_head_zero_gradient(self, tiny_model, tiny_params):
        params = _zero_head(tiny_params)
        grad = tiny_model.energy_grad_features(params, [0, 1], np.ones((4, 3)))
        np.testing.assert_array_equal(grad, np.zeros((4, 3)))

    def test_gradient_shape_matches_features(self, tiny_model, tiny_params):
        rng = np.random.default_rng(12)
        for frames in (1, 3, 7):
            Y = rng.normal(size=(frames, 3))
            grad = tiny_model.energy_grad_features(tiny_params, [0, 1], Y)
            assert grad.shape == Y.shape

    def test_matches_finite_differences(self, tiny_model, tiny_params):
        rng = np.random.default_rng(13)
        bundle = tiny_model._energy_bundle(2, 3)
        bound = {**tiny_params, "x": one_hot(np.array([0, 2]), 3),
                 "y": rng.normal(size=(3, 3))}
        err = ad.finite_difference_check(
            bundle.graph, bundle.nodes["energy"], "y", 1e-5, bound)
        assert err < 1e-4

    def test_some_param_groups_match_fd(self, tiny_model, tiny_params):
        # full sweep over every group runs in the acceptance suite
        rng = np.random.default_rng(14)
        bundle = tiny_model._energy_bundle(2, 3)
        bound = {**tiny_params, "x": one_hot(np.array([1, 0]), 3),
                 "y": rng.normal(size=(3, 3))}
        for name in ("embed", "dec0.cross.wq", "head.w1", "weighting.v", "enc0.ln1.g"):
            err = ad.finite_difference_check(
                bundle.graph, bundle.nodes["energy"], name, 1e-5, bound)
            assert err < 1e-4, f"{name}: {err}"

    def test_non_causal_frame_energies(self, tiny_model, tiny_params):
        # some earlier frame's energy depends on a later frame
        nodes = tiny_model.energy_nodes(2, 5)
        out = ad.reduce_sum(ad.slice_(nodes["e"], [(0, 1)]))
        graph = ad.Graph(out)
        rng = np.random.default_rng(15)
        bound = {**tiny_params, "x": one_hot(np.array([0, 1]), 3),
                 "y": rng.normal(size=(5, 3))}
        grad = ad.gradients(graph, out, ["y"], leaf_values=bound)["y"]
        assert np.abs(grad[1:]).max() > 0.0
