import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_images, tiny_model
from pmgaft.errors import InputShapeError, ShapeError, UnsupportedTapError, ValidationError
from pmgaft.model import (HashTextEncoder, LinearImageEncoder, MLPImageEncoder, TwoTowerModel,
                          build_text_matrix, classify, encode_images, parameter_checksum,
                          penultimate_features, predict_probs, similarity)


def linear_model(bias=False, normalize=False):
    enc = LinearImageEncoder((1, 3, 3), dim=4, bias=bias).double()
    return TwoTowerModel(enc, HashTextEncoder(4).double(), normalize_embeddings=normalize)


class TestEncodeImages:
    def test_linear_encoder_matches_matrix_product(self):
        m = linear_model(bias=False)
        X = random_images(5, (1, 3, 3))
        W = m.image_encoder.proj.weight.detach().numpy()
        flat = ((X.numpy() - 0.5) / 0.25).reshape(5, -1)
        expected = np.array([[sum(flat[i, k] * W[j, k] for k in range(9)) for j in range(4)] for i in range(5)])
        np.testing.assert_allclose(encode_images(m, X).detach().numpy(), expected, atol=1e-12)

    def test_zero_input_bias_free_gives_zero_embeddings(self):
        enc = LinearImageEncoder((1, 3, 3), dim=4, bias=False, pixel_mean=0.0, pixel_std=1.0).double()
        m = TwoTowerModel(enc, HashTextEncoder(4).double())
        out = m.encode_images(torch.zeros(3, 1, 3, 3, dtype=torch.float64))
        assert torch.equal(out, torch.zeros(3, 4, dtype=torch.float64))

    def test_normalized_rows_have_unit_norm(self):
        m = tiny_model(normalize=True)
        out = m.encode_images(random_images(7))
        np.testing.assert_allclose(out.norm(dim=1).detach().numpy(), 1.0, atol=1e-6)

    def test_differentiable_wrt_images_and_parameters(self, small_model):
        X = random_images(2).requires_grad_(True)
        small_model.encode_images(X).sum().backward()
        assert X.grad is not None and X.grad.abs().sum() > 0
        assert small_model.image_encoder.fc1.weight.grad is not None

    def test_shape_mismatch(self, small_model):
        with pytest.raises(InputShapeError):
            small_model.encode_images(torch.zeros(2, 3, 4, 4, dtype=torch.float64))

    def test_non_finite_pixels(self, small_model):
        X = random_images(2)
        X[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValidationError):
            small_model.encode_images(X)


class TestTextMatrix:
    def test_prompts_use_template(self, monkeypatch):
        m = tiny_model()
        seen = []
        orig = m.text_encoder.forward

        def spy(prompts):
            seen.extend(prompts)
            return orig(prompts)

        monkeypatch.setattr(m.text_encoder, "forward", spy)
        m.build_text_matrix(["cat", "dog"])
        assert seen == ["This is a photo of a cat", "This is a photo of a dog"]

    def test_repeated_calls_bit_identical(self):
        m = tiny_model()
        a = m.build_text_matrix(["cat", "dog", "emu"]).matrix.clone()
        m._text_cache.clear()
        b = m.build_text_matrix(["cat", "dog", "emu"]).matrix
        assert torch.equal(a, b)

    def test_ten_classes_match_recomputation(self):
        m = tiny_model()
        names = [f"thing{i}" for i in range(10)]
        T = build_text_matrix(m, names)
        assert T.matrix.shape == (10, 6)
        enc = HashTextEncoder(6, seed=0).double()
        for i, name in enumerate(names):
            vecs = [enc.token_vector(t) for t in f"this is a photo of a {name}".split()]
            row = torch.stack(vecs).sum(0) @ enc.proj.T
            np.testing.assert_allclose(T.matrix[i].numpy(), row.numpy(), atol=1e-12)

    def test_row_order_follows_class_order(self):
        m = tiny_model()
        a = m.build_text_matrix(["x", "y"]).matrix
        b = m.build_text_matrix(["y", "x"]).matrix
        assert torch.equal(a[0], b[1]) and torch.equal(a[1], b[0])

    @pytest.mark.parametrize("names", [[], ["a", "a"]])
    def test_invalid_class_lists(self, names):
        with pytest.raises(ValidationError):
            tiny_model().build_text_matrix(names)

    def test_text_encoder_is_frozen(self):
        m = tiny_model()
        assert all(not p.requires_grad for p in m.text_encoder.parameters())


class TestSimilarity:
    def test_identity(self):
        e = torch.eye(2, dtype=torch.float64)
        assert torch.equal(similarity(e, e), e)

    def test_zero(self):
        assert torch.equal(similarity(torch.zeros(3, 4), torch.randn(5, 4)), torch.zeros(3, 5))

    def test_random_matches_dot_products(self, rng):
        I, T = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        S = similarity(torch.from_numpy(I), torch.from_numpy(T)).numpy()
        for i in range(3):
            for j in range(5):
                assert abs(S[i, j] - sum(I[i, k] * T[j, k] for k in range(4))) < 1e-6

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            similarity(torch.zeros(2, 3), torch.zeros(2, 4))

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 1000))
    def test_bilinear(self, a, b, seed):
        g = torch.Generator().manual_seed(seed)
        I1, I2, T = (torch.randn(3, 4, generator=g, dtype=torch.float64) for _ in range(3))
        lhs = similarity(a * I1 + b * I2, T)
        rhs = a * similarity(I1, T) + b * similarity(I2, T)
        assert torch.allclose(lhs, rhs, atol=1e-6)


class TestPredictProbs:
    def test_constant_row_is_uniform(self):
        P = predict_probs(torch.full((2, 4), 3.7, dtype=torch.float64), 55.0)
        np.testing.assert_allclose(P.numpy(), 0.25, atol=1e-12)

    def test_tiny_scale_is_uniform(self):
        P = predict_probs(torch.tensor([[1.0, -2.0, 5.0]], dtype=torch.float64), 1e-12)
        np.testing.assert_allclose(P.numpy(), 1 / 3, atol=1e-9)

    def test_hand_computed(self):
        P = predict_probs(torch.tensor([[math.log(2), 0.0]], dtype=torch.float64), 1.0)
        np.testing.assert_allclose(P.numpy(), [[2 / 3, 1 / 3]], atol=1e-9)

    def test_stable_for_huge_entries(self):
        S = torch.tensor([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4]], dtype=torch.float64)
        P = predict_probs(S, 100.0)
        assert torch.isfinite(P).all()
        np.testing.assert_allclose(P.sum(1).numpy(), 1.0, atol=1e-6)

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            predict_probs(torch.tensor([[float("inf"), 0.0]]), 1.0)

    def test_non_positive_scale_rejected(self):
        with pytest.raises(ValidationError):
            predict_probs(torch.zeros(1, 2), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
    def test_rows_sum_to_one(self, seed, scale):
        g = torch.Generator().manual_seed(seed)
        P = predict_probs(torch.randn(4, 6, generator=g, dtype=torch.float64), scale)
        np.testing.assert_allclose(P.sum(1).numpy(), 1.0, atol=1e-6)


class TestClassify:
    def test_argmax(self):
        assert classify(torch.tensor([[0.1, 0.7, 0.2]])).tolist() == [1]

    def test_tie_goes_to_lowest_index(self):
        assert classify(torch.tensor([[0.5, 0.5]])).tolist() == [0]
        assert classify(torch.tensor([[0.2, 0.4, 0.4]])).tolist() == [1]

    def test_matches_linear_scan(self, rng):
        P = rng.dirichlet(np.ones(7), size=40)
        P[::5, 3] = P[::5].max(1)  # inject ties
        expected = []
        for row in P:
            best = 0
            for j in range(1, len(row)):
                if row[j] > row[best]:
                    best = j
            expected.append(best)
        assert classify(torch.from_numpy(P)).tolist() == expected

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), t1=st.floats(1e-2, 1e2), t2=st.floats(1e-2, 1e2))
    def test_scale_invariance(self, seed, t1, t2):
        g = torch.Generator().manual_seed(seed)
        S = torch.randn(5, 4, generator=g, dtype=torch.float64)
        assert torch.equal(classify(predict_probs(S, t1)), classify(predict_probs(S, t2)))


class TestPenultimate:
    def test_two_layer_features_match_manual_forward(self):
        m = tiny_model()
        X = random_images(3)
        fc1 = m.image_encoder.fc1
        flat = ((X - 0.5) / 0.25).flatten(1)
        manual = torch.clamp(flat @ fc1.weight.T + fc1.bias, min=0)
        assert torch.allclose(penultimate_features(m, X), manual, atol=1e-12)

    def test_deterministic(self):
        m = tiny_model()
        X = random_images(3)
        assert torch.equal(m.penultimate_features(X), m.penultimate_features(X))

    def test_zero_input_bias_free(self):
        enc = MLPImageEncoder((1, 4, 4), hidden=5, dim=6, bias=False, pixel_mean=0.0, pixel_std=1.0)
        m = TwoTowerModel(enc, HashTextEncoder(6))
        assert torch.equal(m.penultimate_features(torch.zeros(2, 1, 4, 4)), torch.zeros(2, 5))

    def test_single_layer_has_no_tap(self):
        with pytest.raises(UnsupportedTapError):
            linear_model().penultimate_features(random_images(1, (1, 3, 3)))

    def test_patch_encoder_tap(self):
        m = tiny_model(kind="patch")
        feats = m.penultimate_features(random_images(2))
        emb = m.image_encoder.proj(feats)
        assert torch.allclose(emb, m.image_encoder(random_images(2)), atol=1e-12)


def test_checksum_changes_with_parameters(small_model):
    before = parameter_checksum(small_model)
    with torch.no_grad():
        small_model.image_encoder.fc2.bias.add_(1.0)
    assert parameter_checksum(small_model) != before


def test_toy_default_parameter_budget():
    m = tiny_model(kind="mlp", shape=(3, 16, 16), dim=32, hidden=48)
    assert sum(p.numel() for p in m.parameters()) <= 5e4
