"""Encoders, the learned marginal, PCA, and the deterministic baselines."""

import numpy as np
import pytest

from vibtag.autodiff import value
from vibtag.data import Dataset, EmbeddingSequence, Sentence
from vibtag.dists import VAR_FLOOR
from vibtag.encoders import (
    BaselineSpec,
    EncoderParams,
    MarginalParams,
    default_hidden,
    encode_token,
    encode_type,
    jacobi_eigh,
    marginal,
    pca_fit,
    pca_unproject,
    project,
)
from vibtag.errors import ConfigError, VocabularyError


def tiny_dataset(x, seed=0):
    """One-sentence Dataset whose token layer is exactly `x`."""
    n, dim = x.shape
    sent = Sentence(id=0, tokens=tuple(f"w{i}" for i in range(n)),
                    heads=(0,) + tuple([1] * (n - 1)),
                    labels=("dep",) * n, pos=("X",) * n)
    layers = np.stack([x, x]).astype(np.float32)
    emb = EmbeddingSequence(sentence_id=0, layers=layers)
    return Dataset(pairs=((sent, emb),), token_layer=1)


class TestEncoder:
    def test_bad_mode(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            EncoderParams.init("fuzzy", 4, 3, rng)

    def test_default_hidden(self):
        assert default_hidden("continuous", 8) == 8
        assert default_hidden("discrete", 8) == 512

    def test_continuous_shapes_and_floor(self):
        rng = np.random.default_rng(1)
        theta = EncoderParams.init("continuous", 6, 4, rng)
        x = rng.standard_normal((5, 6))
        post = encode_token(theta, x)
        assert value(post.mean).shape == (5, 4)
        assert value(post.var).shape == (5, 4)
        assert np.all(value(post.var) >= VAR_FLOOR)

    def test_discrete_normalized(self):
        rng = np.random.default_rng(2)
        theta = EncoderParams.init("discrete", 6, 5, rng)
        post = encode_token(theta, rng.standard_normal((3, 6)))
        p = value(post.probs())
        assert p.shape == (3, 5)
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    def test_zero_weights_ignore_input(self):
        # with all parameters zeroed the posterior is input-independent
        rng = np.random.default_rng(3)
        theta = EncoderParams.init("continuous", 6, 3, rng)
        for p in theta.params():
            p.data = np.zeros_like(p.data)
        a = encode_token(theta, rng.standard_normal((4, 6)))
        b = encode_token(theta, rng.standard_normal((4, 6)))
        assert np.array_equal(value(a.mean), value(b.mean))
        assert np.array_equal(value(a.var), value(b.var))
        assert np.allclose(value(a.mean), 0.0)
        assert np.allclose(value(a.var), VAR_FLOOR)

    def test_dim_mismatch(self):
        rng = np.random.default_rng(4)
        theta = EncoderParams.init("continuous", 6, 3, rng)
        with pytest.raises(ValueError):
            encode_token(theta, rng.standard_normal((4, 7)))

    def test_type_encoder_same_architecture(self):
        rng = np.random.default_rng(5)
        xi = EncoderParams.init("discrete", 6, 4, rng)
        x = rng.standard_normal((2, 6))
        assert np.array_equal(
            value(encode_type(xi, x).logits), value(encode_token(xi, x).logits)
        )

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(6)
        theta = EncoderParams.init("continuous", 5, 3, rng)
        x = rng.standard_normal((2, 4, 5))
        batch = encode_token(theta, x)
        for b in range(2):
            single = encode_token(theta, x[b])
            assert np.allclose(value(batch.mean)[b], value(single.mean),
                               atol=1e-12)


class TestMarginal:
    def test_continuous_raw_split(self):
        rng = np.random.default_rng(7)
        psi = MarginalParams.init("continuous", 3, rng)
        m = marginal(psi)
        raw = value(psi.raw)
        assert np.array_equal(value(m.mean), raw[:3])
        assert np.allclose(value(m.var), raw[3:] ** 2 + VAR_FLOOR)

    def test_discrete_logits(self):
        rng = np.random.default_rng(8)
        psi = MarginalParams.init("discrete", 4, rng)
        m = marginal(psi)
        assert value(m.logits).shape == (4,)


class TestJacobi:
    def test_matches_lapack(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            n = int(rng.integers(2, 9))
            m = rng.standard_normal((n, n))
            a = m + m.T
            vals, vecs = jacobi_eigh(a)
            ref_vals, ref_vecs = np.linalg.eigh(a)
            ref_vals, ref_vecs = ref_vals[::-1], ref_vecs[:, ::-1]
            assert np.allclose(vals, ref_vals, atol=1e-9)
            # eigenvectors up to sign
            for j in range(n):
                dot = abs(ref_vecs[:, j] @ vecs[:, j])
                assert abs(dot - 1.0) < 1e-8

    def test_reconstructs_matrix(self):
        rng = np.random.default_rng(10)
        m = rng.standard_normal((6, 6))
        a = m @ m.T
        vals, vecs = jacobi_eigh(a)
        assert np.allclose(vecs @ np.diag(vals) @ vecs.T, a, atol=1e-9)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestPCA:
    def test_full_rank_round_trip(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((40, 5))
        spec = pca_fit(tiny_dataset(x), 5)
        z = project(spec, x=x)
        assert np.allclose(pca_unproject(spec, z), x, atol=1e-8)

    def test_finds_dominant_direction(self):
        rng = np.random.default_rng(12)
        u = np.array([3.0, 4.0]) / 5.0
        x = np.outer(rng.standard_normal(200) * 10.0, u)
        x += rng.standard_normal(x.shape) * 0.01
        spec = pca_fit(tiny_dataset(x), 1)
        assert abs(abs(spec.projection[0] @ u) - 1.0) < 1e-3

    def test_orthonormal_rows(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((30, 6))
        spec = pca_fit(tiny_dataset(x), 3)
        gram = spec.projection @ spec.projection.T
        assert np.allclose(gram, np.eye(3), atol=1e-8)

    def test_d_too_large(self):
        rng = np.random.default_rng(14)
        with pytest.raises(ConfigError):
            pca_fit(tiny_dataset(rng.standard_normal((10, 3))), 4)


class TestBaselines:
    def test_identity(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((3, 4))
        out = project(BaselineSpec(kind="identity"), x=x)
        assert np.array_equal(out, x)

    def test_mlp_equals_encoder_mean(self):
        # the MLP baseline is exactly the continuous encoder's mean vector
        rng = np.random.default_rng(16)
        theta = EncoderParams.init("continuous", 5, 3, rng)
        spec = BaselineSpec(kind="mlp", encoder=theta)
        x = rng.standard_normal((4, 5))
        assert np.array_equal(project(spec, x=x),
                              value(encode_token(theta, x).mean))

    def test_gold_pos_one_hot(self):
        spec = BaselineSpec(kind="gold_pos", tag_vocab=("A", "B", "C"))
        out = project(spec, pos=["B", "A", "B"])
        assert np.array_equal(out, [[0, 1, 0], [1, 0, 0], [0, 1, 0]])

    def test_gold_pos_unknown_tag(self):
        spec = BaselineSpec(kind="gold_pos", tag_vocab=("A",))
        with pytest.raises(VocabularyError):
            project(spec, pos=["Z"])

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            project(BaselineSpec(kind="mystery"), x=np.zeros((1, 2)))
