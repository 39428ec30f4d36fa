import numpy as np
import pytest

from fusioncast import encoders
from fusioncast.errors import ArgumentError


class TestHashFallback:
    def test_unit_norm(self):
        for text in ("a", "hello world", "x" * 500):
            v = encoders.hash_fallback(text, 16)
            assert abs(np.linalg.norm(v) - 1.0) < 1e-6

    def test_distinct_texts_differ(self):
        a = encoders.hash_fallback("a", 16)
        b = encoders.hash_fallback("b", 16)
        assert float(a @ b) < 0.99

    def test_one_dimensional(self):
        v = encoders.hash_fallback("anything", 1)
        assert v.shape == (1,)
        assert abs(abs(v[0]) - 1.0) < 1e-9

    def test_pure_function(self):
        assert np.array_equal(
            encoders.hash_fallback("same", 8), encoders.hash_fallback("same", 8)
        )

    def test_invalid_dim(self):
        with pytest.raises(ArgumentError):
            encoders.hash_fallback("x", 0)


class TestEncodeText:
    def test_token_rows(self):
        b = encoders.HashEncoderBackend(d_text=8)
        out = encoders.encode_text(b, "abc def ghi")
        assert out.matrix.shape == (3, 8)
        again = encoders.encode_text(b, "abc def ghi")
        assert np.array_equal(out.matrix, again.matrix)

    def test_empty_text_rejected(self):
        b = encoders.HashEncoderBackend(d_text=8)
        with pytest.raises(ArgumentError):
            encoders.encode_text(b, "")

    def test_collision_sweep(self):
        b = encoders.HashEncoderBackend(d_text=8)
        mats = [encoders.encode_text(b, f"text number {i}").matrix for i in range(100)]
        flat = {m.tobytes() for m in mats}
        assert len(flat) == 100

    def test_shape_contract_random_inputs(self):
        rng = np.random.default_rng(0)
        b = encoders.HashEncoderBackend(d_text=12, d_emb=20)
        for _ in range(100):
            n_words = int(rng.integers(1, 12))
            text = " ".join(f"w{rng.integers(0, 1000)}" for _ in range(n_words))
            assert encoders.encode_text(b, text).matrix.shape == (n_words, 12)
            assert encoders.embed_summary(b, text).vector.shape == (20,)


class TestEmbedSummary:
    def test_deterministic(self):
        b = encoders.HashEncoderBackend()
        a = encoders.embed_summary(b, "the same text")
        c = encoders.embed_summary(b, "the same text")
        assert np.array_equal(a.vector, c.vector)

    def test_self_cosine_is_one(self):
        b = encoders.HashEncoderBackend()
        v = encoders.embed_summary(b, "anything").vector
        assert abs(float(v @ v) - 1.0) < 1e-6

    def test_default_dimension_768(self):
        b = encoders.HashEncoderBackend()
        assert encoders.embed_summary(b, "abc").vector.shape == (768,)

    def test_norm_cached_matches(self):
        b = encoders.HashEncoderBackend(d_emb=32)
        emb = encoders.embed_summary(b, "check the cached norm")
        assert abs(emb.norm - np.linalg.norm(emb.vector)) < 1e-9


def test_make_backend_unknown():
    with pytest.raises(ArgumentError):
        encoders.make_backend("unknown-kind")
