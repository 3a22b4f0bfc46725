import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmcens.core import (
    DistanceMetric,
    EmbeddingSet,
    Template,
    aggregate_template,
    check_aligned,
    cosine_similarity,
    decode_embedding_set,
    distance,
    encode_embedding_set,
    l2_normalize,
    read_embedding_set,
    write_embedding_set,
)
from cmcens.errors import DegenerateVector, DimensionMismatch, FormatError, InvalidConfig

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def vectors(dim=st.integers(2, 12)):
    return dim.flatmap(lambda d: arrays(np.float64, d, elements=finite))


def _nondegenerate(v):
    return np.linalg.norm(v) > 1e-3


def random_set(rng, n=20, dim=8, model_id="m"):
    ids = rng.choice(10_000, size=n, replace=False)
    return EmbeddingSet(model_id, rng.standard_normal((n, dim)), rng.integers(0, 5, n), ids)


class TestNormalize:
    def test_pythagorean(self):
        np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8], atol=1e-15)

    def test_axis_aligned(self):
        np.testing.assert_array_equal(l2_normalize([0, 5]), [0.0, 1.0])

    def test_zero_vector(self):
        with pytest.raises(DegenerateVector):
            l2_normalize([0, 0])

    def test_rejects_non_finite_and_short(self):
        with pytest.raises(InvalidConfig):
            l2_normalize([1.0, np.nan])
        with pytest.raises(InvalidConfig):
            l2_normalize([1.0])

    @given(vectors())
    def test_unit_norm(self, v):
        if not _nondegenerate(v):
            return
        assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) < 1e-12


class TestDistance:
    @pytest.mark.parametrize("b, expected", [((0, 1), 1.0), ((1, 0), 0.0), ((-1, 0), 2.0)])
    def test_cosine_examples(self, b, expected):
        assert distance(DistanceMetric.COSINE, (1, 0), b) == pytest.approx(expected, abs=1e-15)

    def test_euclidean(self):
        assert distance("euclidean", (0, 0), (3, 4)) == 5.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            distance("cosine_distance", (1, 0), (1, 0, 0))

    def test_cosine_zero_norm(self):
        with pytest.raises(DegenerateVector):
            distance("cosine_distance", (0, 0), (1, 0))

    @given(st.integers(2, 10).flatmap(lambda d: st.tuples(arrays(np.float64, d, elements=finite),
                                                            arrays(np.float64, d, elements=finite))))
    def test_cosine_scale_free_and_bounded(self, ab):
        a, b = ab
        if not (_nondegenerate(a) and _nondegenerate(b)):
            return
        d = distance("cosine_distance", a, b)
        assert 0.0 <= d <= 2.0
        assert d == pytest.approx(distance("cosine_distance", l2_normalize(a), l2_normalize(b)), abs=1e-10)

    @given(st.integers(2, 10).flatmap(lambda d: arrays(np.float64, (3, d), elements=finite)))
    def test_triangle_inequality(self, abc):
        a, b, c = abc
        e = lambda x, y: distance("euclidean", x, y)
        assert e(a, c) <= e(a, b) + e(b, c) + 1e-9

    def test_cosine_similarity(self):
        assert cosine_similarity((1, 1), (2, 2)) == pytest.approx(1.0)


class TestTemplate:
    def test_identical_members(self):
        np.testing.assert_allclose(aggregate_template(Template(0, [[1, 0], [1, 0]])), [1, 0])

    def test_symmetric_pair(self):
        np.testing.assert_allclose(aggregate_template(Template(0, [[1, 0], [0, 1]])), [np.sqrt(0.5)] * 2)

    def test_cancelling_pair(self):
        with pytest.raises(DegenerateVector):
            aggregate_template(Template(0, [[1, 0], [-1, 0]]))

    def test_empty(self):
        with pytest.raises(InvalidConfig):
            Template(0, np.zeros((0, 3)))

    @given(vectors())
    def test_single_member(self, v):
        if not _nondegenerate(v):
            return
        np.testing.assert_allclose(aggregate_template(Template(1, [v])), l2_normalize(v), atol=1e-12)


class TestEmbeddingSet:
    def test_duplicate_ids(self):
        with pytest.raises(InvalidConfig):
            EmbeddingSet("m", np.ones((2, 3)), [0, 1], [5, 5])

    def test_misaligned(self):
        with pytest.raises(DimensionMismatch):
            EmbeddingSet("m", np.ones((2, 3)), [0], [1, 2])

    def test_non_finite(self):
        with pytest.raises(InvalidConfig):
            EmbeddingSet("m", [[np.inf, 0.0]], [0], [0])

    def test_immutable(self):
        s = random_set(np.random.default_rng(0))
        with pytest.raises(ValueError):
            s.vectors[0, 0] = 1.0

    def test_check_aligned(self):
        rng = np.random.default_rng(1)
        a = random_set(rng)
        b = EmbeddingSet("other", rng.standard_normal((len(a), 4)), a.labels, a.item_ids)
        check_aligned([a, b])
        with pytest.raises(InvalidConfig):
            check_aligned([a, a.subset(slice(1, None))])


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        s = random_set(np.random.default_rng(2), model_id="gallery-ü")
        write_embedding_set(s, tmp_path / "s.cmce")
        assert read_embedding_set(tmp_path / "s.cmce") == s

    def test_class_manifest(self, tmp_path):
        rng = np.random.default_rng(3)
        s = EmbeddingSet("m", rng.standard_normal((3, 4)), [0, 1, 1], [0, 1, 2], {0: "ann", 1: "bob"})
        write_embedding_set(s, tmp_path / "s.cmce")
        assert read_embedding_set(tmp_path / "s.cmce").class_names == {0: "ann", 1: "bob"}

    def test_layout(self):
        s = EmbeddingSet("ab", [[1.0, -2.0]], [7], [9])
        buf = encode_embedding_set(s)
        assert buf[:4] == b"CMCE"
        assert struct.unpack_from("<III", buf, 4) == (1, 1, 2)
        assert struct.unpack_from("<H", buf, 16) == (2,)
        assert buf[18:20] == b"ab"
        assert struct.unpack_from("<IIff", buf, 20) == (9, 7, 1.0, -2.0)
        assert len(buf) == 20 + 16

    def test_bad_magic(self):
        buf = bytearray(encode_embedding_set(random_set(np.random.default_rng(4))))
        buf[:4] = b"XXXX"
        with pytest.raises(FormatError):
            decode_embedding_set(bytes(buf))

    def test_bad_version(self):
        buf = bytearray(encode_embedding_set(random_set(np.random.default_rng(4))))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(FormatError):
            decode_embedding_set(bytes(buf))

    def test_truncated(self):
        buf = encode_embedding_set(random_set(np.random.default_rng(5)))
        with pytest.raises(FormatError):
            decode_embedding_set(buf[:-7])
        with pytest.raises(FormatError):
            decode_embedding_set(buf[:10])

    def test_declared_dim_mismatch(self):
        buf = bytearray(encode_embedding_set(random_set(np.random.default_rng(6), n=4, dim=8)))
        buf[12:16] = struct.pack("<I", 6)
        with pytest.raises(DimensionMismatch):
            decode_embedding_set(bytes(buf))

    @settings(max_examples=50)
    @given(st.integers(0, 30), st.integers(2, 9), st.integers(0, 2**32 - 1),
           st.text(max_size=20))
    def test_bit_exact_property(self, n, dim, seed, model_id):
        rng = np.random.default_rng(seed)
        vec = rng.standard_normal((n, dim)).astype(np.float32)
        # exercise odd float bit patterns too
        if n:
            vec[0, 0] = np.float32(-0.0)
            vec[-1, -1] = np.finfo(np.float32).tiny
        ids = rng.choice(2**32, size=n, replace=False) if n else []
        s = EmbeddingSet(model_id, vec, rng.integers(0, 2**32, n), ids)
        back = decode_embedding_set(encode_embedding_set(s))
        assert back == s
        assert np.array_equal(back.vectors.view(np.uint32), vec.view(np.uint32))
