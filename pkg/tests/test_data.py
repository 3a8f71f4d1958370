import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rtpen.data import (PROFILES, Sample, SamplingRule, Vocabulary, WeakSample, get_profile,
                        load_embedding_table, load_manifest, load_samples, load_video_features,
                        prepare_query, temporal_pool, write_embedding_table, write_video_features)
from rtpen.errors import (ArgumentError, ConfigError, DimensionError, EmptyQueryError, FormatError)


def _vocab():
    tokens = ["a", "b", "c", ",", "dog"]
    return Vocabulary(tokens, np.arange(len(tokens) * 3, dtype=np.float32).reshape(-1, 3))


@pytest.fixture
def vocab():
    return _vocab()


def test_feature_file_layout(tmp_path):
    path = tmp_path / "v.rtpf"
    values = np.arange(8, dtype="<f4")
    path.write_bytes(b"RTPF" + struct.pack("<II", 4, 2) + values.tobytes())
    video = load_video_features(path, expected_dim=2)
    np.testing.assert_array_equal(video.features, values.reshape(4, 2))
    assert video.video_id == "v"


def test_feature_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((7, 5)).astype(np.float32)
    write_video_features(tmp_path / "x.rtpf", x)
    y = load_video_features(tmp_path / "x.rtpf").features
    assert x.tobytes() == y.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 4)),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_feature_round_trip_property(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("rt") / "x.rtpf"
    write_video_features(path, x)
    assert load_video_features(path).features.tobytes() == x.tobytes()


def test_truncated_payload(tmp_path):
    path = tmp_path / "bad.rtpf"
    path.write_bytes(b"RTPF" + struct.pack("<II", 4, 2) + np.zeros(7, "<f4").tobytes())
    with pytest.raises(FormatError):
        load_video_features(path)


def test_bad_magic_and_short_header(tmp_path):
    (tmp_path / "m.rtpf").write_bytes(b"XXXX" + struct.pack("<II", 1, 1) + b"\0" * 4)
    with pytest.raises(FormatError):
        load_video_features(tmp_path / "m.rtpf")
    (tmp_path / "s.rtpf").write_bytes(b"RTPF\x01")
    with pytest.raises(FormatError):
        load_video_features(tmp_path / "s.rtpf")


def test_dimension_mismatch(tmp_path):
    write_video_features(tmp_path / "x.rtpf", np.zeros((3, 4), np.float32))
    with pytest.raises(DimensionError):
        load_video_features(tmp_path / "x.rtpf", expected_dim=5)


def test_temporal_pool_examples():
    np.testing.assert_array_equal(temporal_pool(np.array([[0.], [2.], [4.], [6.]]), 2), [[1.], [5.]])
    x = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(temporal_pool(x, 1), x)
    out = temporal_pool(x, 2)
    assert out.shape == (3, 3)
    np.testing.assert_array_equal(out[-1], x[4])
    with pytest.raises(ArgumentError):
        temporal_pool(x, 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 3)), elements=st.floats(-100, 100)))
def test_pool_with_full_stride_is_column_mean(x):
    np.testing.assert_allclose(temporal_pool(x, x.shape[0])[0], x.mean(axis=0), rtol=1e-12, atol=1e-12)


def test_prepare_query(vocab):
    assert prepare_query("a b a", vocab, 25).token_ids == [0, 1, 0]
    assert prepare_query("a zz b", vocab, 25).token_ids == [0, 1]
    q = prepare_query("Dog, a", vocab, 25)
    assert q.tokens == ["dog", ",", "a"]
    np.testing.assert_array_equal(q.embeddings, vocab.embeddings[[4, 3, 0]])
    with pytest.raises(EmptyQueryError):
        prepare_query("zz yy", vocab, 25)


def test_prepare_query_truncates_to_max_seq(vocab):
    text = " ".join(["a", "b", "c"] * 10)
    q = prepare_query(text, vocab, 25)
    assert q.n_q == 25
    assert q.tokens == text.split()[:25]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", ",", "dog"]), min_size=1, max_size=10), st.integers(1, 12))
def test_prepare_query_idempotent(tokens, max_seq):
    vocab = _vocab()
    once = prepare_query(tokens, vocab, max_seq)
    twice = prepare_query(once.tokens, vocab, max_seq)
    assert once.token_ids == twice.token_ids


def _manifest(tmp_path, lines, header="#profile=charades\n#split=test\n"):
    for name in ("v1", "v2"):
        write_video_features(tmp_path / f"{name}.rtpf", np.ones((8, 3), np.float32))
    path = tmp_path / "m.tsv"
    path.write_text(header + "\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_manifest_order_and_profile(tmp_path):
    path = _manifest(tmp_path, ["v1\tv1.rtpf\ta dog", "v2\tv2.rtpf\tb c\tgt=1.5,4", "v1\tv1.rtpf\tc"])
    m = load_manifest(path)
    assert [e.query_text for e in m.entries] == ["a dog", "b c", "c"]
    assert m.entries[1].gt_span == (1.5, 4.0)
    assert m.split == "test"
    p = m.dataset_profile
    assert (p.pooling_stride, p.conv_kernel, p.proposal_count_T) == (4, 3, 32)


def test_manifest_errors(tmp_path):
    path = _manifest(tmp_path, ["\tv1.rtpf\ta dog"])
    with pytest.raises(FormatError, match=":3"):
        load_manifest(path)
    path = _manifest(tmp_path, ["v1\tv1.rtpf\ta"], header="#profile=nope\n")
    with pytest.raises(ConfigError):
        load_manifest(path)
    path = _manifest(tmp_path, ["v1\tmissing.rtpf\ta"])
    with pytest.raises(FormatError):
        load_manifest(path)


def test_load_samples_pools_and_scales(tmp_path, vocab):
    path = _manifest(tmp_path, ["v1\tv1.rtpf\ta dog\tgt=0,8", "v1\tv1.rtpf\tb"])
    samples = load_samples(load_manifest(path), vocab)
    assert samples[0].video.n_v == 2          # 8 frames, stride 4
    assert samples[0].video.seconds_per_index == 4.0
    assert samples[0].video is samples[1].video


def test_weak_view_has_no_span(vocab):
    from rtpen.data import VideoFeatures
    s = Sample("s", VideoFeatures("v", np.ones((2, 3), np.float32)), prepare_query("a", vocab, 5), (0.0, 1.0))
    w = s.weak()
    assert isinstance(w, WeakSample)
    assert not hasattr(w, "ground_truth_span")


def test_embedding_table_round_trip(tmp_path, vocab):
    write_embedding_table(tmp_path / "e.rtpe", vocab)
    raw = (tmp_path / "e.rtpe").read_bytes()
    assert raw[:4] == b"RTPE" and struct.unpack("<II", raw[4:12]) == (5, 3)
    back = load_embedding_table(tmp_path / "e.rtpe")
    assert back.tokens == vocab.tokens
    np.testing.assert_array_equal(back.embeddings, vocab.embeddings)


def test_builtin_profiles():
    assert PROFILES["activitycaption"].pooling_stride == 8
    assert PROFILES["activitycaption"].max_seq == 25
    assert PROFILES["activitycaption"].sampling_rule == SamplingRule(8, 0)
    assert PROFILES["activitycaption"].proposal_count_T == 16
    assert PROFILES["charades"].max_seq == 20
    assert PROFILES["charades"].sampling_rule == SamplingRule(2, 1)
    assert PROFILES["didemo"].conv_kernel == 1 and PROFILES["didemo"].proposal_count_T == 6
    assert all(p.nms_threshold == 0.55 for p in PROFILES.values())
    assert SamplingRule.parse("mod(2)-odd") == SamplingRule(2, 1)
    assert SamplingRule.parse("mod(8)") == SamplingRule(8, 0)
    with pytest.raises(ConfigError):
        get_profile("charades", conv_kernel=5)
