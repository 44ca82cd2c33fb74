import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ipsvm.dataio import (
    CATEGORICAL, NUMERIC, DataFormatError, FeatureCodec, TrainingPartition, UnknownCategory, block_sizes,
    encode_and_partition, fit_codec, load_partition, parse_dense, parse_sparse, save_partition,
)


def test_parse_dense_first_seen_class_is_positive():
    data = parse_dense(io.StringIO("e,x,s\np,y,t\n"), label=0)
    assert data.n == 2 and data.raw_width == 2
    assert data.classes == ("e", "p")
    assert data.signs().tolist() == [1.0, -1.0]
    assert data.schema == [CATEGORICAL, CATEGORICAL]


def test_parse_dense_empty_input():
    with pytest.raises(DataFormatError, match="empty input"):
        parse_dense(io.StringIO(""), label=0)
    with pytest.raises(DataFormatError, match="empty input"):
        parse_dense(io.StringIO("\n  \n"), label=0)


def test_parse_dense_width_error_names_line():
    with pytest.raises(DataFormatError, match="line 1"):
        parse_dense(io.StringIO("a,1,2,3\nb,1,2\n"), label=0, schema=[NUMERIC, NUMERIC])
    with pytest.raises(DataFormatError, match="line 3"):
        parse_dense(io.StringIO("a,1,2\nb,1,2\nb,1\n"), label=0)


def test_parse_dense_class_count():
    with pytest.raises(DataFormatError, match="exactly two"):
        parse_dense(io.StringIO("a,1\na,2\n"), label=0)
    with pytest.raises(DataFormatError, match="exactly two"):
        parse_dense(io.StringIO("a,1\nb,2\nc,3\n"), label=0)


def test_parse_dense_header_label_by_name_and_numeric_inference():
    text = "x1,cls,x2\n1.5,yes,red\n-2,no,blue\n"
    data = parse_dense(io.StringIO(text), label="cls", header=True)
    assert data.feature_names == ["x1", "x2"]
    assert data.schema == [NUMERIC, CATEGORICAL]
    assert data.columns[0].tolist() == [1.5, -2.0]
    assert data.classes == ("yes", "no")


def test_parse_dense_comment_and_whitespace():
    text = "|header comment\n 1, a\n\n2 ,b\n"
    data = parse_dense(io.StringIO(text), label=-1, comment="|")
    assert data.n == 2 and data.labels == ["a", "b"]


def test_parse_dense_non_numeric_under_numeric_schema():
    with pytest.raises(DataFormatError, match="line 2"):
        parse_dense(io.StringIO("a,1\nb,x\n"), label=0, schema=[NUMERIC])


def test_parse_sparse_examples():
    data = parse_sparse(io.StringIO("+1 1:0.5 3:2.0\n"), 3)
    assert data.labels == ["+1"]
    assert [c[0] for c in data.columns] == [0.5, 0.0, 2.0]
    data = parse_sparse(io.StringIO("-1\n"), 2)
    assert data.labels == ["-1"] and [c[0] for c in data.columns] == [0.0, 0.0]


def test_parse_sparse_errors():
    with pytest.raises(DataFormatError, match="indices not increasing"):
        parse_sparse(io.StringIO("+1 3:1 2:1\n"), 3)
    with pytest.raises(DataFormatError, match="exceeds declared width"):
        parse_sparse(io.StringIO("+1 4:1\n"), 3)
    with pytest.raises(DataFormatError, match="unparseable"):
        parse_sparse(io.StringIO("+1 1:abc\n"), 3)
    with pytest.raises(DataFormatError, match="not \\+1 or -1"):
        parse_sparse(io.StringIO("2 1:1\n"), 3)


def test_fit_codec_examples():
    data = parse_dense(io.StringIO("a,1,e,5\nb,2,p,5\na,3,e,5\n"), label=0)
    codec = fit_codec(data)
    X = codec.encode(data)
    assert codec.m == 1 + 2 + 1
    # population std of [1, 2, 3] is sqrt(2/3), so the ends encode to -+sqrt(3/2)
    assert np.allclose(X[:, 0], [-np.sqrt(1.5), 0, np.sqrt(1.5)])
    assert X[:, 1:3].tolist() == [[1, 0], [0, 1], [1, 0]]
    assert X[:, 3].tolist() == [0, 0, 0]
    assert codec.columns[0].mean == 2.0 and codec.columns[0].std == np.std([1.0, 2.0, 3.0])
    assert codec.columns[2].std == 1.0


def test_codec_json_round_trip_and_unknown_policy():
    train = parse_dense(io.StringIO("a,x\nb,y\n"), label=0)
    codec = fit_codec(train)
    again = FeatureCodec.from_json(codec.to_json())
    assert again == codec
    test = parse_dense(io.StringIO("a,z\n"), label=0, classes=("a", "b"))
    with pytest.raises(UnknownCategory, match="unseen category"):
        codec.encode(test)
    assert codec.encode(test, unknown="zeros").tolist() == [[0.0, 0.0]]


def test_block_sizes_and_offsets():
    assert block_sizes(10, 3) == [4, 3, 3]
    X = np.arange(10.0)[:, None]
    d = np.ones(10)
    from ipsvm.dataio import split_signed
    parts = split_signed(X, d, 3)
    assert [p.global_offset for p in parts] == [0, 4, 7]
    with pytest.raises(ValueError):
        block_sizes(2, 3)
    with pytest.raises(ValueError):
        block_sizes(2, 0)


def test_single_partition_preserves_order_and_sign_identity():
    data = parse_dense(io.StringIO("+,1\n-,2\n+,3\n-,4\n"), label=0)
    codec = FeatureCodec.from_json([{"kind": NUMERIC, "mean": 0.0, "std": 1.0}])
    (part,) = encode_and_partition(data, codec, 1)
    assert part.Y[:, 0].tolist() == [1, -2, 3, -4]
    assert part.d.tolist() == [1, -1, 1, -1]


def test_identity_codec_signs_row():
    codec = FeatureCodec.from_json([{"kind": NUMERIC, "mean": 0.0, "std": 1.0}])
    data = parse_dense(io.StringIO("p,0\nn,2\n"), label=0)
    parts = encode_and_partition(data, codec, 1)
    assert parts[0].Y[1].tolist() == [-2.0]


def test_partition_is_immutable_and_round_trips(tmp_path):
    part = TrainingPartition.from_features(np.eye(3), np.array([1.0, -1.0, 1.0]), 5)
    with pytest.raises(ValueError):
        part.Y[0, 0] = 3.0
    save_partition(part, tmp_path / "p.npz")
    back = load_partition(tmp_path / "p.npz")
    assert np.array_equal(back.Y, part.Y) and np.array_equal(back.d, part.d) and back.global_offset == 5
    with pytest.raises(ValueError, match="exactly -1 or \\+1"):
        TrainingPartition(np.eye(2), np.array([1.0, 0.5]), 0)


@st.composite
def labelled_table(draw):
    n = draw(st.integers(2, 40))
    k = draw(st.integers(1, 4))
    kinds = draw(st.lists(st.sampled_from([NUMERIC, CATEGORICAL]), min_size=k, max_size=k))
    rows = []
    for j in range(n):
        label = "A" if j % 2 == 0 else "B"
        toks = []
        for kind in kinds:
            if kind == NUMERIC:
                toks.append(repr(draw(st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False))))
            else:
                toks.append(draw(st.sampled_from(["r", "g", "b"])))
        rows.append(",".join([label] + toks))
    return "\n".join(rows) + "\n", kinds


@given(labelled_table(), st.integers(1, 8))
def test_partition_cover_sign_identity_and_determinism(table, p):
    text, kinds = table
    data = parse_dense(io.StringIO(text), label=0, schema=kinds)
    p = min(p, data.n)
    codec = fit_codec(data)
    parts = encode_and_partition(data, codec, p)
    again = encode_and_partition(data, codec, p)
    idx = np.concatenate([np.arange(q.global_offset, q.global_offset + q.n_local) for q in parts])
    assert sorted(idx.tolist()) == list(range(data.n))
    assert [q.global_offset for q in parts] == sorted(q.global_offset for q in parts)
    sizes = [q.n_local for q in parts]
    assert max(sizes) - min(sizes) <= 1
    X = codec.encode(data)
    d = data.signs()
    for q, q2 in zip(parts, again):
        assert np.array_equal(q.Y, q2.Y)
        sl = slice(q.global_offset, q.global_offset + q.n_local)
        assert np.array_equal(q.Y, d[sl, None] * X[sl])
    for k, kind in enumerate(kinds):
        if kind == NUMERIC:
            col = X[:, sum(c.width for c in codec.columns[:k])]
            assert abs(col.mean()) <= 1e-12 * data.n * max(1.0, np.abs(col).max())
            if codec.columns[k].std != 1.0 or np.ptp(data.columns[k]) > 0:
                assert abs(col.std() - 1.0) < 1e-9 or np.ptp(data.columns[k]) == 0
