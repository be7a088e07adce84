import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from msc import io as mio
from msc.core import InvalidArgumentError
from msc.em import FitConfig, fit_msc
from msc.synth import SimSpec, simulate


def test_format_matrix_integers_and_floats():
    assert mio.format_matrix([[1, 2], [3, 4]]) == "# msc-matrix rows=2 cols=2\n1,2\n3,4\n"
    text = mio.format_matrix([[0.1, 2.0]])
    assert text.splitlines()[1] == "0.1,2.0"


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 16))
def test_matrix_round_trip_is_exact(n, m, seed):
    X = np.random.default_rng(seed).standard_normal((n, m)) * 1e3
    Y = mio.parse_matrix(mio.format_matrix(X))
    assert_array_equal(X, Y)
    assert mio.format_matrix(Y) == mio.format_matrix(X)


@pytest.mark.parametrize("text, msg", [
    ("", "empty"),
    ("1,2\n", "header"),
    ("# msc-matrix rows=2 cols=2\n1,2\n", "declares 2 rows"),
    ("# msc-matrix rows=1 cols=3\n1,2\n", "header declares 3"),
    ("# msc-matrix rows=1 cols=2\n1,x\n", "row 0"),
])
def test_parse_matrix_errors(text, msg):
    with pytest.raises(InvalidArgumentError, match=msg):
        mio.parse_matrix(text)


def test_dataset_writes_locations_companion(tmp_path):
    written = mio.write_dataset(tmp_path / "d.csv", np.ones((2, 3)), np.zeros((3, 2)))
    assert [p.name for p in written] == ["d.csv", "d.loc.csv"]
    assert mio.read_matrix(tmp_path / "d.loc.csv").shape == (3, 2)


def test_model_round_trip_is_byte_identical(tmp_path):
    data, _ = simulate(SimSpec(n=20, m=6, K=3, d=2, snr=3, spatial=True, seed=0))
    cfg = FitConfig(K=3, d_max=2, family="spatial", max_iter=10)
    model = mio.ModelFile.from_fit(fit_msc(data, cfg), cfg)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    mio.write_model(p1, model)
    back = mio.read_model(p1)
    mio.write_model(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    assert_array_equal(back.dictionary, model.dictionary)
    assert back.supports == model.supports and back.config == model.config


def test_model_rejects_wrong_format():
    with pytest.raises(InvalidArgumentError):
        mio.ModelFile.from_json('{"format": "other"}')
    with pytest.raises(InvalidArgumentError):
        mio.ModelFile.from_json("not json")


def test_pgm_round_trip(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    mio.write_pgm(tmp_path / "x.pgm", img)
    raw = (tmp_path / "x.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n") and len(raw) == 11 + 12
    assert_array_equal(mio.read_pgm(tmp_path / "x.pgm"), img)


def test_pgm_header_comments_and_errors(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# comment\n2 1\n255\n\x01\x02")
    assert_array_equal(mio.read_pgm(p), [[1, 2]])
    p.write_bytes(b"P5\n2 1\n65535\n\x00\x01\x00\x02")
    with pytest.raises(InvalidArgumentError, match="maxval"):
        mio.read_pgm(p)
    p.write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(InvalidArgumentError, match="pixels"):
        mio.read_pgm(p)
    p.write_bytes(b"P2\n1 1\n255\n1")
    with pytest.raises(InvalidArgumentError, match="binary"):
        mio.read_pgm(p)


def test_bundled_test_image():
    from importlib.resources import files
    img = mio.read_pgm(files("msc") / "data" / "test64.pgm")
    assert img.shape == (64, 64)
