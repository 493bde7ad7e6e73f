import pytest
from hypothesis import given, strategies as st

from hybopt import config as cf
from hybopt.errors import ConfigError


def test_defaults_cover_schema():
    d = cf.defaults()
    assert set(d) == set(cf.SCHEMA)
    assert d["selector.mode"] == "DTAP" and d["ablate.seeds"] == (0, 1, 2, 3, 4)


def test_parse_types_and_comments():
    c = cf.parse("""
        # comment
        selector.k = -0.05   # reversed
        bp.grad_clip = 10
        train.t_hi = none
        train.train_token = yes
        mem.ratios = 0.5, 1.0
        ablate.preset = 'main'
    """)
    assert c["selector.k"] == -0.05
    assert c["bp.grad_clip"] == 10.0 and c["train.t_hi"] is None
    assert c["train.train_token"] is True
    assert c["mem.ratios"] == (0.5, 1.0) and c["ablate.preset"] == "main"


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError) as err:
        cf.parse("selector.kk = 0.1")
    msg = str(err.value)
    assert "selector.kk" in msg
    assert all(k in msg for k in cf.SCHEMA)


def test_unknown_override_rejected():
    with pytest.raises(ConfigError):
        cf.load(None, {"zo.eps": "1"})


@pytest.mark.parametrize("text", ["selector.k 0.1", "train.i_max = ten", "train.train_token = maybe"])
def test_malformed_lines(text):
    with pytest.raises(ConfigError):
        cf.parse(text)


def test_text_round_trip_and_digest():
    c = cf.parse("zo.alpha = 0.003\nablate.ratios = 0.5 0.75")
    again = cf.parse(c.to_text())
    assert again == c and again.digest() == c.digest()
    assert cf.defaults().digest() != c.digest()


@given(st.integers(1, 10**6), st.floats(1e-6, 1.0))
def test_overrides_win(i_max, k):
    c = cf.load(None, {"train.i_max": str(i_max), "selector.k": repr(k)})
    assert c["train.i_max"] == i_max and c["selector.k"] == k


def test_section():
    assert set(cf.defaults().section("zo")) == {"epsilon", "alpha", "num_perturbations"}
