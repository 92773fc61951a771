from dataclasses import dataclass, field
from typing import Optional

import pytest
from hypothesis import given
from hypothesis import strategies as st

from contingency_games.config import ConfigError, apply_override, config_hash, from_dict, parse_override, to_dict


@dataclass
class Inner:
    a: float = 1.0
    tags: list[str] = field(default_factory=list)


@dataclass
class Outer:
    name: str
    inner: Inner = field(default_factory=Inner)
    n: int = 3
    extra: Optional[float] = None


def test_round_trip_and_coercion():
    obj = from_dict(Outer, {"name": "x", "inner": {"a": 2, "tags": ["p"]}, "n": 4.0})
    assert obj == Outer("x", Inner(2.0, ["p"]), 4)
    assert from_dict(Outer, to_dict(obj)) == obj


@pytest.mark.parametrize(
    "data,match",
    [
        ({"name": "x", "colour": 1}, "colour"),
        ({"name": 3}, "expected a string"),
        ({"name": "x", "n": 2.5}, "integer"),
        ({"name": "x", "inner": {"a": True}}, "number"),
        ({"name": "x", "inner": []}, "object"),
    ],
)
def test_strict_errors(data, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(Outer, data)


def test_parse_override_values():
    assert parse_override("a.b=1.5") == ("a.b", 1.5)
    assert parse_override("a=[1, 2]") == ("a", [1, 2])
    assert parse_override("a=text") == ("a", "text")
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_apply_override_paths():
    data = {"a": {"b": [1, {"c": 2}]}}
    apply_override(data, "a.b.1.c", 5)
    assert data["a"]["b"][1]["c"] == 5
    for bad in ("a.x", "a.b.7", "a.b.0.c"):
        with pytest.raises(ConfigError):
            apply_override(data, bad, 0)


@given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers(), max_size=5))
def test_hash_ignores_key_order(d):
    assert config_hash(dict(reversed(list(d.items())))) == config_hash(d)
