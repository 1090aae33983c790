import json
from dataclasses import fields

import pytest

from engine.refinements import CASpec, CSSpec, MuDirectSpec, QPSpec, QUSpec, SSpec
from schema import SchemaError, load_model, load_session, load_spec, parse_session


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj, indent=2), encoding="utf-8")
    return p


PARTY = {
    "version": 1,
    "actions": ["Outdoor", "Indoor"],
    "states": ["Rain", "Sun"],
    "probabilities": [0.4, 0.6],
    "utilities": [[0.0, 1.0], [0.67, 0.57]],
}


@pytest.mark.parametrize("name, kind", [
    ("qu_rain.spec", QUSpec),
    ("qp_indoor.spec", QPSpec),
    ("cs_rain.spec", CSSpec),
    ("s_wind.spec", SSpec),
    ("qp_indoor_paperpdf.spec", MuDirectSpec),
    ("cs_rain_paperpdf.spec", MuDirectSpec),
])
def test_bundled_party2_specs_load(party2, spec_for, name, kind):
    assert isinstance(spec_for(name, party2), kind)


def test_bundled_party3_specs_load(party3, spec_for):
    assert isinstance(spec_for("ca_porch.spec", party3), CASpec)
    assert isinstance(spec_for("ca_porch_paperpdf.spec", party3), MuDirectSpec)


def test_probabilities_must_sum_to_one(tmp_path):
    bad = dict(PARTY, probabilities=[0.5, 0.4])
    with pytest.raises(SchemaError) as err:
        load_model(write(tmp_path, "bad.model", bad))
    assert err.value.location == "model.probabilities"
    assert "probabilities" in str(err.value)
    assert err.value.line is not None


def test_unknown_key_reports_path_and_line(tmp_path):
    bad = dict(PARTY, colour="blue")
    with pytest.raises(SchemaError) as err:
        load_model(write(tmp_path, "bad.model", bad))
    assert err.value.location == "model.colour"
    assert "(line" in str(err.value)


def test_missing_version(tmp_path):
    bad = {k: v for k, v in PARTY.items() if k != "version"}
    with pytest.raises(SchemaError, match="model.version"):
        load_model(write(tmp_path, "bad.model", bad))


def test_invalid_json_line(tmp_path):
    p = tmp_path / "broken.model"
    p.write_text('{\n  "version": 1,\n  "actions": [\n', encoding="utf-8")
    with pytest.raises(SchemaError) as err:
        load_model(p)
    assert err.value.line is not None and err.value.line >= 3


def test_missing_file(tmp_path):
    with pytest.raises(SchemaError, match="not found"):
        load_model(tmp_path / "nope.model")


def test_spec_errors_name_the_key(tmp_path, party2):
    spec = {"version": 1, "kind": "qp", "cells": [
        {"action": "Indoor", "state": "Rain", "dist": {"type": "uniform", "lo": 0.62, "hi": 0.72}},
        {"action": "Indoor", "state": "Hail", "dist": 0.5},
    ]}
    with pytest.raises(SchemaError) as err:
        load_spec(write(tmp_path, "bad.spec", spec), party2)
    assert err.value.location == "spec.cells[1].state"

    spec = {"version": 1, "kind": "qu", "pi": {"Rain": {"type": "uniform", "lo": 0.3}}}
    with pytest.raises(SchemaError) as err:
        load_spec(write(tmp_path, "bad2.spec", spec), party2)
    assert err.value.location == "spec.pi.Rain"

    with pytest.raises(SchemaError, match="spec.kind"):
        load_spec(write(tmp_path, "bad3.spec", {"version": 1, "kind": "zz"}), party2)


def test_spec_validation_errors_surface(tmp_path, party2):
    spec = {"version": 1, "kind": "ca", "label": "Indoor", "phi": {"Rain": 0.2, "Sun": 0.3}}
    with pytest.raises(SchemaError, match="already exists"):
        load_spec(write(tmp_path, "dup.spec", spec), party2)


def test_sessions_load(fixtures_dir):
    session = load_session(fixtures_dir / "party_greedy.session")
    assert [p.id for p in session.procedures] == ["forecast", "porch"]
    assert session.max_steps == 2 and session.seed == 7
    assert session.model.states == ("Rain", "Sun")
    coin = load_session(fixtures_dir / "coin_lookahead.session")
    assert coin.lookahead == 2 and coin.lookahead_samples == 64


def test_session_keeps_only_what_the_controller_reads(fixtures_dir):
    session = load_session(fixtures_dir / "party_greedy.session")
    assert {f.name for f in fields(session)} == {
        "model", "procedures", "costs", "max_steps", "seed", "lookahead", "lookahead_samples",
    }


def _session(**over):
    base = {
        "version": 1,
        "model": {k: v for k, v in PARTY.items() if k != "version"},
        "procedures": [{"id": "forecast", "kind": "qu", "state": "Rain", "width0": 0.4, "half_life": 10, "grid": [10]}],
        "costs": {"assessment": {"type": "zero"}},
        "max_steps": 3,
        "seed": 1,
    }
    base.update(over)
    return base


def test_session_errors(tmp_path):
    parse_session(_session(), tmp_path)
    proc = _session()["procedures"][0]
    with pytest.raises(SchemaError, match="duplicate"):
        parse_session(_session(procedures=[proc, proc]), tmp_path)
    with pytest.raises(SchemaError, match="lookahead"):
        parse_session(_session(lookahead=1), tmp_path)
    with pytest.raises(SchemaError, match="session.costs"):
        parse_session(_session(costs={"assessment": {"type": "hourly"}}), tmp_path)
    with pytest.raises(SchemaError, match="grid"):
        parse_session(_session(procedures=[dict(proc, grid=[0])]), tmp_path)
    with pytest.raises(SchemaError, match="HALT"):
        parse_session(_session(procedures=[dict(proc, id="HALT")]), tmp_path)


def test_fixed_procedure_rejects_mu_direct(tmp_path):
    fixed = {"id": "f", "kind": "fixed", "specs": [{"t": 1, "spec": {"kind": "mu-direct", "mu": [0.5]}}]}
    with pytest.raises(SchemaError, match="mu-direct"):
        parse_session(_session(procedures=[fixed]), tmp_path)
