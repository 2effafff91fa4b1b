import json

import pytest

from mmevent.corpus import TextArg, TextEventAnn, VideoArg, VideoEventAnn, BoundingBox
from mmevent.ontology import (
    Ontology,
    OntologyFormatError,
    OntologyValidationError,
    UnknownEventTypeError,
    default_ontology,
    load_ontology,
    roles_for,
    save_ontology,
    validate_annotation,
)


def test_default_has_sixteen_types():
    ont = load_ontology()
    assert len(ont) == 16
    assert len(set(ont.type_names)) == 16


@pytest.mark.parametrize("etype, roles", [
    ("Justice.ArrestJail", ["Jailer", "Detainee", "Crime", "Place"]),
    ("Conflict.Attack", ["Attacker", "Target", "Instrument", "Place"]),
    ("Movement.Transport", ["Transporter", "PassengerArtifact", "Vehicle", "Origin", "Destination"]),
])
def test_roles_for_schema_rows(etype, roles):
    assert roles_for(default_ontology(), etype) == roles


def test_unknown_type_lookup():
    with pytest.raises(UnknownEventTypeError):
        default_ontology().roles_for("NoSuchType")
    with pytest.raises(KeyError):
        default_ontology().get("NoSuchType")


def test_empty_file_rejected(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("# version: x\n\n")
    with pytest.raises(OntologyValidationError):
        load_ontology(p)


def test_malformed_line_reports_line(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("A\tr1,r2\nno tab here\n")
    with pytest.raises(OntologyFormatError) as e:
        load_ontology(p)
    assert e.value.line == 2


@pytest.mark.parametrize("text", ["A\tr1\nA\tr2\n", "A\tr1,r1\n"])
def test_duplicates_rejected(tmp_path, text):
    p = tmp_path / "dup.tsv"
    p.write_text(text)
    with pytest.raises(OntologyValidationError):
        load_ontology(p)


def test_json_mirror_matches_tab_format(tmp_path):
    ont = default_ontology()
    for name in ("o.json", "o.tsv"):
        save_ontology(ont, tmp_path / name)
        assert load_ontology(tmp_path / name) == ont
    assert json.loads((tmp_path / "o.json").read_text())["event_types"][0]["name"] == ont.type_names[0]


def test_bundled_json_mirror_agrees():
    from importlib import resources

    with resources.as_file(resources.files("mmevent").joinpath("data/ontology.json")) as p:
        assert load_ontology(p) == default_ontology()


def test_validate_annotation():
    ont = default_ontology()
    ok = TextEventAnn("s0", (0, 1), "Conflict.Attack", (TextArg((1, 2), "Attacker"),))
    assert validate_annotation(ok, ont) == []
    bad = TextEventAnn("s0", (0, 1), "Conflict.Attack", (TextArg((1, 2), "Detainee"),))
    [v] = validate_annotation(bad, ont)
    assert (v.kind, v.role) == ("role-not-in-schema", "Detainee")
    [u] = validate_annotation(VideoEventAnn("v0", "Foo.Bar", ()), ont)
    assert u.kind == "unknown-type"
    vid = VideoEventAnn("v0", "Justice.ArrestJail", (VideoArg("Jailer", 0, BoundingBox(0, 0, 1, 1)),))
    assert validate_annotation(vid, ont) == []


def test_all_roles_unique_and_ordered():
    ont = default_ontology()
    roles = ont.all_roles
    assert len(roles) == len(set(roles))
    for t in ont.type_names:
        assert set(ont.roles_for(t)) <= set(roles)
    assert Ontology.from_dict(ont.to_dict()) == ont
