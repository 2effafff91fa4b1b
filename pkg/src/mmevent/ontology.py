"""Event ontology: event types, their argument-role schemas, and validation.

Two on-disk formats are supported. The line format has one event type per
line, ``EventType<TAB>Role1,Role2,...``, with ``#`` comments and an optional
``# version: <name>`` header. The JSON mirror is
``{"version": ..., "event_types": [{"name": ..., "roles": [...]}, ...]}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

__all__ = [
    "EventType",
    "Ontology",
    "OntologyFormatError",
    "OntologyValidationError",
    "UnknownEventTypeError",
    "Violation",
    "default_ontology",
    "load_ontology",
    "save_ontology",
    "roles_for",
    "validate_annotation",
]


class OntologyFormatError(ValueError):
    """Raised when an ontology file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class OntologyValidationError(ValueError):
    pass


class UnknownEventTypeError(KeyError):
    def __init__(self, event_type: str):
        self.event_type = event_type
        super().__init__(f"unknown event type {event_type!r}")

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class EventType:
    name: str
    roles: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(self.roles))
        if not self.name:
            raise OntologyValidationError("event type with empty name")
        if not self.roles:
            raise OntologyValidationError(f"event type {self.name!r} has no roles")
        seen = set()
        for role in self.roles:
            if role in seen:
                raise OntologyValidationError(
                    f"duplicate role {role!r} in event type {self.name!r}"
                )
            seen.add(role)


@dataclass(frozen=True)
class Ontology:
    event_types: tuple[EventType, ...]
    version: str = ""
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "event_types", tuple(self.event_types))
        if not self.event_types:
            raise OntologyValidationError("ontology has zero event types")
        index = {}
        for et in self.event_types:
            if et.name in index:
                raise OntologyValidationError(f"duplicate event type {et.name!r}")
            index[et.name] = et
        object.__setattr__(self, "_index", index)

    @property
    def type_names(self) -> list[str]:
        return [et.name for et in self.event_types]

    @property
    def all_roles(self) -> list[str]:
        """Distinct role names in first-appearance order."""
        out: dict[str, None] = {}
        for et in self.event_types:
            for r in et.roles:
                out.setdefault(r, None)
        return list(out)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.event_types)

    def get(self, name: str) -> EventType:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownEventTypeError(name) from None

    def roles_for(self, event_type: str) -> list[str]:
        return list(self.get(event_type).roles)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "event_types": [{"name": et.name, "roles": list(et.roles)} for et in self.event_types],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Ontology":
        try:
            types = [EventType(d["name"], tuple(d["roles"])) for d in data["event_types"]]
        except (KeyError, TypeError) as e:
            raise OntologyFormatError(f"malformed ontology record: {e}") from None
        return cls(tuple(types), str(data.get("version", "")))


def roles_for(ontology: Ontology, event_type: str) -> list[str]:
    return ontology.roles_for(event_type)


def _parse_lines(lines: Iterable[str]) -> Ontology:
    version = ""
    types: list[EventType] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped[1:].strip()
            if body.lower().startswith("version:"):
                version = body.split(":", 1)[1].strip()
            continue
        if "\t" not in line:
            raise OntologyFormatError("expected 'EventType<TAB>Role1,Role2,...'", lineno)
        name, roles_field = line.split("\t", 1)
        name = name.strip()
        roles = [r.strip() for r in roles_field.split(",")]
        if not name:
            raise OntologyFormatError("empty event type name", lineno)
        if any(not r for r in roles):
            raise OntologyFormatError(f"empty role name for {name!r}", lineno)
        if name in seen:
            raise OntologyValidationError(
                f"duplicate event type {name!r} (line {lineno}, first on line {seen[name]})"
            )
        seen[name] = lineno
        try:
            types.append(EventType(name, tuple(roles)))
        except OntologyValidationError as e:
            raise OntologyValidationError(f"line {lineno}: {e}") from None
    return Ontology(tuple(types), version)


def load_ontology(path: str | Path | None = None) -> Ontology:
    """Load an ontology file; with no path, load the bundled 16-type default.

    Files ending in ``.json`` are read as the JSON mirror, anything else as
    the tab-separated line format.
    """
    if path is None:
        return default_ontology()
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise OntologyFormatError(e.msg, e.lineno) from None
        return Ontology.from_dict(data)
    return _parse_lines(text.splitlines())


def save_ontology(ontology: Ontology, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(ontology.to_dict(), indent=2) + "\n", encoding="utf-8")
        return
    lines = []
    if ontology.version:
        lines.append(f"# version: {ontology.version}")
    for et in ontology.event_types:
        lines.append(f"{et.name}\t{','.join(et.roles)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


_DEFAULT: Ontology | None = None


def default_ontology() -> Ontology:
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("mmevent").joinpath("data/ontology.tsv").read_text(encoding="utf-8")
        _DEFAULT = _parse_lines(text.splitlines())
    return _DEFAULT


@dataclass(frozen=True)
class Violation:
    kind: str  # "unknown-type" | "role-not-in-schema"
    event_type: str
    role: str | None = None

    def __str__(self) -> str:
        if self.kind == "unknown-type":
            return f"unknown event type {self.event_type!r}"
        return f"role {self.role!r} not in schema of {self.event_type!r}"


def _roles_of(ann) -> Sequence[str]:
    roles = []
    for arg in getattr(ann, "args", ()):
        role = getattr(arg, "role", None)
        if role is None and isinstance(arg, (tuple, list)):
            # (span, role) or (role, keyframe_id, box)
            role = arg[1] if len(arg) == 2 else arg[0]
        roles.append(role)
    return roles


def validate_annotation(ann, ontology: Ontology) -> list[Violation]:
    """Return every schema violation in ``ann``; an empty list means valid.

    ``ann`` is anything with an ``event_type`` and ``args`` whose items
    carry a ``role``: text/video annotations and predictions all qualify.
    """
    etype = ann.event_type
    if etype not in ontology:
        return [Violation("unknown-type", etype)]
    licensed = set(ontology.get(etype).roles)
    out = []
    for role in _roles_of(ann):
        if role not in licensed:
            out.append(Violation("role-not-in-schema", etype, role))
    return out
