"""The four benchmark entities and the SQL the mock server issues for them.

An entity name ``<c>c<f>fk`` means ``c`` text columns and ``f`` foreign
keys. The two FK entities reference one seeded row in each of 4c0fk and
10c0fk.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

FULL_LADDER = (1, 100, 1000, 5000, 10000, 25000, 50000, 100000)
DESK_LADDER = (1, 100, 1000, 10000)
REFERENCE_ID = 1

_NAME = re.compile(r"^(\d+)c(\d+)fk$")


@dataclass(frozen=True)
class EntitySchema:
    name: str
    text_columns: int
    foreign_keys: int

    @property
    def columns(self) -> list[str]:
        return [f"c{i}" for i in range(1, self.text_columns + 1)]

    @property
    def references(self) -> list[str]:
        """Entities referenced by the FK columns, in column order."""
        return list(FK_TARGETS[: self.foreign_keys])

    @property
    def fk_columns(self) -> list[str]:
        return [f"ref_{target}" for target in self.references]

    @property
    def all_columns(self) -> list[str]:
        return self.columns + self.fk_columns

    @property
    def table(self) -> str:
        return quote_ident(self.name)


FK_TARGETS = ("4c0fk", "10c0fk")

ENTITIES = {
    name: EntitySchema(name, *map(int, _NAME.match(name).groups()))
    for name in ("4c0fk", "4c2fk", "10c0fk", "10c2fk")
}


def entity(name: str) -> EntitySchema:
    try:
        return ENTITIES[name]
    except KeyError:
        raise ValueError(f"unknown entity {name!r}; expected one of {', '.join(ENTITIES)}") from None


def quote_ident(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def quote_literal(value) -> str:
    if isinstance(value, bool) or value is None:
        raise TypeError(f"unsupported SQL literal {value!r}")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        if "\x00" in value:
            raise ValueError("NUL byte in text value")
        return "'" + value.replace("'", "''") + "'"
    raise TypeError(f"unsupported SQL literal {value!r}")


def create_table_sql(schema: EntitySchema, serial: str = "INTEGER PRIMARY KEY") -> str:
    cols = [f"id {serial}"]
    cols += [f"{c} TEXT NOT NULL" for c in schema.columns]
    cols += [
        f"{col} INTEGER NOT NULL REFERENCES {quote_ident(target)}(id)"
        for col, target in zip(schema.fk_columns, schema.references)
    ]
    return f"CREATE TABLE IF NOT EXISTS {schema.table} ({', '.join(cols)})"


def creation_order(schemas: Sequence[EntitySchema]) -> list[EntitySchema]:
    """Referenced tables first; always includes the FK targets."""
    names = {s.name for s in schemas} | set(FK_TARGETS)
    ordered = [ENTITIES[n] for n in FK_TARGETS]
    ordered += [ENTITIES[n] for n in ENTITIES if n in names and n not in FK_TARGETS]
    return ordered


def validate_row(schema: EntitySchema, row) -> dict:
    if not isinstance(row, Mapping):
        raise ValueError(f"row must be a JSON object, got {type(row).__name__}")
    out = {}
    for col in schema.columns:
        value = row.get(col)
        if not isinstance(value, str):
            raise ValueError(f"column {col!r} must be a string")
        out[col] = value
    for col in schema.fk_columns:
        value = row.get(col)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValueError(f"foreign key {col!r} must be an integer")
        out[col] = value
    return out


def insert_sql(schema: EntitySchema, rows: Sequence[Mapping]) -> str:
    """One INSERT statement carrying every row as literal values."""
    if not rows:
        raise ValueError("no rows to insert")
    cols = schema.all_columns
    values = ",".join(
        "(" + ",".join(quote_literal(row[c]) for c in cols) + ")" for row in rows
    )
    return f"INSERT INTO {schema.table} ({', '.join(cols)}) VALUES {values}"


def reference_row(schema: EntitySchema) -> dict:
    return {c: "reference" for c in schema.columns}
