"""Proportional cost model of single-row vs multi-row INSERT.

Per statement: connect 3, send 2, parse 2, close 1. Per row: one unit per
unit of row size plus one per index. Single mode pays the statement
overhead for every row; bulk mode pays it once.

Costs are dimensionless; only their ratio (the predicted speedup) means
anything.
"""

from __future__ import annotations

from dataclasses import dataclass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class InsertCostParams:
    row_size: float = 1.0
    index_count: int = 0
    connect_cost: float = 3.0
    send_cost: float = 2.0
    parse_cost: float = 2.0
    row_unit_cost: float = 1.0
    close_cost: float = 1.0

    def __post_init__(self):
        if not self.row_size > 0:
            raise DomainError(f"row_size must be > 0, got {self.row_size}")
        if self.index_count < 0:
            raise DomainError(f"index_count must be >= 0, got {self.index_count}")

    @property
    def statement_overhead(self) -> float:
        return self.connect_cost + self.send_cost + self.parse_cost + self.close_cost

    @property
    def per_row(self) -> float:
        return self.row_unit_cost * self.row_size + self.index_count

    @property
    def speedup_bound(self) -> float:
        """Limit of the predicted speedup as the batch grows without bound."""
        return (self.statement_overhead + self.per_row) / self.per_row

    @classmethod
    def for_entity(cls, text_columns: int, foreign_keys: int) -> "InsertCostParams":
        return cls(row_size=text_columns, index_count=foreign_keys)


def _check(n: int) -> None:
    if n < 1:
        raise DomainError(f"row count must be >= 1, got {n}")


def single_mode_cost(p: InsertCostParams, n: int) -> float:
    _check(n)
    return n * (p.statement_overhead + p.per_row)


def bulk_mode_cost(p: InsertCostParams, n: int) -> float:
    _check(n)
    return p.statement_overhead + n * p.per_row


def predicted_speedup(p: InsertCostParams, n: int) -> float:
    return single_mode_cost(p, n) / bulk_mode_cost(p, n)
