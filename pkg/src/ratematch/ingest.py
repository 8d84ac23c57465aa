"""CSV ingestion, ordinal encoding, schema configs and seeded subsetting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .core import (TOTAL, CovariateSpec, IdentityLevels, Kind, MatchMode, Policy,
                   Portfolio, RateMatchError)

logger = logging.getLogger(__name__)

MAX_REJECT_FRACTION = 0.5


class IngestError(RateMatchError):
    pass


@dataclass(frozen=True)
class OrdinalMapping:
    """Label -> level index, either an explicit table or a stripped numeric prefix."""

    levels: Mapping[str, int] | None = None
    strip_prefix: str | None = None

    def __post_init__(self):
        if (self.levels is None) == (self.strip_prefix is None):
            raise IngestError("ordinal mapping needs exactly one of levels or strip_prefix")
        if self.levels is not None:
            idx = list(self.levels.values())
            if len(set(idx)) != len(idx):
                raise IngestError("ordinal mapping is not injective")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise IngestError("ordinal mapping does not preserve the declared label order")
            if any(i < 0 for i in idx):
                raise IngestError("ordinal level indices must be >= 0")

    def label(self, index: int) -> str:
        if self.strip_prefix is not None:
            return f"{self.strip_prefix}{index}"
        for k, v in self.levels.items():
            if v == index:
                return k
        raise IngestError(f"no label for ordinal level {index}")


def encode_ordinal(label: str, mapping: OrdinalMapping | Mapping[str, int]) -> int:
    """Level index of an ordinal label; unknown labels raise ``IngestError``."""
    if not isinstance(mapping, OrdinalMapping):
        mapping = OrdinalMapping(levels=dict(mapping))
    label = label.strip()
    if mapping.levels is not None:
        try:
            return int(mapping.levels[label])
        except KeyError:
            raise IngestError(f"unknown ordinal label {label!r}") from None
    if not label.startswith(mapping.strip_prefix):
        raise IngestError(f"unknown ordinal label {label!r}")
    rest = label[len(mapping.strip_prefix):]
    if not rest.isdigit():
        raise IngestError(f"unknown ordinal label {label!r}")
    return int(rest)


@dataclass(frozen=True)
class SchemaConfig:
    id_column: str
    year_column: str
    premium_columns: Mapping[str, str]
    covariates: tuple[CovariateSpec, ...]
    # covariate name -> CSV column (defaults to the covariate name)
    columns: Mapping[str, str] = field(default_factory=dict)
    ordinal_mappings: Mapping[str, OrdinalMapping] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if TOTAL not in self.premium_columns:
            raise IngestError(f"premium_columns must include {TOTAL!r}")
        for spec in self.covariates:
            if spec.kind is Kind.ORDINAL and spec.name not in self.ordinal_mappings:
                raise IngestError(f"ordinal covariate {spec.name!r} has no label mapping")

    def column(self, name: str) -> str:
        return self.columns.get(name, name)

    def required_columns(self) -> list[str]:
        cols = [self.id_column, self.year_column, *self.premium_columns.values()]
        cols += [self.column(s.name) for s in self.covariates]
        return cols


@dataclass(frozen=True)
class Reject:
    row: int
    id: str
    reason: str
    record: Mapping[str, str]


def _parse_row(record: Mapping[str, str], schema: SchemaConfig) -> Policy:
    def cell(col):
        value = record.get(col)
        if value is None or value.strip() == "":
            raise IngestError(f"missing value in column {col}")
        return value.strip()

    pid = cell(schema.id_column)
    try:
        year = int(cell(schema.year_column))
    except ValueError:
        raise IngestError(f"unparseable year {record.get(schema.year_column)!r}") from None
    premiums = {}
    for coverage, col in schema.premium_columns.items():
        try:
            amount = float(cell(col))
        except ValueError:
            raise IngestError(f"unparseable premium in column {col}") from None
        if not math.isfinite(amount):
            raise IngestError(f"unparseable premium in column {col}")
        if amount < 0:
            raise IngestError("negative premium")
        premiums[coverage] = amount
    values = []
    for spec in schema.covariates:
        raw = cell(schema.column(spec.name))
        if spec.kind is Kind.NUMERIC:
            try:
                value = float(raw)
            except ValueError:
                raise IngestError(f"unparseable numeric {spec.name}={raw!r}") from None
            if not math.isfinite(value):
                raise IngestError(f"unparseable numeric {spec.name}={raw!r}")
        elif spec.kind is Kind.ORDINAL:
            value = encode_ordinal(raw, schema.ordinal_mappings[spec.name])
        else:
            value = raw
        values.append(spec.check_value(value))
    return Policy(pid, year, premiums, tuple(values))


def load_portfolio(path: str | Path, schema: SchemaConfig) -> tuple[Portfolio, list[Reject]]:
    """Read one policy per CSV row; invalid rows come back as rejects with a reason."""
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in schema.required_columns() if c not in header]
        if missing:
            raise IngestError(f"missing column(s) in {path}: {', '.join(missing)}")
        policies, rejects = [], []
        seen = set()
        for rowno, record in enumerate(reader, start=2):
            try:
                policy = _parse_row(record, schema)
                if (policy.id, policy.year) in seen:
                    raise IngestError("duplicate policy id within year")
            except RateMatchError as exc:
                rejects.append(Reject(rowno, record.get(schema.id_column, ""), str(exc), record))
                continue
            seen.add((policy.id, policy.year))
            policies.append(policy)
    total = len(policies) + len(rejects)
    if total == 0:
        raise IngestError("no policies")
    if len(rejects) > MAX_REJECT_FRACTION * total:
        raise IngestError(f"{len(rejects)} of {total} rows rejected")
    if rejects:
        logger.warning("%d of %d rows rejected", len(rejects), total)
    return Portfolio._trusted(schema.covariates, policies), rejects


def write_rejects(rejects: list[Reject], path: str | Path, header: list[str] | None = None) -> None:
    path = Path(path)
    if header is None:
        header = list(rejects[0].record) if rejects else []
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", *header, "reason"])
        for r in rejects:
            writer.writerow([r.row, *(r.record.get(c, "") for c in header), r.reason])


def write_portfolio(portfolio: Portfolio, path: str | Path, schema: SchemaConfig) -> None:
    """Write a portfolio in the schema's CSV layout (inverse of ``load_portfolio``)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.required_columns())
        for p in portfolio.policies:
            row = [p.id, p.year]
            row += [repr(p.premiums.get(c, 0.0)) for c in schema.premium_columns]
            for spec, value in zip(portfolio.specs, p.covariates):
                if spec.kind is Kind.NUMERIC:
                    row.append(repr(float(value)))
                elif spec.kind is Kind.ORDINAL:
                    row.append(schema.ordinal_mappings[spec.name].label(value))
                else:
                    row.append(value)
            writer.writerow(row)


def subset(portfolio: Portfolio, n: int, seed: int) -> Portfolio:
    """Uniform sample of ``n`` policies without replacement, keeping file order."""
    size = len(portfolio)
    if n < 0 or n > size:
        raise IngestError(f"cannot take {n} policies from a portfolio of {size}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(size, size=n, replace=False))
    return portfolio.select(idx.tolist())


def _covariate_from_config(entry: Mapping[str, Any]) -> tuple[CovariateSpec, str, OrdinalMapping | None]:
    name = entry["name"]
    kind = Kind(entry.get("kind", "numeric"))
    mapping = None
    level_values = entry.get("level_values")
    if kind is Kind.ORDINAL:
        if "strip_prefix" in entry:
            mapping = OrdinalMapping(strip_prefix=str(entry["strip_prefix"]))
        else:
            levels = entry.get("levels")
            if isinstance(levels, list):
                base = int(entry.get("base", 0))
                levels = {str(lab): base + i for i, lab in enumerate(levels)}
            if not levels:
                raise IngestError(f"ordinal covariate {name!r} needs levels or strip_prefix")
            mapping = OrdinalMapping(levels={str(k): int(v) for k, v in levels.items()})
        if level_values == "identity":
            level_values = IdentityLevels()
    spec = CovariateSpec(
        name=name,
        kind=kind,
        match_mode=MatchMode(entry.get("match", "approximate" if kind is not Kind.CATEGORICAL else "exact")),
        confounder=bool(entry.get("confounder", True)),
        level_values=level_values,
        reference=None if entry.get("reference") is None else str(entry["reference"]),
        caliper=None if entry.get("caliper") is None else float(entry["caliper"]),
    )
    return spec, str(entry.get("column", name)), mapping


def schema_from_dict(cfg: Mapping[str, Any]) -> SchemaConfig:
    """Build a ``SchemaConfig`` from the ``schema`` section of a run config."""
    try:
        specs, columns, mappings = [], {}, {}
        for entry in cfg["covariates"]:
            spec, column, mapping = _covariate_from_config(entry)
            specs.append(spec)
            columns[spec.name] = column
            if mapping is not None:
                mappings[spec.name] = mapping
        premiums = cfg.get("premiums", {TOTAL: TOTAL})
        return SchemaConfig(
            id_column=cfg.get("id_column", "id"),
            year_column=cfg.get("year_column", "year"),
            premium_columns={str(k): str(v) for k, v in premiums.items()},
            covariates=tuple(specs),
            columns=columns,
            ordinal_mappings=mappings,
        )
    except KeyError as exc:
        raise IngestError(f"schema config missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, RateMatchError):
            raise
        raise IngestError(f"invalid schema config: {exc}") from None
