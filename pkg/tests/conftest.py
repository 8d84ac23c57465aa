from __future__ import annotations

import sys
from pathlib import Path

import pytest

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

from ratematch.ingest import load_portfolio, schema_from_dict  # noqa: E402

DATA = HERE / "data"

DEDUCTIBLE_SCHEMA = {
    "id_column": "policy_id",
    "year_column": "year",
    "premiums": {"total": "total"},
    "covariates": [{"name": "deductible", "kind": "numeric", "match": "exact"}],
}


@pytest.fixture
def deductible_pf():
    pf, rejects = load_portfolio(DATA / "deductible.csv", schema_from_dict(DEDUCTIBLE_SCHEMA))
    assert not rejects
    return pf


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
