import os
import sys
from pathlib import Path

import pytest

from cubeforge import dataio
from cubeforge.config import AppConfig

# acceptance outcomes, printed in the terminal summary whatever the capture mode
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def make_schema(tmp_path):
    def make(n_dims=4, measures=("quantity",)):
        schema = dataio.default_schema(n_dims, measures)
        path = tmp_path / f"schema-{n_dims}.txt"
        schema.save(path)
        return schema, path
    return make


def write_rows(path, rows):
    Path(path).write_text("".join("\t".join(map(str, r)) + "\n" for r in rows))
    return Path(path)


@pytest.fixture
def app_config(tmp_path):
    def make(schema_path, functions, **kw):
        kw.setdefault("reducers", 8)
        kw.setdefault("sample_rate", 10)
        kw.setdefault("root", str(tmp_path / "root"))
        kw.setdefault("profile", str(tmp_path / f"profile-{kw.get('app_id', 'cube')}.txt"))
        return AppConfig(schema=str(schema_path), functions=list(functions), **kw)
    return make
