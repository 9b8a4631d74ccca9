from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedscal.data import GeometryConfig, build_federation, make_domain_specs  # noqa: E402
from fedscal.model import pretrain_source  # noqa: E402
from fedscal.numerics import RngStream  # noqa: E402


def small_federation(seed: int = 0, targets: int = 2, per_domain: int = 2, spc: int = 12, hidden: int = 8):
    geo = GeometryConfig(samples_per_class=spc, num_targets=targets, clients_per_domain=per_domain)
    src, tg = make_domain_specs(geo)
    source, clients = build_federation(src, tg, per_domain, RngStream(seed, (3, 0)))
    w0, _ = pretrain_source(source.features, source.labels, 5, 0.1, 32, RngStream(seed, (4, 0)), hidden=hidden)
    return w0, clients


@pytest.fixture(scope="session")
def tiny():
    return small_federation()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    report = getattr(mod, "REPORT", None)
    if report:
        terminalreporter.section("acceptance criteria")
        for n in sorted(report):
            terminalreporter.write_line(report[n])
