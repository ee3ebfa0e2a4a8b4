import shutil

import pytest

from specwin.machine import flush_supported
from specwin.topology import CpuTopology, write_fixture

HAS_FLUSH = flush_supported()
HAS_GAS = shutil.which("as") is not None and shutil.which("objcopy") is not None
HAS_OBJDUMP = shutil.which("objdump") is not None


def pytest_collection_modifyitems(config, items):
    skip = pytest.mark.skip(reason="needs x86-64 with CLFLUSH")
    for item in items:
        if "hardware" in item.keywords and not HAS_FLUSH:
            item.add_marker(skip)


@pytest.fixture
def sysroot(tmp_path, monkeypatch):
    """An empty fixture root that SPECWIN_SYSROOT points at."""
    monkeypatch.setenv("SPECWIN_SYSROOT", str(tmp_path))
    return tmp_path


@pytest.fixture
def fake_smt():
    """Two siblings on one core, as on an SMT part."""
    return CpuTopology(logical_ids=[0, 1], cores={0: [0, 1]})


@pytest.fixture
def no_smt():
    return CpuTopology(logical_ids=[0, 1, 2, 3], cores={i: [i] for i in range(4)})


def make_tree(root, cores):
    write_fixture(root, cores)
    return root


# -- acceptance report ----------------------------------------------------

_CRITERIA: dict[str, str] = {}


class CriterionLog:
    def __init__(self, key):
        self.key = key

    def __call__(self, status: str, text: str) -> None:
        _CRITERIA[self.key] = f"[{status}] criterion {self.key}: {text}"


@pytest.fixture
def criterion(request):
    """Record the one-line verdict for an acceptance criterion."""
    return CriterionLog(request.node.get_closest_marker("criterion").args[0])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(key): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(_CRITERIA[key])
