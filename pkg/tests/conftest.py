import contextlib

import pytest
import torch

from _fixtures import make_archive

torch.set_num_threads(1)

# (criterion number, PASS/FAIL, detail) collected by test_acceptance.py
ACCEPTANCE: list = []


@pytest.fixture(scope="session")
def archive(tmp_path_factory):
    """MCX/SCX/JCX directories in the documented layout, with the real file counts."""
    return make_archive(tmp_path_factory.mktemp("archive"))


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.notes: list = []

    def note(self, text: str) -> None:
        self.notes.append(text)

    def line(self, status: str) -> str:
        detail = "; ".join(self.notes)
        return f"criterion {self.number:>2} {status}  {self.title}" + (f"  [{detail}]" if detail else "")


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records PASS, or FAIL if the block raises."""

    @contextlib.contextmanager
    def run(number: int, title: str):
        c = Criterion(number, title)
        try:
            yield c
        except BaseException as exc:
            c.note(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            ACCEPTANCE.append((number, c.line("FAIL")))
            print(c.line("FAIL"))
            raise
        ACCEPTANCE.append((number, c.line("PASS")))
        print(c.line("PASS"))

    return run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
