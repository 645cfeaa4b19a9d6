"""Acceptance criteria 1-11, one test and one printed PASS/FAIL line each.

Criteria 1-10 run once per session into a temporary directory; criterion 11
reruns them into a second directory and compares the CSV bytes.
"""

import pytest

from chainsde.acceptance import CRITERIA, determinism, run_criterion


@pytest.fixture(scope="session")
def acceptance_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def outcomes():
    return {}


def report(capsys, outcome):
    with capsys.disabled():
        print("\n" + outcome.line())


@pytest.mark.parametrize("number", [c[0] for c in CRITERIA], ids=[f"c{c[0]:02d}-{c[1].replace(' ', '-')}" for c in CRITERIA])
def test_criterion(number, acceptance_dir, outcomes, capsys):
    out = run_criterion(number, acceptance_dir / "run")
    outcomes[number] = out
    report(capsys, out)
    assert out.passed, out.detail


def test_c11_determinism(acceptance_dir, outcomes, capsys):
    if len(outcomes) < len(CRITERIA):
        missing = [c[0] for c in CRITERIA if c[0] not in outcomes]
        for n in missing:
            outcomes[n] = run_criterion(n, acceptance_dir / "run")
    out = determinism(acceptance_dir / "run", acceptance_dir / "rerun")
    report(capsys, out)
    assert out.passed, out.detail
