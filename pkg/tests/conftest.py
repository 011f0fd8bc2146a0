import numpy as np
import pytest

from afnet.data import ClassLabel, ManifestRow, TabularRecord

BASE_TAB = dict(
    gender="M", age=75.0, P_AXIS=59.0, P_DUR=119.0, P_ONSET=283.0, P_OFFSET=401.0, PR_INT=169.0,
    QRS_AXIS=18.0, QRS_DUR=98.0, QRS_ONSET=453.0, QRS_OFFSET=551.0, QT_INT=393.0, QTC_INT=415.0,
    RR_INTERVAL=831.0, T_AXIS=57.0, T_OFFSET=845.0, V_RATE=72.0,
)


def make_tab(**overrides) -> TabularRecord:
    kw = dict(BASE_TAB)
    kw.update(overrides)
    return TabularRecord(**kw)


def placeholder_rows(n_af0: int, n_af1: int) -> list[ManifestRow]:
    """Manifest rows with placeholder paths; every tabular feature varies a little."""
    rows = []
    for i in range(n_af0 + n_af1):
        label = ClassLabel.AF0 if i < n_af0 else ClassLabel.AF1
        kw = {k: v + (i * 7 + j) % 11 for j, (k, v) in enumerate(BASE_TAB.items()) if k != "gender"}
        kw["age"] = 40.0 + i % 50
        kw["gender"] = "MF"[i % 2]
        rows.append(ManifestRow(f"r{i:06d}", f"w/{i}.ecg", label, make_tab(**kw)))
    return rows


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
