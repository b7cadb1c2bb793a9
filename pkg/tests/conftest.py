"""Per-criterion acceptance summary.

Tests tagged ``@pytest.mark.criterion(n)`` are grouped by ``n``; after the
run one PASS/FAIL/SKIP line is printed per criterion, followed by whatever
the tests recorded with ``record_property("detail", ...)``.
"""
import pytest

CRITERIA = {
    1: "gradient check, 10 tiny seeded nets, rel err < 1e-6, < 10 s",
    2: "layer shape table for ksc/ip/pu/sa presets",
    3: "synthetic scene, 2000 iterations: OA >= 0.99, recall >= 0.94, < 5 min",
    4: "100-sample subsets reach train accuracy 1.0 within 1500 iterations",
    5: "identical runs give byte-identical checkpoints and history CSVs",
    6: "property suites (softmax, reshape, maxpool, normalization, split)",
    7: "public scenes, 7500 iterations: OA >= 0.95, <= 1 h (optional)",
}

_outcomes = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            item.user_properties.append(("criterion", marker.args[0]))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when != "call" and report.passed:
        return
    entry = _outcomes.setdefault(props["criterion"], {"outcomes": [], "details": []})
    entry["outcomes"].append(report.outcome)
    for key, value in report.user_properties:
        if key == "detail" and value not in entry["details"]:
            entry["details"].append(value)


def _status(outcomes):
    if "failed" in outcomes:
        return "FAIL"
    if all(o == "skipped" for o in outcomes):
        return "SKIP"
    return "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, text in CRITERIA.items():
        entry = _outcomes.get(n)
        status = _status(entry["outcomes"]) if entry else "NOT RUN"
        line = f"criterion {n}: {status:<7} {text}"
        tr.write_line(line)
        for detail in entry["details"] if entry else ():
            tr.write_line(f"    {detail}")
