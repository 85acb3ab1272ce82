from collections import OrderedDict

import pytest

_results = OrderedDict()


def pytest_runtest_logreport(report):
    for number, title in getattr(report, "_criterion", ()):
        entry = _results.setdefault(number, {"titles": [], "ok": True, "props": []})
        if title not in entry["titles"]:
            entry["titles"].append(title)
        # a setup or teardown error fails the criterion as well
        if report.failed or (report.when == "call" and not report.passed):
            entry["ok"] = False
        if report.when == "call":
            entry["props"].extend(report.user_properties)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report._criterion = [tuple(m.args) for m in item.iter_markers("criterion")]


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        status = "PASS" if entry["ok"] else "FAIL"
        props = ", ".join(f"{k}={_fmt(v)}" for k, v in entry["props"])
        title = "; ".join(entry["titles"])
        tr.write_line(f"criterion {number:>2}: {status}  {title}" + (f"  [{props}]" if props else ""))
