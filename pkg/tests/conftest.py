import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number = props["criterion"]
    ok = report.outcome == "passed"
    prev = _criteria.get(number)
    # a criterion split over several tests passes only if all of them pass
    if prev is not None:
        ok = ok and prev[0]
        details = prev[2] + ([props["detail"]] if "detail" in props else [])
    else:
        details = [props["detail"]] if "detail" in props else []
    _criteria[number] = (ok, props.get("title", ""), details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        ok, title, details = _criteria[number]
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
