"""Collects acceptance-criterion outcomes and prints one line per criterion at the end of the session."""
import pytest

_RESULTS: dict[str, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(str(number), {"title": title, "ok": True, "notes": []})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["notes"] += [f"{v}" for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    key = lambda s: (int("".join(c for c in s if c.isdigit()) or 0), s)  # noqa: E731
    for number in sorted(_RESULTS, key=key):
        e = _RESULTS[number]
        notes = "; ".join(e["notes"])
        line = f"criterion {number:<3} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))
