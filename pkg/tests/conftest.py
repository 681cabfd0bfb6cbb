import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.fixture
def report(request):
    """Attach a measured value to the acceptance summary line of the calling test."""

    def _add(text):
        request.node.user_properties.append(("measured", text))

    return _add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    results = item.config.stash.setdefault(_RESULTS, {})
    number, title = marker.args
    measured = "; ".join(v for k, v in item.user_properties if k == "measured")
    prev = results.get(number)
    ok = rep.passed and (prev is None or prev[0])
    results[number] = (ok, title, "; ".join(x for x in (prev[2] if prev else "", measured) if x))


_RESULTS = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, measured = results[number]
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        if measured:
            line += f"  [{measured}]"
        terminalreporter.write_line(line)
