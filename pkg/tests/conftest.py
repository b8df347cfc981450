
_criteria: dict[int, str] = {}
_items: dict[str, int] = {}
_failed: set[int] = set()
_ran: set[int] = set()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(session, config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _criteria[number] = title
            _items[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _items.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or report.failed:
        _ran.add(number)
    if report.failed:
        _failed.add(number)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        if number in _failed:
            status = "FAIL"
        elif number in _ran:
            status = "PASS"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {_criteria[number]}")
