import pytest


def pytest_addoption(parser):
    parser.addoption('--acceptance', action='store_true', default=False,
                     help='run the desk-scale acceptance scenarios (minutes each)')


def pytest_configure(config):
    config.addinivalue_line('markers', 'acceptance: desk-scale scenario runs, skipped without --acceptance')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--acceptance'):
        return
    skip = pytest.mark.skip(reason='needs --acceptance')
    for item in items:
        if 'acceptance' in item.keywords:
            item.add_marker(skip)
