def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long training and timing checks; deselect with -m 'not slow'"
    )
