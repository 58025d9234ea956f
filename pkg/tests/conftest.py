import os
import sys

import pytest

# Fix Import Path
base_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(os.path.join(base_dir, "scripts"))
sys.path.append(os.path.join(base_dir, "scripts", "tests"))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks (set RUN_SLOW=1 to run)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("RUN_SLOW", "").lower() in ("1", "true", "yes"):
        return
    skip = pytest.mark.skip(reason="slow tier; set RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
