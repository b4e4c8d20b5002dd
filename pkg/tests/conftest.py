"""
测试公共配置：把仓库根目录加入 sys.path，并注册 slow 标记

slow 测试（端到端验收）默认跳过，用 pytest --runslow 运行。
"""
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行 slow 验收测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 端到端验收测试（运行时间较长）")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
