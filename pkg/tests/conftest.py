import shutil
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fpgan.data import bundled_toy_dir  # noqa: E402


@pytest.fixture
def toy_dir(tmp_path):
    d = tmp_path / "toy"
    shutil.copytree(bundled_toy_dir(), d)
    return d
