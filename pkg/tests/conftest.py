import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    accept = sys.modules.get("test_acceptance")
    if accept is None or not accept.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(accept.RESULTS):
        terminalreporter.write_line(accept.summary_line(k))
