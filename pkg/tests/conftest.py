import random

import pytest


class ScriptedRng:
    """Stands in for random.Random; randbytes() replays fixed byte strings first."""

    def __init__(self, *chunks: bytes) -> None:
        self._fallback = random.Random(0)
        self._chunks = list(chunks)

    def randbytes(self, n: int) -> bytes:
        if self._chunks:
            chunk = self._chunks.pop(0)
            assert len(chunk) == n
            return chunk
        return self._fallback.randbytes(n)


@pytest.fixture
def scripted_rng():
    return ScriptedRng


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
