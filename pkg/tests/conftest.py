import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from latentcot.codi import Example  # noqa: E402
from latentcot.transformer import ModelConfig, init_params  # noqa: E402

TINY = ModelConfig(vocab_size=12, d_model=8, n_layers=2, n_heads=2, max_seq_len=40, n_latents=3,
                   proj_hidden=10, init_std=0.3)


def make_example(question=(3, 4, 5), cot=(6, 7, 2, 8), answer=(9, 1), prompt=11, **kw) -> Example:
    return Example("t0", 0, "en", tuple(question), tuple(cot), tuple(answer), prompt, **kw)


@pytest.fixture
def tiny():
    return init_params(TINY, seed=5)


@pytest.fixture
def tiny_rotary():
    from dataclasses import replace
    return init_params(replace(TINY, position="rotary"), seed=5)


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""
    def record(name: str, ok: bool, detail: str = "") -> None:
        ACCEPTANCE.append((name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
