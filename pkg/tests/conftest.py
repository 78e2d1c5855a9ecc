import pytest
import torch

from unitlm import synthgen
from unitlm.pipeline import WorldConfig, build_world

torch.set_num_threads(1)

TINY_LATENT = synthgen.LatentSpec(n_speakers=4, n_contents=4, n_backgrounds=2, feature_dim=8,
                                  n_words=12, words_per_content=4, n_phones=8)


@pytest.fixture(scope="session")
def tiny_world():
    """200 short utterances over a 32-code random codebook."""
    cfg = WorldConfig(latent=TINY_LATENT, n_codes=32, codebook="random", n_train=200,
                      min_len=30, max_len=50, n_buckets=6)
    return build_world(cfg)


ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Log one acceptance outcome; printed again in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:2d}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
