import numpy as np
import pytest

from smar.data import DeskCorpusSpec, gen_desk_corpus
from smar.encoders import ModelConfig, TowerConfig


def tiny_config(fusion_mode="cross", vocab_size=20, d_img=5, k=8, heads=2, seq=6, layers=(1, 1, 1, 1)) -> ModelConfig:
    tc = lambda n: TowerConfig(heads=heads, layers=n, model_dim=k, ff_dim=2 * k, max_seq_len=seq)  # noqa: E731
    q, t, i, m = layers
    return ModelConfig(
        vocab_size=vocab_size, model_dim=k, image_feat_dim=d_img,
        query=tc(q), text=tc(t), image=tc(i), fusion=tc(m), fusion_mode=fusion_mode, temperature=1.0,
    )


def unit_rows(rng, n, k):
    x = rng.standard_normal((n, k))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    spec = DeskCorpusSpec(n_items=120, n_queries=40, n_train_queries=80, synthetic_factor=0.5)
    return gen_desk_corpus(spec, seed=3)


# criterion number -> (passed, line); filled by test_acceptance, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def verdict(n: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE[n] = (bool(ok), line)
    print(line)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n][1])
