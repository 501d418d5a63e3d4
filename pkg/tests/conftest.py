import numpy as np
import pytest

from mlkd.corpus import GeneratorConfig, LabelCatalog, build_vocabulary, generate_synthetic


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(GeneratorConfig(n_dialogues=30, seed=3))


@pytest.fixture(scope="session")
def reference_corpus():
    return generate_synthetic(GeneratorConfig())


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocabulary(small_corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_catalog():
    return LabelCatalog(("O", "B-RN", "I-RN"), ("inform", "request"), ("restaurant",))


@pytest.fixture(scope="session")
def trio(tmp_path_factory, small_corpus, small_vocab):
    """Three small teachers of mixed width, each probed for the other two tasks."""
    from mlkd.encoder import EncoderConfig, Task
    from mlkd.teacher import TrainHP, finetune_teacher, train_probe_heads

    root = tmp_path_factory.mktemp("teachers")
    paths = {}
    for i, task in enumerate(Task):
        width = 16 if task is Task.DC else 32
        cfg = EncoderConfig(len(small_vocab), n_layers=1, n_heads=2, d_hidden=width, d_ff=2 * width)
        paths[task] = finetune_teacher(small_corpus, task, root / task.value, cfg, TrainHP(epochs=1), seed=i)
        for target in Task:
            if target is not task:
                train_probe_heads(paths[task], small_corpus, target, TrainHP(epochs=1), seed=i)
    return paths


# criterion number -> (status, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
