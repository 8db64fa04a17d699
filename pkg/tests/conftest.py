import numpy as np
import pytest

from answer_retrieval.corpus import GeneratorParams, generate_synthetic
from answer_retrieval.encoders import EncoderConfig, Vocab
from answer_retrieval.labeler import AspectPatternSet, Gazetteer, annotate_corpus
from answer_retrieval.tensor import current_tape


@pytest.fixture(autouse=True)
def _fresh_tape():
    """Each test starts and ends with an empty computation tape."""
    current_tape().clear()
    yield
    current_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params():
    return GeneratorParams(
        n_docs=12, sections_per_doc=(2, 3), sentences_per_section=(1, 3), words_per_sentence=(3, 5),
        entities=("cardiomyopathy", "nausea", "heart failure", "asthma"),
        aspects=("family history", "chief complaint", "allergies", "medications"),
        mention_prob=1.0, entities_per_section=(1, 2),
    )


@pytest.fixture
def tiny_corpus(tiny_params):
    return generate_synthetic(tiny_params, seed=3)


@pytest.fixture
def tiny_labels(tiny_corpus, tiny_params):
    return annotate_corpus(tiny_corpus, Gazetteer(tiny_params.entities), AspectPatternSet.default())


@pytest.fixture
def tiny_vocab(tiny_corpus, tiny_labels):
    from answer_retrieval.training import build_vocab

    return build_vocab(tiny_corpus, tiny_labels)


@pytest.fixture
def small_config():
    """Smallest encoder that still exercises every code path (d_model <= 8, one layer)."""
    return EncoderConfig(d_model=8, n_heads=2, n_layers=1, ffn_dim=12, max_len=24, seed=5)


@pytest.fixture
def word_vocab():
    return Vocab(["cardiomyopathy", "family", "history", "nausea", "vomiting", "heart", "failure", "mother", "had"])


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion, repeated in the summary
# ---------------------------------------------------------------------------

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record the verdict of one acceptance criterion and return it."""
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'} [{title}] {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
