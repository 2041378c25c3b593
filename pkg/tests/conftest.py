import pytest

from cer import corpus as C
from cer import training as Tr

TINY = dict(embed_dim=32, n_layers=1, n_heads=2, hidden_dim=16, ffn_dim=64, max_expl_len=16, max_features=2)


@pytest.fixture(scope="session")
def lexicon():
    return C.load_lexicon()


@pytest.fixture(scope="session")
def overfit(lexicon):
    """A tiny model trained to memorize eight records."""
    records = C.synthesize_corpus(seed=2, n_users=4, n_items=4, n_records=8, lexicon=lexicon)
    res = Tr.train(C.DatasetSplit(records, [], []), TINY,
                   Tr.TrainConfig(lr=1e-2, max_epochs=300, batch_size=8, patience=None))
    return records, res


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
