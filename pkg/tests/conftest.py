import pytest

from hfvae.synthdata import CorpusSpec, generate_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """Shared 12-utterance corpus for fast training tests."""
    spec = CorpusSpec(n_train=12, n_prompts=6,
                      phoneme_len_range=(4, 7))
    return generate_corpus(spec, 100)
