import pytest

from mragattack.attack import AttackConfig
from mragattack.corpus import TrainParams, synth_corpus, train_encoder
from mragattack.numerics import SeededRng
from mragattack.retrieval import build_kb

# Deliberately small: every fixture-backed test should run in well under a
# second. The acceptance suite builds the full-size setup itself.
TINY = dict(n_concepts=6, queries_per_concept=2, passages_per_concept=3,
            distractor_passages=20, d_img=48)
TINY_TRAIN = TrainParams(epochs=30, lr=0.2, batch_size=8, hidden_dim=24, d_emb=16, d_tok=8)


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_corpus(rng=SeededRng(7).derive("corpus"), **TINY)


@pytest.fixture(scope="session")
def tiny_encoder(tiny_corpus):
    return train_encoder(tiny_corpus, TINY_TRAIN, "finetuned",
                         SeededRng(0).derive("train", "finetuned"))


@pytest.fixture(scope="session")
def tiny_kb(tiny_corpus, tiny_encoder):
    return build_kb(tiny_corpus.entries, tiny_encoder)


@pytest.fixture()
def fast_cfg():
    return AttackConfig(steps=8)
