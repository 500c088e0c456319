import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from shallowmt import data, training
from shallowmt.model import Model

settings.register_profile(
    "default",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def identity_setup():
    """A small model trained on the identity toy task, with its data.

    Shared by decoding/evaluation tests that need a model producing
    meaningful (near-deterministic) distributions.
    """
    corpora = data.synthesize_toy_corpus([(("aa", "bb"), "identity", 300)], seed=7)
    splits = data.split_corpus(corpora[0], (0.9, 0.0, 0.1))
    train = [splits["train"]]
    test = [data.DirectionCorpus(corpora[0].direction, splits["test"].pairs[:40])]
    vocab = data.Vocabulary.from_corpora(corpora)
    cfg = training.toy_train_config(seed=3, log_every=0)
    mcfg = training.toy_model_config(
        len(vocab), encoder_layers=2, decoder_layers=1, emb_dim=32, ffn_dim=64
    )
    model = training.train_supervised(mcfg, train, vocab, cfg, steps=900)
    return {"model": model, "vocab": vocab, "train": train, "test": test}
