import pytest

from ctrlgen.text import default_grammar, generate_synthetic_corpus
from ctrlgen.trainer import TrainConfig, Trainer


def tiny_config(**kw) -> TrainConfig:
    base = dict(
        seed=0,
        attributes=["sentiment"],
        d_emb=8,
        d_hid=8,
        d_z=4,
        n_filters=4,
        batch_size=8,
        vae_pretrain_steps=6,
        joint_steps=4,
        kl_anneal_steps=10,
        tau_decay_steps=5,
        lr_gen=3e-3,
        lr_enc=3e-3,
        init_scale=0.3,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def grammar():
    return default_grammar()


@pytest.fixture(scope="session")
def tiny_corpus(grammar):
    return generate_synthetic_corpus(grammar, 40, 12, 0)


@pytest.fixture
def make_trainer(grammar, tiny_corpus):
    def build(metrics_path=None, state=None, corpus=None, **kw):
        cfg = tiny_config(**kw)
        corp = corpus or tiny_corpus
        return Trainer.from_data(cfg, corp.unlabeled, corp.labeled, grammar, metrics_path, state)

    return build
