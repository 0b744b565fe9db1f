"""Finite-difference checks of every training loss on a micro model.

Each check freezes all noise (reparameterization draws, prior draws, sampled
sentences) so the loss is a deterministic function of the parameters, then
compares analytic gradients with central differences over the parameter
group that loss trains.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .model import CtrlGenModel, ModelConfig
from .text import Batch

TOLERANCE = 1e-4


@dataclass
class MicroSetup:
    model: CtrlGenModel
    batch: Batch
    labeled: Batch
    gen_noise: obj.GeneratorNoise
    disc_noise: obj.DiscriminatorNoise
    weights: obj.LossWeights
    tau: float
    T: int
    kl_weight: float


def micro_config(vocab_size: int = 12) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        attributes=[("attr", 2)],
        d_emb=8,
        d_hid=8,
        d_z=4,
        n_filters=3,
        init_scale=1.0,
    )


def _random_batch(rng, n: int, vocab_size: int, max_words: int, labels=None) -> Batch:
    seqs = []
    for _ in range(n):
        length = int(rng.integers(1, max_words + 1))
        seqs.append(list(rng.integers(4, vocab_size, size=length)))
    return Batch.from_sequences(seqs, labels)


def micro_setup(seed: int = 0, T: int = 5, tau: float = 0.7) -> MicroSetup:
    cfg = micro_config()
    model = CtrlGenModel(cfg, seed)
    rng = np.random.default_rng([seed, 900])
    batch = _random_batch(rng, 3, cfg.vocab_size, T - 1)
    labeled = _random_batch(rng, 3, cfg.vocab_size, T - 1, labels=rng.integers(2, size=3))
    weights = obj.LossWeights(lambda_c=0.3, lambda_z=0.2, lambda_u=0.4, beta=0.5)
    gen_noise = obj.GeneratorNoise.draw(model, batch, 3, rng)
    disc_noise = obj.DiscriminatorNoise.draw(model, 3, T, rng)
    return MicroSetup(model, batch, labeled, gen_noise, disc_noise, weights, tau, T, kl_weight=0.6)


def _suite(s: MicroSetup) -> Dict[str, tuple]:
    m, gn = s.model, s.gen_noise
    gen, enc = m.generator.params, m.encoder.params
    disc = m.discriminators["attr"].params
    both = ad.parameters_of(gen, enc)

    def vae_loss():
        return obj.loss_vae(m, s.batch, s.kl_weight, gn.eps, gn.wake_c)[0]

    def attr_c_loss():
        return obj.loss_attr_c(m, gn.z, gn.c, s.tau, s.T)

    def attr_z_loss():
        return obj.loss_attr_z(m, gn.z, gn.c, s.tau, s.T)

    def generator_loss():
        return obj.loss_generator(m, s.batch, gn, s.weights, s.kl_weight, s.tau, s.T)[0]

    def disc_sup_loss():
        return obj.loss_disc_supervised(m, "attr", s.labeled)

    def disc_unsup_loss():
        return obj.loss_disc_unsupervised(m, "attr", s.disc_noise, s.weights)[0]

    def discriminator_loss():
        return obj.loss_discriminator(m, "attr", s.labeled, s.disc_noise, s.weights)[0]

    return {
        "vae": (vae_loss, both),
        "attr_c": (attr_c_loss, gen),
        "attr_z": (attr_z_loss, gen),
        "generator": (generator_loss, gen),
        "disc_sup": (disc_sup_loss, disc),
        "disc_unsup": (disc_unsup_loss, disc),
        "discriminator": (discriminator_loss, disc),
    }


LOSS_NAMES: List[str] = ["vae", "attr_c", "attr_z", "generator", "disc_sup", "disc_unsup", "discriminator"]


def check_loss(name: str, setup: MicroSetup, eps: float = 1e-5) -> float:
    fn, params = _suite(setup)[name]
    return ad.gradient_check(fn, params, eps)


def run_suite(seed: int = 0, eps: float = 1e-5, log: Callable[[str], None] = None) -> Dict[str, float]:
    """Max relative error per loss on one micro setup."""
    setup = micro_setup(seed)
    out = {}
    for name in LOSS_NAMES:
        t = time.perf_counter()
        out[name] = check_loss(name, setup, eps)
        if log:
            log(f"{name}: max rel err {out[name]:.3e} ({time.perf_counter() - t:.1f}s)")
    return out
