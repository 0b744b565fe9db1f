"""Generator and discriminator losses plus the KL-weight and temperature schedules.

Every loss is a batch mean in nats. Random inputs (reparameterization noise,
prior draws, token samples) come from explicit arguments so that a loss is a
deterministic function of the parameters, which the gradient checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import CtrlGenModel, reparameterize, sample_categorical
from .text import Batch

REPORT_KEYS = (
    "recon_nll",
    "kl",
    "vae",
    "attr_c",
    "attr_z",
    "gen_total",
    "disc_sup",
    "disc_unsup",
    "disc_entropy",
    "disc_total",
)


@dataclass
class LossWeights:
    lambda_c: float = 0.1
    lambda_z: float = 0.1
    lambda_u: float = 0.1
    beta: float = 0.1
    kl_anneal_steps: int = 1000
    tau_start: float = 1.0
    tau_end: float = 0.01
    tau_decay_steps: int = 1000
    reward_entropy: bool = False

    def __post_init__(self):
        for name in ("lambda_c", "lambda_z", "lambda_u", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.kl_anneal_steps < 1 or self.tau_decay_steps < 1:
            raise ValueError("annealing step counts must be positive")
        if not (self.tau_start >= self.tau_end > 0):
            raise ValueError("need tau_start >= tau_end > 0")


@dataclass
class LossReport:
    values: Dict[str, float] = field(default_factory=dict)
    kl_weight: float = float("nan")
    tau: float = float("nan")

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)


# -- schedules ---------------------------------------------------------------------


def anneal_kl_weight(step: int, weights: LossWeights) -> float:
    if step < 0:
        raise ValueError("step must be nonnegative")
    return min(1.0, step / weights.kl_anneal_steps)


def anneal_temperature(step: int, weights: LossWeights) -> float:
    """Linear from tau_start to tau_end over tau_decay_steps, then flat."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step >= weights.tau_decay_steps:
        return weights.tau_end
    frac = step / weights.tau_decay_steps
    return weights.tau_start + frac * (weights.tau_end - weights.tau_start)


# -- VAE ---------------------------------------------------------------------------


def kl_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I))."""
    if mu.shape != logvar.shape:
        raise ValueError(f"kl_gaussian: shapes {mu.shape} and {logvar.shape} differ")
    per = ad.sum_(mu * mu + ad.exp(logvar) - 1.0 - logvar, axis=1) * 0.5
    return ad.mean(per)


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def _entropy_t(logp: Tensor) -> Tensor:
    """Row entropy -sum p log p from log-probabilities, differentiable."""
    return -ad.sum_(ad.exp(logp) * logp, axis=1)


def wake_codes(model: CtrlGenModel, batch: Batch, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Draw c ~ q_D(c|x) per attribute; discriminators receive no gradient."""
    out = {}
    with ad.no_grad():
        for name in model.attribute_names:
            probs = ad.exp(model.discriminators[name].log_probs_batch(batch)).data
            out[name] = sample_categorical(probs, rng)
    return out


def loss_vae(
    model: CtrlGenModel,
    batch: Batch,
    kl_weight: float,
    eps: np.ndarray,
    c_idx: Mapping[str, np.ndarray],
) -> Tuple[Tensor, LossReport]:
    """kl_weight * KL + masked reconstruction NLL (per sentence, batch mean).

    ``c_idx`` is the structured code used for reconstruction: prior draws during
    VAE initialisation, or discriminator draws from :func:`wake_codes`.
    """
    if not 0.0 <= kl_weight <= 1.0:
        raise ValueError(f"kl_weight must lie in [0, 1], got {kl_weight}")
    mu, logvar = model.encoder.encode(batch)
    z = reparameterize(mu, logvar, eps)
    c = Tensor(model.code(c_idx))
    logp, _ = model.generator.teacher_forced(z, c, batch)
    nll = -ad.sum_(logp) * (1.0 / batch.size)
    kl = kl_gaussian(mu, logvar)
    loss = nll + kl * kl_weight if kl_weight > 0 else nll
    rep = LossReport({"recon_nll": nll.item(), "kl": kl.item(), "vae": loss.item()}, kl_weight=kl_weight)
    return loss, rep


def token_accuracy(model: CtrlGenModel, batch: Batch, c_idx: Mapping[str, np.ndarray]) -> float:
    """Teacher-forced next-token accuracy with z at the posterior mean."""
    with ad.no_grad():
        mu, _ = model.encoder.encode(batch)
        c = Tensor(model.code(c_idx))
        gen = model.generator
        ids = batch.ids
        h, cell, extra = gen._start(mu, c)
        xw = gen.lstm.project_inputs(ad.gather_rows(gen.embedding(), ids[:, :-1]))
        if extra is not None:
            xw = xw + ad.reshape(extra, (extra.shape[0], 1, extra.shape[1]))
        Wh = gen.p("lstm.Wh")
        hits, total = 0, 0
        mask = batch.mask[:, 1:]
        for t in range(ids.shape[1] - 1):
            h, cell = gen.lstm.step(xw[:, t, :], h, cell, Wh)
            pred = np.argmax(gen.logits(h).data, axis=1)
            m = mask[:, t] > 0
            hits += int(np.sum(pred[m] == ids[m, t + 1]))
            total += int(m.sum())
    return hits / max(total, 1)


# -- generator sleep-phase losses ----------------------------------------------


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def soft_sentences(model: CtrlGenModel, z: np.ndarray, c_idx, tau: float, T: int) -> Tensor:
    _check_tau(tau)
    return model.generator.soft_decode(Tensor(z), Tensor(model.code(c_idx)), tau, T)


def loss_attr_c(model: CtrlGenModel, z, c_idx, tau: float, T: int, soft: Optional[Tensor] = None) -> Tensor:
    """Sum over attributes of -mean log q_D(c | soft sentence); discriminators frozen."""
    _check_tau(tau)
    if soft is None:
        soft = soft_sentences(model, z, c_idx, tau, T)
    total = None
    for name in model.attribute_names:
        disc = model.discriminators[name]
        with disc.frozen():
            logq = disc.log_probs(soft)
        target = np.eye(disc.K)[np.asarray(c_idx[name])]
        term = -ad.mean(ad.sum_(logq * target, axis=1))
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def loss_attr_z(model: CtrlGenModel, z, c_idx, tau: float, T: int, soft: Optional[Tensor] = None) -> Tensor:
    """-mean log q_E(z | soft sentence); the encoder is held constant."""
    _check_tau(tau)
    if soft is None:
        soft = soft_sentences(model, z, c_idx, tau, T)
    with model.encoder.frozen():
        logq = model.encoder.log_density(z, soft)
    return -ad.mean(logq)


@dataclass
class GeneratorNoise:
    """Every random draw one generator step consumes, in draw order."""

    eps: np.ndarray
    wake_c: Dict[str, np.ndarray]
    z: np.ndarray
    c: Dict[str, np.ndarray]

    @classmethod
    def draw(cls, model: CtrlGenModel, batch: Batch, n_prior: int, rng: np.random.Generator) -> "GeneratorNoise":
        eps = rng.standard_normal((batch.size, model.cfg.d_z))
        wake = wake_codes(model, batch, rng)
        z, c = model.sample_prior(n_prior, rng)
        return cls(eps, wake, z, c)


def loss_generator(
    model: CtrlGenModel,
    batch: Batch,
    noise: GeneratorNoise,
    weights: LossWeights,
    kl_weight: float,
    tau: float,
    T: int,
) -> Tuple[Tensor, LossReport]:
    """vae + lambda_c * attr_c + lambda_z * attr_z.

    The encoder's parameters get gradient only through the VAE term.
    """
    vae, rep = loss_vae(model, batch, kl_weight, noise.eps, noise.wake_c)
    total = vae
    attr_c = attr_z = 0.0
    need_soft = weights.lambda_c > 0 or weights.lambda_z > 0
    if need_soft:
        soft = soft_sentences(model, noise.z, noise.c, tau, T)
        lc = loss_attr_c(model, noise.z, noise.c, tau, T, soft)
        lz = loss_attr_z(model, noise.z, noise.c, tau, T, soft)
        attr_c, attr_z = lc.item(), lz.item()
        if weights.lambda_c > 0:
            total = total + lc * weights.lambda_c
        if weights.lambda_z > 0:
            total = total + lz * weights.lambda_z
    rep.values.update(attr_c=attr_c, attr_z=attr_z, gen_total=total.item())
    rep.tau = tau
    return total, rep


# -- discriminator losses ---------------------------------------------------------


def loss_disc_supervised(model: CtrlGenModel, attribute: str, batch: Batch) -> Tensor:
    if batch.labels is None:
        raise ValueError("supervised discriminator loss needs a labeled batch")
    disc = model.discriminators[attribute]
    logq = disc.log_probs_batch(batch)
    target = np.eye(disc.K)[batch.labels]
    return -ad.mean(ad.sum_(logq * target, axis=1))


@dataclass
class DiscriminatorNoise:
    """Prior draws and the discrete sentences sampled from them."""

    z: np.ndarray
    c: Dict[str, np.ndarray]
    samples: Batch

    @classmethod
    def draw(
        cls, model: CtrlGenModel, n: int, max_T: int, rng: np.random.Generator, tau: float = 1.0
    ) -> "DiscriminatorNoise":
        z, c = model.sample_prior(n, rng)
        seqs = model.generator.sample(z, model.code(c), tau, max_T, rng)
        return cls(z, c, Batch.from_sequences(seqs))


def loss_disc_unsupervised(
    model: CtrlGenModel,
    attribute: str,
    noise: DiscriminatorNoise,
    weights: LossWeights,
    use_codes: bool = True,
) -> Tuple[Tensor, float]:
    """mean[-log q_D(c|x) + beta * H(q_D(.|x))] over generated sentences.

    Entropy is penalised (minimum-entropy regularisation); with
    ``reward_entropy`` the entropy enters with the opposite sign.
    ``use_codes=False`` drops the likelihood term and keeps only the entropy.
    Returns the loss and the mean entropy.
    """
    disc = model.discriminators[attribute]
    logq = disc.log_probs_batch(noise.samples)
    ent = ad.mean(_entropy_t(logq))
    sign = -1.0 if weights.reward_entropy else 1.0
    loss = ent * (sign * weights.beta)
    if use_codes:
        target = np.eye(disc.K)[np.asarray(noise.c[attribute])]
        loss = -ad.mean(ad.sum_(logq * target, axis=1)) + loss
    return loss, ent.item()


def loss_discriminator(
    model: CtrlGenModel,
    attribute: str,
    labeled: Batch,
    noise: Optional[DiscriminatorNoise],
    weights: LossWeights,
) -> Tuple[Tensor, LossReport]:
    sup = loss_disc_supervised(model, attribute, labeled)
    total = sup
    unsup_v = ent_v = 0.0
    if weights.lambda_u > 0 and noise is not None:
        unsup, ent_v = loss_disc_unsupervised(model, attribute, noise, weights)
        unsup_v = unsup.item()
        total = sup + unsup * weights.lambda_u
    rep = LossReport(
        {"disc_sup": sup.item(), "disc_unsup": unsup_v, "disc_entropy": ent_v, "disc_total": total.item()}
    )
    return total, rep
