"""Training loop: VAE initialisation, then alternating discriminator and generator steps.

Randomness never flows through a long-lived generator. Each step builds its
own ``numpy`` generator from ``(seed, stream, counter)``:

* pretraining: batch order per epoch, then for step s the noise stream draws
  reparameterization noise and the prior code c, in that order;
* discriminator for attribute a: labeled batch order per epoch, then prior
  draws (z, then each attribute's c) and token sampling;
* generator: batch order per epoch, then reparameterization noise, wake-phase
  codes from the discriminators, then prior draws (z, c) for the soft rollout.

Keying streams on counters makes a resumed run bit-identical to an
uninterrupted one and keeps each attribute's stream independent of the others.
"""

from __future__ import annotations

import dataclasses
import io
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .autodiff import Adam
from .model import CtrlGenModel, ModelConfig
from .text import (
    Batch,
    GrammarSpec,
    Vocabulary,
    build_vocabulary,
    encode,
    encode_labeled,
    make_batches,
    read_corpus,
    read_labeled,
)

log = logging.getLogger(__name__)

MAGIC = b"CTXG"
FORMAT_VERSION = 1

METRIC_COLUMNS = (
    "step",
    "phase",
    "recon_nll",
    "kl",
    "vae",
    "attr_c",
    "attr_z",
    "gen_total",
    "disc_sup",
    "disc_unsup",
    "disc_total",
    "kl_weight",
    "tau",
)

# stream ids for the step-keyed generators
_PRETRAIN_ORDER, _PRETRAIN_NOISE = 11, 12
_GEN_ORDER, _GEN_NOISE = 21, 22
_DISC_ORDER, _DISC_NOISE = 31, 32


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    attributes: List[str] = field(default_factory=lambda: ["sentiment"])
    d_emb: int = 64
    d_hid: int = 64
    d_z: int = 16
    n_filters: int = 100
    windows: List[int] = field(default_factory=lambda: [3, 4, 5])
    feed_latent: bool = False
    init_scale: float = 0.1
    max_len: int = 15
    min_freq: int = 1
    batch_size: int = 32
    lr_gen: float = 1e-3
    lr_enc: float = 1e-3
    lr_disc: float = 1e-3
    vae_pretrain_steps: int = 2000
    joint_steps: int = 1000
    disc_steps_per_cycle: int = 1
    gen_steps_per_cycle: int = 1
    lambda_c: float = 0.1
    lambda_z: float = 0.1
    lambda_u: float = 0.1
    beta: float = 0.1
    kl_anneal_steps: int = 1000
    tau_start: float = 1.0
    tau_end: float = 0.01
    tau_decay_steps: int = 1000
    reward_entropy: bool = False
    checkpoint_every: int = 0
    corpus: str = ""
    grammar: str = ""
    labeled: Dict[str, str] = field(default_factory=dict)
    out_dir: str = ""

    def __post_init__(self):
        for name in (
            "d_emb", "d_hid", "d_z", "n_filters", "max_len", "min_freq", "batch_size",
            "disc_steps_per_cycle", "gen_steps_per_cycle", "kl_anneal_steps", "tau_decay_steps",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"config: {name} must be >= 1")
        for name in ("vae_pretrain_steps", "joint_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"config: {name} must be >= 0")
        self.weights()

    def weights(self) -> obj.LossWeights:
        return obj.LossWeights(
            lambda_c=self.lambda_c,
            lambda_z=self.lambda_z,
            lambda_u=self.lambda_u,
            beta=self.beta,
            kl_anneal_steps=self.kl_anneal_steps,
            tau_start=self.tau_start,
            tau_end=self.tau_end,
            tau_decay_steps=self.tau_decay_steps,
            reward_entropy=self.reward_entropy,
        )

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    # flat "key = value" text

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "labeled":
                for attr, path in value.items():
                    lines.append(f"labeled.{attr} = {path}")
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f for f in dataclasses.fields(cls)}
        kw: dict = {}
        labeled: Dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("labeled."):
                labeled[key[len("labeled."):]] = value
                continue
            if key not in types or key == "labeled":
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            default = getattr(cls(), key)
            if isinstance(default, bool):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"config line {lineno}: {key} expects true/false")
                kw[key] = value.lower() in ("true", "1")
            elif isinstance(default, int):
                kw[key] = int(value)
            elif isinstance(default, float):
                kw[key] = float(value)
            elif isinstance(default, list):
                items = [v.strip() for v in value.split(",") if v.strip()]
                kw[key] = [int(v) for v in items] if key == "windows" else items
            else:
                kw[key] = value
        kw["labeled"] = labeled
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def model_config(config: TrainConfig, vocab_size: int, categories: Mapping[str, Sequence[str]]) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        attributes=[(a, len(categories[a])) for a in config.attributes],
        d_emb=config.d_emb,
        d_hid=config.d_hid,
        d_z=config.d_z,
        n_filters=config.n_filters,
        windows=tuple(config.windows),
        feed_latent=config.feed_latent,
        init_scale=config.init_scale,
    )


@dataclass
class TrainState:
    """Everything a checkpoint holds."""

    config: TrainConfig
    vocab: Vocabulary
    categories: Dict[str, List[str]]
    model: CtrlGenModel
    optimizers: Dict[str, Adam]
    grammar_text: str = ""
    global_step: int = 0
    pretrain_done: int = 0
    cycles_done: int = 0

    @classmethod
    def fresh(cls, config: TrainConfig, vocab: Vocabulary, categories: Mapping[str, Sequence[str]], grammar_text: str = "") -> "TrainState":
        cats = {a: list(categories[a]) for a in config.attributes}
        model = CtrlGenModel(model_config(config, len(vocab), cats), seed=config.seed)
        opts = {
            "gen": Adam(model.generator.params, lr=config.lr_gen),
            "enc": Adam(model.encoder.params, lr=config.lr_enc),
        }
        for a in config.attributes:
            opts[f"disc.{a}"] = Adam(model.discriminators[a].params, lr=config.lr_disc)
        return cls(config, vocab, cats, model, opts, grammar_text)

    @property
    def grammar(self) -> Optional[GrammarSpec]:
        return GrammarSpec.from_text(self.grammar_text) if self.grammar_text else None


# -- checkpoint file ----------------------------------------------------------------


def _write_table(buf: io.BytesIO, entries: Sequence[Tuple[str, np.ndarray]]) -> None:
    buf.write(struct.pack("<Q", len(entries)))
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(np.ascontiguousarray(arr).tobytes())


def _write_block(buf: io.BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<Q")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<I")
            name = self.take(nlen).decode("utf-8")
            (rank,) = self.unpack("<I")
            dims = self.unpack(f"<{rank}Q") if rank else ()
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
            out[name] = arr
        return out

    def block(self) -> str:
        (n,) = self.unpack("<Q")
        return self.take(n).decode("utf-8")


def checkpoint_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _write_table(buf, [(k, p.data) for k, p in state.model.parameters().items()])
    opt_entries = [
        ("train/global_step", np.array(float(state.global_step))),
        ("train/pretrain_done", np.array(float(state.pretrain_done))),
        ("train/cycles_done", np.array(float(state.cycles_done))),
    ]
    for group, opt in state.optimizers.items():
        opt_entries.extend((f"opt.{group}/{k}", v) for k, v in opt.state_arrays().items())
    _write_table(buf, opt_entries)
    _write_block(buf, state.config.to_text())
    _write_block(buf, state.vocab.to_text())
    cats = "".join(f"{a} = {', '.join(c)}\n" for a, c in state.categories.items())
    _write_block(buf, cats)
    _write_block(buf, state.grammar_text)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def state_from_bytes(data: bytes) -> TrainState:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted or truncated)")
    params = r.table()
    opt = r.table()
    config = TrainConfig.from_text(r.block())
    vocab = Vocabulary.from_text(r.block())
    cats: Dict[str, List[str]] = {}
    for line in r.block().splitlines():
        a, v = line.split("=", 1)
        cats[a.strip()] = [c.strip() for c in v.split(",")]
    grammar_text = r.block()
    if r.pos != len(body):
        raise CheckpointError(f"checkpoint has {len(body) - r.pos} trailing bytes")
    state = TrainState.fresh(config, vocab, cats, grammar_text)
    live = state.model.parameters()
    if set(live) != set(params):
        raise CheckpointError(f"parameter names differ: {sorted(set(live) ^ set(params))}")
    for name, t in live.items():
        if params[name].shape != t.shape:
            raise CheckpointError(f"{name}: stored shape {params[name].shape}, model expects {t.shape}")
        t.data[...] = params[name]
    for group, o in state.optimizers.items():
        prefix = f"opt.{group}/"
        o.load_state_arrays({k[len(prefix):]: v for k, v in opt.items() if k.startswith(prefix)})
    state.global_step = int(opt["train/global_step"])
    state.pretrain_done = int(opt["train/pretrain_done"])
    state.cycles_done = int(opt["train/cycles_done"])
    return state


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    return state_from_bytes(Path(path).read_bytes())


# -- metrics ---------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: List[dict] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(",".join(METRIC_COLUMNS) + "\n", encoding="utf-8")

    def add(self, step: int, phase: str, report: obj.LossReport) -> None:
        row = {"step": step, "phase": phase}
        row.update(report.values)
        if not math.isnan(report.kl_weight):
            row["kl_weight"] = report.kl_weight
        if not math.isnan(report.tau):
            row["tau"] = report.tau
        self.rows.append(row)
        if self.path is not None:
            line = ",".join(_fmt(row.get(c)) for c in METRIC_COLUMNS)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")


# -- training ---------------------------------------------------------------------


def _finite(report: obj.LossReport) -> bool:
    return all(math.isfinite(v) for v in report.values.values())


class Trainer:
    """Drives one :class:`TrainState` over an unlabeled corpus and per-attribute labeled sets."""

    def __init__(
        self,
        state: TrainState,
        corpus: Sequence[Sequence[int]],
        labeled: Mapping[str, Sequence[Tuple[Sequence[int], int]]],
        metrics_path=None,
    ):
        missing = [a for a in state.config.attributes if not labeled.get(a)]
        if missing:
            raise ValueError(f"no labeled set for declared attribute(s): {', '.join(missing)}")
        if not corpus:
            raise ValueError("empty training corpus")
        self.state = state
        self.corpus = [list(s) for s in corpus]
        self.labeled = {a: [(list(t), int(k)) for t, k in labeled[a]] for a in state.config.attributes}
        self.metrics = MetricsLog(metrics_path)
        self.weights = state.config.weights()
        self._order_cache: Dict[tuple, Tuple[int, List[Batch]]] = {}

    # construction helpers

    @classmethod
    def from_data(
        cls,
        config: TrainConfig,
        sentences: Sequence[str],
        labeled: Mapping[str, Sequence[Tuple[str, str]]],
        grammar: Optional[GrammarSpec] = None,
        metrics_path=None,
        state: Optional[TrainState] = None,
    ) -> "Trainer":
        if state is None:
            vocab = build_vocabulary(list(sentences), config.min_freq)
            if grammar is not None:
                cats = {a: grammar.categories(a) for a in config.attributes}
            else:
                cats = {a: sorted({lab for lab, _ in labeled.get(a, [])}) for a in config.attributes}
            state = TrainState.fresh(config, vocab, cats, grammar.to_text() if grammar else "")
        vocab = state.vocab
        corpus = [encode(s, vocab, config.max_len) for s in sentences]
        enc = {
            a: encode_labeled(labeled.get(a, []), state.categories[a], vocab, config.max_len)
            for a in config.attributes
        }
        return cls(state, corpus, enc, metrics_path)

    @classmethod
    def from_config(cls, config: TrainConfig, resume=None) -> "Trainer":
        if not config.corpus:
            raise ValueError("config: corpus path is required")
        sentences = read_corpus(config.corpus)
        labeled = {}
        for a in config.attributes:
            if a not in config.labeled:
                raise ValueError(f"config: no labeled.{a} path for declared attribute {a!r}")
            labeled[a] = read_labeled(config.labeled[a])
        grammar = GrammarSpec.load(config.grammar) if config.grammar else None
        state = load_checkpoint(resume) if resume else None
        metrics = Path(config.out_dir) / "metrics.csv" if config.out_dir else None
        return cls.from_data(config, sentences, labeled, grammar, metrics, state)

    @property
    def model(self) -> CtrlGenModel:
        return self.state.model

    @property
    def config(self) -> TrainConfig:
        return self.state.config

    # batching

    def _batch(self, examples, order_stream: tuple, counter: int) -> Batch:
        size = min(self.config.batch_size, len(examples))
        n_batches = math.ceil(len(examples) / size)
        epoch, idx = divmod(counter, n_batches)
        cached = self._order_cache.get(order_stream)
        if cached is None or cached[0] != epoch:
            perm_seed = int(stream(self.config.seed, *order_stream, epoch).integers(2**62))
            cached = (epoch, make_batches(examples, size, perm_seed))
            self._order_cache[order_stream] = cached
        return cached[1][idx]

    # phases

    def _diverged(self, what: str, report: obj.LossReport):
        if self.config.out_dir:
            save_checkpoint(self.state, Path(self.config.out_dir) / "last_finite.ckpt")
        raise TrainingDiverged(f"non-finite loss in {what} at step {self.state.global_step}: {report.values}")

    def pretrain_step(self) -> obj.LossReport:
        st, m = self.state, self.model
        s = st.pretrain_done
        batch = self._batch(self.corpus, (_PRETRAIN_ORDER,), s)
        rng = stream(self.config.seed, _PRETRAIN_NOISE, s)
        eps = rng.standard_normal((batch.size, m.cfg.d_z))
        _, c_prior = m.sample_prior(batch.size, rng)
        kl_w = obj.anneal_kl_weight(st.global_step, self.weights)
        opts = (st.optimizers["gen"], st.optimizers["enc"])
        for o in opts:
            o.zero_grad()
        loss, rep = obj.loss_vae(m, batch, kl_w, eps, c_prior)
        if not _finite(rep):
            self._diverged("pretraining", rep)
        ad.backward(loss)
        for o in opts:
            o.step()
        st.pretrain_done += 1
        st.global_step += 1
        self.metrics.add(st.global_step, "pretrain", rep)
        return rep

    def pretrain(self) -> TrainState:
        while self.state.pretrain_done < self.config.vae_pretrain_steps:
            self.pretrain_step()
        return self.state

    def tau(self) -> float:
        joint = max(0, self.state.global_step - self.config.vae_pretrain_steps)
        return obj.anneal_temperature(joint, self.weights)

    def train_step_discriminator(self, attribute: str, counter: int) -> obj.LossReport:
        st, m = self.state, self.model
        a_idx = self.config.attributes.index(attribute)
        batch = self._batch_labeled(attribute, counter)
        noise = None
        if self.weights.lambda_u > 0:
            rng = stream(self.config.seed, _DISC_NOISE, a_idx, counter)
            noise = obj.DiscriminatorNoise.draw(m, self.config.batch_size, self.config.max_len, rng)
        opt = st.optimizers[f"disc.{attribute}"]
        opt.zero_grad()
        loss, rep = obj.loss_discriminator(m, attribute, batch, noise, self.weights)
        if not _finite(rep):
            self._diverged(f"discriminator {attribute}", rep)
        ad.backward(loss)
        opt.step()
        self.metrics.add(st.global_step, f"disc:{attribute}", rep)
        return rep

    def _batch_labeled(self, attribute: str, counter: int) -> Batch:
        a_idx = self.config.attributes.index(attribute)
        return self._batch(self.labeled[attribute], (_DISC_ORDER, a_idx), counter)

    def train_step_generator(self, counter: int) -> obj.LossReport:
        st, m = self.state, self.model
        batch = self._batch(self.corpus, (_GEN_ORDER,), counter)
        rng = stream(self.config.seed, _GEN_NOISE, counter)
        noise = obj.GeneratorNoise.draw(m, batch, self.config.batch_size, rng)
        kl_w = obj.anneal_kl_weight(st.global_step, self.weights)
        tau = self.tau()
        opts = (st.optimizers["gen"], st.optimizers["enc"])
        for o in opts:
            o.zero_grad()
        loss, rep = obj.loss_generator(m, batch, noise, self.weights, kl_w, tau, self.config.max_len)
        if not _finite(rep):
            self._diverged("generator", rep)
        ad.backward(loss)
        for o in opts:
            o.step()
        st.global_step += 1
        self.metrics.add(st.global_step, "gen", rep)
        return rep

    def cycle(self) -> None:
        cfg, st = self.config, self.state
        k = st.cycles_done
        for attr in cfg.attributes:
            for j in range(cfg.disc_steps_per_cycle):
                self.train_step_discriminator(attr, k * cfg.disc_steps_per_cycle + j)
        for j in range(cfg.gen_steps_per_cycle):
            self.train_step_generator(k * cfg.gen_steps_per_cycle + j)
        st.cycles_done += 1

    def train(self, until_cycle: Optional[int] = None) -> TrainState:
        """Pretrain if needed, then run joint cycles up to ``joint_steps``."""
        self.pretrain()
        target = self.config.joint_steps if until_cycle is None else min(until_cycle, self.config.joint_steps)
        every = self.config.checkpoint_every
        while self.state.cycles_done < target:
            self.cycle()
            if every and self.config.out_dir and self.state.cycles_done % every == 0:
                save_checkpoint(self.state, Path(self.config.out_dir) / "checkpoint.ckpt")
        return self.state


def pretrain_vae(config: TrainConfig) -> TrainState:
    trainer = Trainer.from_config(config)
    state = trainer.pretrain()
    if config.out_dir:
        save_checkpoint(state, Path(config.out_dir) / "pretrained.ckpt")
    return state


def train(config: TrainConfig, resume=None) -> TrainState:
    trainer = Trainer.from_config(config, resume=resume)
    state = trainer.train()
    if config.out_dir:
        save_checkpoint(state, Path(config.out_dir) / "final.ckpt")
    return state
