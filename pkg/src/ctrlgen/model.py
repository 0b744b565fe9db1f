"""LSTM generator, LSTM variational encoder and CNN attribute discriminators.

All three networks read token sequences either as integer ids or as rows of a
(possibly soft) one-hot matrix; an id lookup and a one-hot row times the
embedding matrix give the same vector, so generated soft sentences and real
sentences travel the same path.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .text import BOS, EOS, PAD, Batch

LOG_2PI = math.log(2.0 * math.pi)
_NEG = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    attributes: List[Tuple[str, int]]
    d_emb: int = 64
    d_hid: int = 64
    d_z: int = 16
    n_filters: int = 100
    windows: Tuple[int, ...] = (3, 4, 5)
    feed_latent: bool = False
    init_scale: float = 0.1

    @property
    def d_c(self) -> int:
        return sum(k for _, k in self.attributes)


class Module:
    """Named parameter container; ``frozen()`` hands out detached parameters."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self.params: Dict[str, Tensor] = {}
        self._frozen = False

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.params[self.prefix + name] = t
        return t

    def p(self, name: str) -> Tensor:
        t = self.params[self.prefix + name]
        return t.detach() if self._frozen else t

    @contextlib.contextmanager
    def frozen(self):
        prev = self._frozen
        self._frozen = True
        try:
            yield self
        finally:
            self._frozen = prev


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


def _pad_mask(vocab_size: int) -> np.ndarray:
    m = np.ones((vocab_size, 1))
    m[PAD] = 0.0
    return m


class LSTM:
    """Single-layer LSTM cell; gate columns are ordered [input, forget, output, cell]."""

    def __init__(self, owner: Module, d_in: int, d_hid: int, rng, scale: float):
        self.owner, self.H = owner, d_hid
        owner.add_param("lstm.Wx", _uniform(rng, (d_in, 4 * d_hid), scale))
        owner.add_param("lstm.Wh", _uniform(rng, (d_hid, 4 * d_hid), scale))
        b = np.zeros(4 * d_hid)
        b[d_hid : 2 * d_hid] = 1.0
        owner.add_param("lstm.b", b)

    def project_inputs(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.owner.p("lstm.Wx")) + self.owner.p("lstm.b")

    def step(self, xw: Tensor, h: Tensor, c: Tensor, Wh: Tensor) -> Tuple[Tensor, Tensor]:
        H = self.H
        gates = xw + ad.matmul(h, Wh)
        s = ad.sigmoid(gates[:, : 3 * H])
        g = ad.tanh(gates[:, 3 * H :])
        c = s[:, H : 2 * H] * c + s[:, :H] * g
        h = s[:, 2 * H :] * ad.tanh(c)
        return h, c


class Generator(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__("gen.")
        self.cfg = cfg
        V, E, H = cfg.vocab_size, cfg.d_emb, cfg.d_hid
        s = cfg.init_scale
        self.pad_mask = _pad_mask(V)
        self.add_param("emb", _uniform(rng, (V, E), s) * self.pad_mask)
        self.lstm = LSTM(self, E, H, rng, s)
        if cfg.feed_latent:
            self.add_param("lstm.Wz", _uniform(rng, (cfg.d_z + cfg.d_c, 4 * H), s))
        self.add_param("init.W", _uniform(rng, (cfg.d_z + cfg.d_c, 2 * H), s))
        self.add_param("init.b", np.zeros(2 * H))
        self.add_param("out.W", _uniform(rng, (H, V), s))
        self.add_param("out.b", np.zeros(V))

    def embedding(self) -> Tensor:
        return self.p("emb") * self.pad_mask

    def _start(self, z: Tensor, c: Tensor):
        zc = ad.concat([z, c], axis=1)
        s = ad.matmul(zc, self.p("init.W")) + self.p("init.b")
        H = self.cfg.d_hid
        extra = ad.matmul(zc, self.p("lstm.Wz")) if self.cfg.feed_latent else None
        return s[:, :H], s[:, H:], extra

    def logits(self, h: Tensor) -> Tensor:
        return ad.matmul(h, self.p("out.W")) + self.p("out.b")

    def teacher_forced(self, z: Tensor, c: Tensor, batch: Batch) -> Tuple[Tensor, np.ndarray]:
        """Log-probability of each gold next token, shape (B, L-1), and its 0/1 mask."""
        ids = batch.ids
        inputs, targets = ids[:, :-1], ids[:, 1:]
        steps = inputs.shape[1]
        mask = batch.mask[:, 1:]
        h, cell, extra = self._start(z, c)
        xw = self.lstm.project_inputs(ad.gather_rows(self.embedding(), inputs))
        if extra is not None:
            xw = xw + ad.reshape(extra, (extra.shape[0], 1, extra.shape[1]))
        Wh = self.p("lstm.Wh")
        hs = []
        for t in range(steps):
            h, cell = self.lstm.step(xw[:, t, :], h, cell, Wh)
            hs.append(h)
        logp = ad.log_softmax(self.logits(ad.stack(hs, axis=1)))
        onehot = np.zeros(logp.shape)
        np.put_along_axis(onehot, targets[:, :, None], 1.0, axis=2)
        # PAD targets pick nothing: their log-prob is masked to exactly zero
        onehot *= mask[:, :, None]
        return ad.sum_(logp * onehot, axis=2), mask

    def soft_decode(self, z: Tensor, c: Tensor, tau: float, T: int) -> Tensor:
        """Roll out T steps feeding ``softmax(o_t / tau) @ emb`` as the next input."""
        if not tau > 0:
            raise ValueError(f"soft decoding needs tau > 0, got {tau}")
        if T < 1:
            raise ValueError("soft decoding needs T >= 1")
        B = z.shape[0]
        h, cell, extra = self._start(z, c)
        emb = self.embedding()
        x = ad.gather_rows(emb, np.full(B, BOS))
        Wh = self.p("lstm.Wh")
        rows = []
        for _ in range(T):
            xw = self.lstm.project_inputs(x)
            if extra is not None:
                xw = xw + extra
            h, cell = self.lstm.step(xw, h, cell, Wh)
            p = ad.softmax(self.logits(h), tau=tau)
            rows.append(p)
            x = ad.matmul(p, emb)
        return ad.stack(rows, axis=1)

    def _rollout(self, z, c, max_T: int, pick) -> List[List[int]]:
        with ad.no_grad():
            B = z.shape[0]
            h, cell, extra = self._start(as_const(z), as_const(c))
            emb = self.embedding()
            tok = np.full(B, BOS)
            Wh = self.p("lstm.Wh")
            out: List[List[int]] = [[] for _ in range(B)]
            done = np.zeros(B, dtype=bool)
            for _ in range(max_T):
                xw = self.lstm.project_inputs(ad.gather_rows(emb, tok))
                if extra is not None:
                    xw = xw + extra
                h, cell = self.lstm.step(xw, h, cell, Wh)
                tok = pick(self.logits(h).data)
                for b in np.flatnonzero(~done):
                    if tok[b] == EOS:
                        done[b] = True
                    else:
                        out[b].append(int(tok[b]))
                if done.all():
                    break
        return out

    def sample(self, z, c, tau: float, max_T: int, rng: np.random.Generator) -> List[List[int]]:
        """Ancestral sampling from ``softmax(o_t / tau)``; stops at EOS or max_T."""
        if not tau > 0:
            raise ValueError(f"sampling needs tau > 0, got {tau}")

        def pick(logits):
            p = ad.softmax(logits, tau=tau).data
            u = rng.random(p.shape[0])
            cdf = np.cumsum(p, axis=1)
            return np.minimum((cdf < u[:, None]).sum(axis=1), p.shape[1] - 1)

        return self._rollout(z, c, max_T, pick)

    def greedy(self, z, c, max_T: int) -> List[List[int]]:
        return self._rollout(z, c, max_T, lambda logits: np.argmax(logits, axis=1))


def as_const(x) -> Tensor:
    return x.detach() if isinstance(x, Tensor) else Tensor(x)


def rows_and_lengths(batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
    """Ids after BOS (tokens, EOS, PAD...) and the count of non-PAD entries."""
    return batch.ids[:, 1:], batch.lengths - 1


def one_hot(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    out = np.zeros(ids.shape + (vocab_size,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__("enc.")
        self.cfg = cfg
        V, E, H, Z = cfg.vocab_size, cfg.d_emb, cfg.d_hid, cfg.d_z
        s = cfg.init_scale
        self.pad_mask = _pad_mask(V)
        self.add_param("emb", _uniform(rng, (V, E), s) * self.pad_mask)
        self.lstm = LSTM(self, E, H, rng, s)
        self.add_param("mu.W", _uniform(rng, (H, Z), s))
        self.add_param("mu.b", np.zeros(Z))
        self.add_param("logvar.W", _uniform(rng, (H, Z), s))
        self.add_param("logvar.b", np.zeros(Z))

    def embedding(self) -> Tensor:
        return self.p("emb") * self.pad_mask

    def _run(self, x: Tensor, lengths: np.ndarray) -> Tuple[Tensor, Tensor]:
        B, L = x.shape[0], x.shape[1]
        H = self.cfg.d_hid
        xw = self.lstm.project_inputs(x)
        Wh = self.p("lstm.Wh")
        h = Tensor(np.zeros((B, H)))
        cell = Tensor(np.zeros((B, H)))
        for t in range(int(min(L, lengths.max()))):
            h_new, c_new = self.lstm.step(xw[:, t, :], h, cell, Wh)
            live = (t < lengths).astype(np.float64)[:, None]
            if live.all():
                h, cell = h_new, c_new
            else:
                # finished rows carry their final state forward untouched
                h = h_new * live + h * (1.0 - live)
                cell = c_new * live + cell * (1.0 - live)
            if not np.isfinite(h.data).all():
                raise FloatingPointError(f"encoder: non-finite activation at step {t}")
        mu = ad.matmul(h, self.p("mu.W")) + self.p("mu.b")
        logvar = ad.matmul(h, self.p("logvar.W")) + self.p("logvar.b")
        return mu, logvar

    def encode(self, batch: Batch) -> Tuple[Tensor, Tensor]:
        ids, lengths = rows_and_lengths(batch)
        return self._run(ad.gather_rows(self.embedding(), ids), lengths)

    def encode_rows(self, rows, lengths: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        rows = as_tensor_rows(rows)
        if lengths is None:
            lengths = np.full(rows.shape[0], rows.shape[1])
        return self._run(ad.matmul(rows, self.embedding()), np.asarray(lengths))

    def log_density(self, z, rows, lengths: Optional[np.ndarray] = None) -> Tensor:
        """Per-example log q_E(z | rows) of a diagonal Gaussian, constant included."""
        mu, logvar = self.encode_rows(rows, lengths)
        return gaussian_log_density(z, mu, logvar)


def as_tensor_rows(rows) -> Tensor:
    return rows if isinstance(rows, Tensor) else Tensor(rows)


def gaussian_log_density(z, mu: Tensor, logvar: Tensor) -> Tensor:
    z = ad.as_tensor(z)
    if z.shape != mu.shape:
        raise ValueError(f"log density: z shape {z.shape} vs mean shape {mu.shape}")
    diff = z - mu
    quad = ad.sum_(diff * diff * ad.exp(-logvar), axis=1)
    out = (quad + ad.sum_(logvar, axis=1)) * -0.5 - 0.5 * mu.shape[1] * LOG_2PI
    if not np.isfinite(out.data).all():
        raise FloatingPointError("encoder log density is not finite")
    return out


def reparameterize(mu: Tensor, logvar: Tensor, eps: np.ndarray) -> Tensor:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape or logvar.shape != mu.shape:
        raise ValueError(f"reparameterize: shapes mu {mu.shape}, logvar {logvar.shape}, eps {eps.shape}")
    return mu + ad.exp(logvar * 0.5) * eps


class Discriminator(Module):
    """Sentence CNN: windowed convolutions, masked max-over-time, affine head."""

    def __init__(self, cfg: ModelConfig, name: str, n_classes: int, rng):
        super().__init__(f"disc.{name}.")
        self.cfg, self.name, self.K = cfg, name, n_classes
        V, E, F = cfg.vocab_size, cfg.d_emb, cfg.n_filters
        s = cfg.init_scale
        self.pad_mask = _pad_mask(V)
        self.add_param("emb", _uniform(rng, (V, E), s) * self.pad_mask)
        for w in cfg.windows:
            self.add_param(f"conv{w}.W", _uniform(rng, (w * E, F), s))
            self.add_param(f"conv{w}.b", np.zeros(F))
        self.add_param("head.W", _uniform(rng, (len(cfg.windows) * F, n_classes), s))
        self.add_param("head.b", np.zeros(n_classes))

    def embedding(self) -> Tensor:
        return self.p("emb") * self.pad_mask

    def logits(self, rows=None, lengths: Optional[np.ndarray] = None, ids: Optional[np.ndarray] = None) -> Tensor:
        """Class logits for stochastic ``rows`` (B, L, V) or integer ``ids`` (B, L).

        Windows start at every position before ``lengths``; positions past the
        end read zero vectors, so trailing PAD never changes the output.
        """
        if ids is not None:
            x = ad.gather_rows(self.embedding(), ids)
        else:
            rows = as_tensor_rows(rows)
            if rows.shape[-1] != self.cfg.vocab_size:
                raise ValueError(f"discriminator: rows have width {rows.shape[-1]}, vocab is {self.cfg.vocab_size}")
            x = ad.matmul(rows, self.embedding())
        B, L, E = x.shape
        lengths = np.full(B, L) if lengths is None else np.asarray(lengths)
        wmax = max(self.cfg.windows)
        x = ad.concat([x, Tensor(np.zeros((B, wmax - 1, E)))], axis=1)
        bias = np.where(np.arange(L)[None, :] < lengths[:, None], 0.0, _NEG)[:, :, None]
        pooled = []
        for w in self.cfg.windows:
            win = ad.concat([x[:, k : k + L, :] for k in range(w)], axis=2)
            feat = ad.relu(ad.matmul(win, self.p(f"conv{w}.W")) + self.p(f"conv{w}.b"))
            pooled.append(ad.max_(feat + bias, axis=1))
        hidden = ad.concat(pooled, axis=1)
        return ad.matmul(hidden, self.p("head.W")) + self.p("head.b")

    def log_probs(self, rows=None, lengths=None, ids=None) -> Tensor:
        return ad.log_softmax(self.logits(rows, lengths, ids))

    def probs(self, rows=None, lengths=None, ids=None) -> Tensor:
        return ad.softmax(self.logits(rows, lengths, ids))

    def log_probs_batch(self, batch: Batch) -> Tensor:
        ids, lengths = rows_and_lengths(batch)
        return self.log_probs(ids=ids, lengths=lengths)


class CtrlGenModel:
    """Generator, encoder and one discriminator per controlled attribute."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 7])
        self.generator = Generator(cfg, rng)
        self.encoder = Encoder(cfg, rng)
        self.discriminators: Dict[str, Discriminator] = {
            name: Discriminator(cfg, name, k, rng) for name, k in cfg.attributes
        }

    @property
    def attribute_names(self) -> List[str]:
        return [n for n, _ in self.cfg.attributes]

    def n_categories(self, attribute: str) -> int:
        return dict(self.cfg.attributes)[attribute]

    def parameters(self) -> Dict[str, Tensor]:
        out = dict(self.generator.params)
        out.update(self.encoder.params)
        for d in self.discriminators.values():
            out.update(d.params)
        return out

    def code(self, c_idx: Mapping[str, np.ndarray]) -> np.ndarray:
        """Concatenate one one-hot block per attribute, in declaration order."""
        blocks = []
        for name, k in self.cfg.attributes:
            idx = np.asarray(c_idx[name], dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= k):
                raise ValueError(f"code for {name!r} outside 0..{k - 1}")
            blocks.append(np.eye(k)[idx])
        if not blocks:
            n = len(next(iter(c_idx.values()))) if c_idx else 0
            return np.zeros((n, 0))
        return np.concatenate(blocks, axis=1)

    def sample_prior(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """z ~ N(0, I) first, then each attribute's code uniformly, in declaration order."""
        z = rng.standard_normal((n, self.cfg.d_z))
        c = {name: rng.integers(k, size=n) for name, k in self.cfg.attributes}
        return z, c


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)
