"""Synthetic Markov text and tiny windowed-MLP language models.

A :class:`TinyLM` embeds the last ``window`` tokens, concatenates the
embeddings (zero-padded before the sequence start), runs them through
``n_layers`` tanh layers and projects to vocabulary logits. All parameters
sit in one flat float64 vector; ``params`` exposes named views into it.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .divergences import per_sequence_cross_entropy
from .errors import DimensionMismatchError, DivergedError, TokenOutOfRangeError
from .numerics import entropy

# corpus streams derived from the source seed; disjoint by construction
STREAM_TRAIN = 1
STREAM_EVAL = 2
STREAM_TEACHER = 3
STREAM_TEACHER_VAL = 4


class MarkovSource:
    """Order-``k`` Markov chain over ``vocab`` tokens.

    ``table`` has one row per context (``vocab ** order`` rows, most recent
    token varying fastest) holding the next-token distribution.
    """

    def __init__(self, table, order=2, seed=0):
        table = np.asarray(table, dtype=np.float64)
        vocab = table.shape[1]
        if order < 1:
            raise ValueError("order must be at least 1")
        if table.shape != (vocab**order, vocab):
            raise ValueError(f"table must have shape ({vocab ** order}, {vocab})")
        if np.any(table < 0) or np.max(np.abs(table.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("table rows must be probability vectors")
        self.table = table
        self.vocab = vocab
        self.order = order
        self.seed = seed
        self._cdf = np.cumsum(table, axis=1)

    @classmethod
    def dirichlet(cls, vocab=32, order=2, alpha=0.3, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        table = rng.dirichlet(np.full(vocab, alpha), size=vocab**order)
        table /= table.sum(axis=1, keepdims=True)
        return cls(table, order=order, seed=seed)

    @classmethod
    def uniform(cls, vocab=32, order=2, seed=0):
        return cls(np.full((vocab**order, vocab), 1.0 / vocab), order=order, seed=seed)

    def state_index(self, context):
        """Row index of the last ``order`` tokens of ``context`` (last axis)."""
        context = np.asarray(context)[..., -self.order :]
        idx = np.zeros(context.shape[:-1], dtype=np.int64)
        for j in range(self.order):
            idx = idx * self.vocab + context[..., j]
        return idx

    def sample(self, rng, n_sequences, length):
        seqs = np.empty((n_sequences, length), dtype=np.int64)
        seqs[:, : self.order] = rng.integers(0, self.vocab, size=(n_sequences, self.order))
        for n in range(self.order, length):
            cdf = self._cdf[self.state_index(seqs[:, n - self.order : n])]
            u = rng.random(n_sequences)[:, None]
            seqs[:, n] = np.minimum((u >= cdf).sum(axis=1), self.vocab - 1)
        return seqs

    def _transition_matrix(self):
        # context chain: s = (..., x) -> s' = (..., x, c) with probability table[s, c]
        n = self.vocab**self.order
        P = np.zeros((n, n))
        tail = (np.arange(n) % (self.vocab ** (self.order - 1))) * self.vocab
        for c in range(self.vocab):
            P[np.arange(n), tail + c] += self.table[:, c]
        return P

    def stationary(self, tol=1e-14, max_iter=100000):
        P = self._transition_matrix()
        pi = np.full(P.shape[0], 1.0 / P.shape[0])
        for _ in range(max_iter):
            nxt = pi @ P
            if np.max(np.abs(nxt - pi)) < tol:
                return nxt
            pi = nxt
        return pi

    def row_entropies(self):
        return entropy(self.table)

    def entropy_rate(self):
        """Stationary entropy rate ``sum_s pi(s) H(row_s)`` in nats."""
        return float(self.stationary() @ self.row_entropies())

    def bayes_cross_entropy(self, length):
        """Lowest achievable mean next-token CE on corpora of ``length`` tokens.

        Targets are positions ``1 .. length - 1``; burn-in targets are uniform
        and cost ``ln V`` each, later ones follow the context chain started
        from the uniform burn-in.
        """
        P = self._transition_matrix()
        h = self.row_entropies()
        costs = [math.log(self.vocab)] * (min(self.order, length) - 1)
        mu = np.full(P.shape[0], 1.0 / P.shape[0])
        for _ in range(self.order, length):
            costs.append(float(mu @ h))
            mu = mu @ P
        return float(np.mean(costs))


def generate_corpus(source, n_sequences, length, stream=STREAM_TRAIN):
    """Sample ``n_sequences`` token sequences; a pure function of the source seed and stream."""
    if length <= source.order:
        raise ValueError("sequence length must exceed the source order")
    rng = np.random.default_rng(np.random.SeedSequence([source.seed, stream]))
    return source.sample(rng, n_sequences, length)


def write_corpus(path, corpus):
    with open(path, "w") as fh:
        for row in corpus:
            fh.write(" ".join(str(int(t)) for t in row) + "\n")


def read_corpus(path):
    with open(path) as fh:
        rows = [[int(t) for t in line.split()] for line in fh if line.strip()]
    return np.asarray(rows, dtype=np.int64)


@dataclass
class _Cache:
    tokens: np.ndarray
    windows: list
    activations: list


class TinyLM:
    """Windowed MLP language model with analytic gradients."""

    def __init__(self, vocab=32, embed_dim=16, hidden_dim=16, n_layers=1, window=3,
                 context_length=24, seed=0, role="student", init_std=0.08):
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.window = window
        self.context_length = context_length
        self.seed = seed
        self.role = role
        shapes = [("emb", (vocab, embed_dim))]
        fan_in = window * embed_dim
        for layer in range(n_layers):
            shapes.append((f"w{layer}", (fan_in, hidden_dim)))
            shapes.append((f"b{layer}", (hidden_dim,)))
            fan_in = hidden_dim
        shapes.append(("w_out", (hidden_dim, vocab)))
        shapes.append(("b_out", (vocab,)))
        self.segments = {}
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            self.segments[name] = (offset, shape)
            offset += size
        self.theta = np.zeros(offset)
        self._bind()
        rng = np.random.default_rng(seed)
        for name, (_, shape) in self.segments.items():
            if not name.startswith("b"):
                self.params[name][...] = rng.normal(0.0, init_std, size=shape)

    def _bind(self):
        self.params = {
            name: self.theta[off : off + int(np.prod(shape))].reshape(shape)
            for name, (off, shape) in self.segments.items()
        }

    @property
    def n_params(self):
        return self.theta.size

    def config(self):
        return {
            "vocab": self.vocab,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "window": self.window,
            "context_length": self.context_length,
            "seed": self.seed,
            "role": self.role,
        }

    def checksum(self):
        return hashlib.sha256(self.theta.astype("<f8").tobytes()).hexdigest()

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab):
            raise TokenOutOfRangeError(f"token ids must lie in [0, {self.vocab})")
        if tokens.shape[1] > self.context_length:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds context {self.context_length}")
        return tokens.astype(np.int64)

    def forward(self, tokens, return_cache=False):
        """Logits ``(B, T, V)`` and pooled final hidden state ``(B, M)``."""
        tokens = self._check_tokens(tokens)
        B, T = tokens.shape
        emb = self.params["emb"]
        E = self.embed_dim
        x = np.zeros((B, T, self.window * E))
        windows = []
        for j in range(self.window):
            lag = self.window - 1 - j
            if lag >= T:
                windows.append(None)
                continue
            x[:, lag:, j * E : (j + 1) * E] = emb[tokens[:, : T - lag]]
            windows.append(lag)
        acts = [x]
        h = x
        for layer in range(self.n_layers):
            h = np.tanh(h @ self.params[f"w{layer}"] + self.params[f"b{layer}"])
            acts.append(h)
        logits = h @ self.params["w_out"] + self.params["b_out"]
        pooled = h.mean(axis=1)
        if return_cache:
            return logits, pooled, _Cache(tokens, windows, acts)
        return logits, pooled

    def backward(self, cache, dlogits, dpooled=None):
        """Flat gradient of ``sum(dlogits * logits) + sum(dpooled * pooled)``."""
        grad = np.zeros_like(self.theta)
        g = {name: grad[off : off + int(np.prod(shape))].reshape(shape)
             for name, (off, shape) in self.segments.items()}
        acts = cache.activations
        h = acts[-1]
        B, T, M = h.shape
        V = self.vocab
        g["w_out"][...] = h.reshape(-1, M).T @ dlogits.reshape(-1, V)
        g["b_out"][...] = dlogits.sum(axis=(0, 1))
        dh = dlogits @ self.params["w_out"].T
        if dpooled is not None:
            dh = dh + dpooled[:, None, :] / T
        for layer in reversed(range(self.n_layers)):
            out = acts[layer + 1]
            inp = acts[layer]
            da = dh * (1.0 - out * out)
            g[f"w{layer}"][...] = inp.reshape(-1, inp.shape[-1]).T @ da.reshape(-1, da.shape[-1])
            g[f"b{layer}"][...] = da.sum(axis=(0, 1))
            dh = da @ self.params[f"w{layer}"].T
        E = self.embed_dim
        tokens = cache.tokens
        for j, lag in enumerate(cache.windows):
            if lag is None:
                continue
            dx = dh[:, lag:, j * E : (j + 1) * E].reshape(-1, E)
            np.add.at(g["emb"], tokens[:, : T - lag].ravel(), dx)
        return grad

    def copy(self):
        other = TinyLM.__new__(TinyLM)
        other.__dict__.update(self.__dict__)
        other.segments = dict(self.segments)
        other.theta = self.theta.copy()
        other._bind()
        return other


def forward(model, tokens):
    return model.forward(tokens)


def split_inputs(corpus):
    """Model inputs and next-token targets of a ``(B, T)`` corpus."""
    corpus = np.asarray(corpus)
    return corpus[:, :-1], corpus[:, 1:]


# ---------------------------------------------------------------------------
# checkpoints: <u64 header length><JSON header><float64 LE parameters>


def save_checkpoint(path, model, extra=None):
    header = {
        "format": "betakd-checkpoint-v1",
        "model": model.config(),
        "segments": {n: [off, list(shape)] for n, (off, shape) in model.segments.items()},
        "n_params": int(model.n_params),
        "checksum": model.checksum(),
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(model.theta.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f8")
    model = TinyLM(**header["model"])
    if data.size != model.n_params:
        raise ValueError(f"checkpoint holds {data.size} values, model needs {model.n_params}")
    model.theta[...] = data
    return model, header


# ---------------------------------------------------------------------------
# feature projection


class FeatureProjector:
    """Frozen projections of teacher and student pooled features to ``dim``.

    Both matrices have orthonormal columns (QR of a seeded Gaussian), so
    ``f @ P`` never increases the norm.
    """

    def __init__(self, teacher_dim, student_dim, dim=16, seed=0):
        if dim > min(teacher_dim, student_dim):
            raise ValueError("projection dim cannot exceed either hidden dim")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
        self.dim = dim
        self.teacher = np.linalg.qr(rng.normal(size=(teacher_dim, dim)))[0]
        self.student = np.linalg.qr(rng.normal(size=(student_dim, dim)))[0]
        self.teacher.setflags(write=False)
        self.student.setflags(write=False)

    def matrix(self, side):
        if side not in ("teacher", "student"):
            raise ValueError(f"side must be 'teacher' or 'student', got {side!r}")
        return self.teacher if side == "teacher" else self.student

    def project(self, f, side):
        P = self.matrix(side)
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != P.shape[0]:
            raise DimensionMismatchError(f"{side} features must have dim {P.shape[0]}, got {f.shape[-1]}")
        return f @ P


def project_features(proj, f, side):
    return proj.project(f, side)


# ---------------------------------------------------------------------------
# teacher pretraining


@dataclass
class TeacherConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    n_layers: int = 2
    steps: int = 3000
    lr: float = 3e-3
    batch_size: int = 32
    seq_len: int = 24
    seed: int = 0
    tolerance: float = 0.05
    eval_every: int = 100
    val_sequences: int = 512


def mean_cross_entropy(model, corpus, skip=0):
    """Mean next-token CE, ignoring the first ``skip`` targets of every sequence."""
    inputs, targets = split_inputs(corpus)
    logits, _ = model.forward(inputs)
    return float(np.mean(per_sequence_cross_entropy(logits[:, skip:], targets[:, skip:])[0]))


def chain_cross_entropy(model, source, corpus):
    """CE on the targets the chain generated (burn-in tokens are pure noise)."""
    return mean_cross_entropy(model, corpus, skip=source.order - 1)


def pretrain_teacher(source, config=None, log=None):
    """Fit a teacher with CE only on fresh samples from ``source``.

    Validation CE is scored on chain-generated targets only and compared with
    the stationary entropy rate; training stops once it is within
    ``tolerance`` of that rate or the step budget runs out. Raises :class:`DivergedError` if validation CE is
    above its initial value after a quarter of the budget.
    """
    from .optim import Optimizer

    cfg = config or TeacherConfig()
    model = TinyLM(vocab=source.vocab, embed_dim=cfg.embed_dim, hidden_dim=cfg.hidden_dim,
                   n_layers=cfg.n_layers, window=source.order + 1, context_length=cfg.seq_len,
                   seed=cfg.seed, role="teacher")
    opt = Optimizer("adam", cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([source.seed, STREAM_TEACHER, cfg.seed]))
    val = generate_corpus(source, cfg.val_sequences, cfg.seq_len, STREAM_TEACHER_VAL)
    floor = source.entropy_rate()
    initial = chain_cross_entropy(model, source, val)
    checked_divergence = False
    history = []
    for step in range(cfg.steps):
        if step % cfg.eval_every == 0:
            val_ce = chain_cross_entropy(model, source, val)
            history.append((step, val_ce))
            if log:
                log(f"teacher step {step}: val ce {val_ce:.4f} (floor {floor:.4f})")
            if val_ce <= floor + cfg.tolerance:
                break
            if not checked_divergence and step >= cfg.steps // 4:
                checked_divergence = True
                if val_ce > initial:
                    raise DivergedError(f"teacher validation CE {val_ce:.4f} above initial {initial:.4f}")
        batch = source.sample(rng, cfg.batch_size, cfg.seq_len)
        inputs, targets = split_inputs(batch)
        logits, _, cache = model.forward(inputs, return_cache=True)
        _, dlogits = per_sequence_cross_entropy(logits, targets)
        grad = model.backward(cache, dlogits / cfg.batch_size)
        opt.step({"theta": model.theta}, {"theta": grad})
    else:
        history.append((cfg.steps, chain_cross_entropy(model, source, val)))
    model.pretrain_history = history
    return model
