"""Training loop joining the toy models, the energies and the beta weighting.

One :class:`Trainer` owns a student, a frozen teacher and the per-channel
weighting state. :meth:`Trainer.step` computes the metrics at the current
parameters, then applies one optimizer update to the student and (for the
learnable strategies) to the beta parameters.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .beta import BetaChannel, BetaNet, Mode, assemble_objective, beta_task
from .config import ExperimentConfig
from .divergences import Kind, per_sequence_cross_entropy, per_sequence_loss, energy
from .errors import NonFiniteLossError, NonPositiveLossError, ShapeMismatchError
from .models import (
    STREAM_EVAL,
    STREAM_TRAIN,
    FeatureProjector,
    MarkovSource,
    TeacherConfig,
    TinyLM,
    generate_corpus,
    load_checkpoint,
    pretrain_teacher,
    save_checkpoint,
    split_inputs,
)
from .numerics import entropy, softmax
from .optim import Optimizer

log = logging.getLogger(__name__)

RECORD_FIELDS = (
    "step",
    "ce",
    "loss",
    "beta",
    "weighted",
    "regularizer",
    "total",
    "student_entropy",
    "matching_distance",
    "eval_ce",
    "eval_accuracy",
    "wall_clock_ms",
)


def manual_lambda_from_initial_scales(initial_ce, initial_losses):
    """Weights ``CE(0) / l_k(0)`` that put every channel on the CE scale."""
    out = {}
    for name, loss in initial_losses.items():
        if not loss > 0 or not initial_ce > 0:
            raise NonPositiveLossError(f"initial losses must be positive (channel {name})")
        out[name] = initial_ce / loss
    return out


def matching_distance(teacher_logits, student_logits):
    """Mean ``|z_s - z_t|`` after mean-centring every logit vector."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeMismatchError(f"teacher logits {t.shape} vs student logits {s.shape}")
    t = t - t.mean(axis=-1, keepdims=True)
    s = s - s.mean(axis=-1, keepdims=True)
    return float(np.mean(np.abs(s - t)))


@dataclass
class Evaluation:
    ce: float
    entropy: float
    accuracy: float


def evaluate(model, corpus):
    """Teacher-free CE, mean predictive entropy and greedy next-token accuracy."""
    inputs, targets = split_inputs(corpus)
    logits, _ = model.forward(inputs)
    ce = per_sequence_cross_entropy(logits, targets)[0]
    acc = np.mean(np.argmax(logits, axis=-1) == targets)
    return Evaluation(float(np.mean(ce)), float(np.mean(entropy(softmax(logits)))), float(acc))


class Channel:
    """A distillation channel: its energy plus its weighting state."""

    def __init__(self, name, spec, strategy, beta_state):
        self.name = name
        self.spec = spec
        self.strategy = strategy
        self.beta = beta_state

    @property
    def is_feature(self):
        return self.spec.kind.is_feature


def build_channel(ch_cfg, cfg, vocab, student_hidden, seed, index):
    spec = ch_cfg.spec()
    base_dim = cfg.feature_dim if spec.kind.is_feature else vocab
    d = base_dim * ch_cfg.dim_scale
    name = ch_cfg.channel_name
    if ch_cfg.strategy == "unweighted":
        state = BetaChannel.fixed(name, 1.0, d)
    elif ch_cfg.strategy == "manual":
        # placeholder until the initial scales are known
        state = BetaChannel.fixed(name, ch_cfg.weight or 1.0, d)
    elif ch_cfg.strategy == "beta_task":
        state = BetaChannel.task(name, d, beta_min=cfg.beta_min)
    else:
        net = BetaNet(student_hidden, cfg.beta_hidden, seed=np.random.SeedSequence([seed, 11, index]),
                      beta_min=cfg.beta_min)
        state = BetaChannel.instance(name, d, net)
    state.beta_max = cfg.beta_max
    return Channel(name, spec, ch_cfg.strategy, state)


class Trainer:
    def __init__(self, student, teacher, channels, theta_lr=3e-3, beta_lr=1e-2, optimizer="adam",
                 projector=None, ce_temp=1.0, eval_corpus=None, eval_every=100, record_timing=False):
        self.student = student
        self.teacher = teacher
        self.channels = list(channels)
        self.theta_opt = Optimizer(optimizer, theta_lr)
        self.beta_opt = Optimizer(optimizer, beta_lr)
        self.projector = projector
        self.ce_temp = ce_temp
        self.eval_corpus = eval_corpus
        self.eval_every = eval_every
        self.record_timing = record_timing
        self.step_index = 0
        self.last_theta_grad = None
        self.last_breakdown = None
        if any(c.is_feature for c in self.channels) and projector is None:
            raise ValueError("a feature channel needs a FeatureProjector")

    def beta_params(self):
        out = {}
        for ch in self.channels:
            for key, arr in ch.beta.parameters().items():
                out[f"{ch.name}/{key}"] = arr
        return out

    def _betas(self, pooled_student):
        values, aux = {}, {}
        for ch in self.channels:
            state = ch.beta
            if state.mode is Mode.FIXED:
                values[ch.name] = state.fixed_value
            elif state.mode is Mode.TASK:
                b, db = beta_task(state)
                values[ch.name] = b
                aux[ch.name] = db
            else:
                # pooled features are detached: no gradient flows back into the student
                b, cache = state.net.forward(pooled_student)
                clipped = b > state.beta_max
                values[ch.name] = np.where(clipped, state.beta_max, b)
                aux[ch.name] = (cache, ~clipped)
        return values, aux

    def compute(self, batch):
        """Losses, breakdown and gradients at the current parameters (no update)."""
        inputs, targets = split_inputs(batch)
        B = inputs.shape[0]
        t_logits, t_pooled = self.teacher.forward(inputs)
        s_logits, s_pooled, cache = self.student.forward(inputs, return_cache=True)
        ce, g_ce = per_sequence_cross_entropy(s_logits, targets, self.ce_temp)

        losses, loss_grads = {}, {}
        for ch in self.channels:
            if ch.is_feature:
                ft = self.projector.project(t_pooled, "teacher")
                fs = self.projector.project(s_pooled, "student")
                val, g = energy(ft, fs, ch.spec)
                losses[ch.name] = val
                loss_grads[ch.name] = g @ self.projector.student.T
            else:
                losses[ch.name], loss_grads[ch.name] = per_sequence_loss(t_logits, s_logits, ch.spec)

        betas, aux = self._betas(s_pooled)
        breakdown = assemble_objective(
            ce, [(ch.beta, losses[ch.name], betas[ch.name]) for ch in self.channels],
            drop_fixed_regularizer=True,
        )

        dlogits = g_ce.copy()
        dpooled = None
        for ch in self.channels:
            w = np.broadcast_to(np.asarray(betas[ch.name], dtype=np.float64), (B,))
            if ch.is_feature:
                term = w[:, None] * loss_grads[ch.name]
                dpooled = term if dpooled is None else dpooled + term
            else:
                dlogits += w[:, None, None] * loss_grads[ch.name]
        dlogits /= B
        if dpooled is not None:
            dpooled = dpooled / B
        theta_grad = self.student.backward(cache, dlogits, dpooled)

        beta_grads = {}
        for ch, term in zip(self.channels, breakdown.per_channel):
            state = ch.beta
            if state.mode is Mode.TASK:
                beta_grads[f"{ch.name}/raw"] = np.array([float(term.dtotal_dbeta) * aux[ch.name]])
            elif state.mode is Mode.INSTANCE:
                net_cache, active = aux[ch.name]
                grads, _ = state.net.backward(net_cache, term.dtotal_dbeta * active)
                for key, g in grads.items():
                    beta_grads[f"{ch.name}/{key}"] = g

        return {
            "breakdown": breakdown,
            "theta_grad": theta_grad,
            "beta_grads": beta_grads,
            "betas": betas,
            "teacher_logits": t_logits,
            "student_logits": s_logits,
        }

    def step(self, batch):
        """One training step; returns the metrics record at the pre-update parameters."""
        start = time.perf_counter()
        out = self.compute(batch)
        bd = out["breakdown"]
        grads_ok = np.all(np.isfinite(out["theta_grad"])) and all(
            np.all(np.isfinite(g)) for g in out["beta_grads"].values()
        )
        if not np.isfinite(bd.total) or not grads_ok:
            raise NonFiniteLossError(
                f"non-finite loss at step {self.step_index}",
                dump={
                    "step": self.step_index,
                    "batch": np.asarray(batch).tolist(),
                    "theta_sha256": self.student.checksum(),
                },
            )
        record = {
            "step": self.step_index,
            "ce": bd.ce,
            "loss": {t.name: t.loss for t in bd.per_channel},
            "beta": {t.name: t.beta for t in bd.per_channel},
            "weighted": {t.name: t.weighted for t in bd.per_channel},
            "regularizer": {t.name: t.regularizer for t in bd.per_channel},
            "total": bd.total,
            "student_entropy": float(np.mean(entropy(softmax(out["student_logits"])))),
            "matching_distance": matching_distance(out["teacher_logits"], out["student_logits"]),
            "eval_ce": None,
            "eval_accuracy": None,
            "wall_clock_ms": None,
        }
        if self.eval_corpus is not None and self.step_index % self.eval_every == 0:
            ev = evaluate(self.student, self.eval_corpus)
            record["eval_ce"] = ev.ce
            record["eval_accuracy"] = ev.accuracy

        self.last_theta_grad = out["theta_grad"]
        self.last_breakdown = bd
        self.theta_opt.step({"theta": self.student.theta}, {"theta": out["theta_grad"]})
        if out["beta_grads"]:
            self.beta_opt.step(self.beta_params(), out["beta_grads"])
        self.step_index += 1
        if self.record_timing:
            record["wall_clock_ms"] = (time.perf_counter() - start) * 1000.0
        return record


def train_step(trainer, batch):
    return trainer.step(batch)


# ---------------------------------------------------------------------------
# experiment driver


def build_source(cfg):
    s = cfg.source
    return MarkovSource.dirichlet(vocab=s.vocab, order=s.order, alpha=s.alpha, seed=s.seed)


def obtain_teacher(cfg, source, out_dir=None):
    t = cfg.teacher
    if t.checkpoint:
        teacher, _ = load_checkpoint(t.checkpoint)
        return teacher
    teacher = pretrain_teacher(
        source,
        TeacherConfig(embed_dim=t.embed_dim, hidden_dim=t.hidden_dim, n_layers=t.n_layers, steps=t.steps,
                      lr=t.lr, batch_size=t.batch_size, seq_len=cfg.seq_len, seed=t.seed),
        log=log.debug,
    )
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "teacher.bin"), teacher)
    return teacher


def make_trainer(cfg, teacher, seed, eval_corpus=None):
    student = TinyLM(vocab=cfg.source.vocab, embed_dim=cfg.student.embed_dim, hidden_dim=cfg.student.hidden_dim,
                     n_layers=cfg.student.n_layers, window=cfg.source.order + 1, context_length=cfg.seq_len,
                     seed=seed, role="student")
    channels = [build_channel(c, cfg, cfg.source.vocab, cfg.student.hidden_dim, seed, i)
                for i, c in enumerate(cfg.channels)]
    projector = None
    if any(c.is_feature for c in channels):
        projector = FeatureProjector(teacher.hidden_dim, student.hidden_dim, cfg.feature_dim, seed=cfg.source.seed)
    return Trainer(student, teacher, channels, theta_lr=cfg.optimizer.lr, beta_lr=cfg.optimizer.beta_lr,
                   optimizer=cfg.optimizer.kind, projector=projector, ce_temp=cfg.ce_temp,
                   eval_corpus=eval_corpus, eval_every=cfg.eval_every, record_timing=cfg.record_timing)


def calibrate_manual(trainer, cfg, batch):
    """Fill in manual weights that were not given explicitly."""
    pending = [(ch, c) for ch, c in zip(trainer.channels, cfg.channels) if c.strategy == "manual" and c.weight is None]
    if not pending:
        return {}
    bd = trainer.compute(batch)["breakdown"]
    lam = manual_lambda_from_initial_scales(bd.ce, {t.name: t.loss for t in bd.per_channel})
    for ch, _ in pending:
        ch.beta.fixed_value = lam[ch.name]
    return {ch.name: lam[ch.name] for ch, _ in pending}


@dataclass
class SeedResult:
    seed: int
    records: list
    final: Evaluation
    final_matching_distance: float
    manual_weights: dict
    final_betas: dict


def _json_line(record):
    return json.dumps(record) + "\n"


def train_seed(cfg, teacher, seed, train_corpus, eval_corpus, seed_dir=None):
    trainer = make_trainer(cfg, teacher, seed, eval_corpus)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    n_train = train_corpus.shape[0]
    checkpoints = {0, cfg.steps // 2, cfg.steps}
    records = []
    metrics_fh = None
    if seed_dir:
        os.makedirs(seed_dir, exist_ok=True)
        metrics_fh = open(os.path.join(seed_dir, "metrics.jsonl"), "w")
    manual = {}
    try:
        for step in range(cfg.steps):
            if seed_dir and step in checkpoints:
                save_checkpoint(os.path.join(seed_dir, f"checkpoint_step{step}.bin"), trainer.student)
            batch = train_corpus[rng.integers(0, n_train, size=cfg.batch_size)]
            if step == 0:
                manual = calibrate_manual(trainer, cfg, batch)
            rec = trainer.step(batch)
            records.append(rec)
            if metrics_fh:
                metrics_fh.write(_json_line(rec))
        if seed_dir:
            save_checkpoint(os.path.join(seed_dir, f"checkpoint_step{cfg.steps}.bin"), trainer.student)
    finally:
        if metrics_fh:
            metrics_fh.close()
    final = evaluate(trainer.student, eval_corpus)
    inputs, _ = split_inputs(eval_corpus)
    md = matching_distance(teacher.forward(inputs)[0], trainer.student.forward(inputs)[0])
    final_betas = {}
    if records:
        final_betas = dict(records[-1]["beta"])
    return SeedResult(seed, records, final, md, manual, final_betas)


def _std(values):
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def summarize(cfg, results, teacher_eval, bayes_ce, entropy_rate=None):
    per_seed = []
    for r in results:
        per_seed.append({
            "seed": r.seed,
            "eval_ce": r.final.ce,
            "eval_accuracy": r.final.accuracy,
            "eval_entropy": r.final.entropy,
            "matching_distance": r.final_matching_distance,
            "total_auc": float(sum(rec["total"] for rec in r.records)),
            "manual_weights": r.manual_weights,
            "final_beta": r.final_betas,
        })
    ce = [p["eval_ce"] for p in per_seed]
    acc = [p["eval_accuracy"] for p in per_seed]
    md = [p["matching_distance"] for p in per_seed]
    return {
        "steps": cfg.steps,
        "seeds": [r.seed for r in results],
        "channels": [{"name": c.channel_name, "kind": c.kind, "strategy": c.strategy} for c in cfg.channels],
        "eval_ce_mean": float(np.mean(ce)),
        "eval_ce_std": _std(ce),
        "eval_accuracy_mean": float(np.mean(acc)),
        "eval_accuracy_std": _std(acc),
        "matching_distance_mean": float(np.mean(md)),
        "matching_distance_std": _std(md),
        "teacher_eval_ce": teacher_eval.ce,
        "teacher_eval_accuracy": teacher_eval.accuracy,
        "bayes_ce": bayes_ce,
        "entropy_rate": entropy_rate,
        "per_seed": per_seed,
    }


@dataclass
class ExperimentResult:
    results: list
    summary: dict
    teacher: TinyLM


def run_experiment(cfg: ExperimentConfig, out_dir=None, teacher=None):
    """Pretrain (or load) the teacher, train every seed and summarise.

    With ``out_dir`` set, writes ``seed_<n>/metrics.jsonl``, checkpoints at
    0%, 50% and 100% of the steps, ``teacher.bin`` and ``summary.json``.
    """
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    source = build_source(cfg)
    if teacher is None:
        teacher = obtain_teacher(cfg, source, out_dir)
    train_corpus = generate_corpus(source, cfg.train_sequences, cfg.seq_len, STREAM_TRAIN)
    eval_corpus = generate_corpus(source, cfg.eval_sequences, cfg.seq_len, STREAM_EVAL)
    results = []
    for seed in cfg.seeds:
        seed_dir = os.path.join(out_dir, f"seed_{seed}") if out_dir else None
        results.append(train_seed(cfg, teacher, seed, train_corpus, eval_corpus, seed_dir))
    summary = summarize(cfg, results, evaluate(teacher, eval_corpus), source.bayes_cross_entropy(cfg.seq_len),
                        source.entropy_rate())
    if out_dir:
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
    return ExperimentResult(results, summary, teacher)
