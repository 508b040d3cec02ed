"""Outer expansion loop: N runs, each trained from scratch on a growing source set."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, Domain, LabelVault, hide_labels, minibatch_indices
from .diffcore import one_hot, sgd_step
from .losses import (
    CentroidBank,
    LossFlags,
    NonFiniteLossError,
    StepBatch,
    prepare_step,
    total_loss,
)
from .model import GrlSchedule, GsdeModel, ModelDims, domain_probs, init_model, lam
from .scoring import (
    ScoreTable,
    combined_scores,
    label_propagation,
    neighborhood_scores,
    select_top_fraction,
    selection_size,
)

log = logging.getLogger(__name__)


@dataclass
class TracePoint:
    iteration: int
    accuracy: float
    per_class: list
    disc_src: float
    disc_tgt: float


@dataclass
class RunRecord:
    run: int
    expansion_size: int
    pseudo_accuracy: float
    final_accuracy: float = float("nan")
    per_class_accuracy: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    failed: bool = False
    error: Optional[str] = None
    start_fingerprint: str = ""
    end_fingerprint: str = ""
    scores: Optional[ScoreTable] = field(default=None, repr=False)
    model: Optional[GsdeModel] = field(default=None, repr=False)


class RunFailedError(RuntimeError):
    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


def fingerprint(m: GsdeModel) -> str:
    return hashlib.sha256(m.fingerprint().tobytes()).hexdigest()


def sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def model_dims(cfg: ExperimentConfig, input_dim: int, num_classes: int) -> ModelDims:
    return ModelDims(input_dim=input_dim, hidden=cfg.hidden, bottleneck=cfg.bottleneck_dim,
                     num_classes=num_classes, extractor_layers=cfg.extractor_layers,
                     disc_hidden=cfg.disc_hidden)


def loss_flags(cfg: ExperimentConfig) -> LossFlags:
    a = cfg.ablation
    return LossFlags(adversarial=not a.disable_AD, semantic=not a.disable_MS,
                     semi_supervised=not a.disable_SS,
                     pseudo_as_unlabeled=a.mixmatch_pseudo_as_unlabeled)


class Evaluator:
    """Target accuracy and mean discriminator outputs for a model snapshot.

    This is the only place target ground truth is read, always inside the
    vault's evaluation context.
    """

    def __init__(self, source_stream: Dataset, target: Dataset, vault: LabelVault):
        self.source_x = source_stream.features
        self.target_x = target.features
        self.vault = vault

    def accuracy(self, pred: np.ndarray, index=None) -> tuple[float, list]:
        with self.vault.evaluation():
            truth = self.vault.labels()
        if index is not None:
            truth = truth[np.asarray(index, dtype=np.int64)]
        if len(truth) == 0:
            return float("nan"), []
        per_class = []
        for c in range(int(max(truth.max(), pred.max())) + 1):
            mask = truth == c
            per_class.append(float(np.mean(pred[mask] == c)) if mask.any() else float("nan"))
        return float(np.mean(pred == truth)), per_class

    def __call__(self, m: GsdeModel, iteration: int) -> TracePoint:
        pred = np.argmax(m.forward(self.target_x).probs, axis=1)
        acc, per_class = self.accuracy(pred)
        return TracePoint(iteration, acc, per_class,
                          float(np.mean(domain_probs(m, self.source_x))),
                          float(np.mean(domain_probs(m, self.target_x))))


def train_single_run(cfg: ExperimentConfig, source_stream: Dataset, target: Dataset, run_seed: int,
                     model: Optional[GsdeModel] = None, evaluator: Optional[Evaluator] = None,
                     extra: Optional[Dataset] = None) -> tuple[GsdeModel, list]:
    """Train one run. Returns the final model and its evaluation trace.

    ``model`` continues training from given parameters instead of a fresh
    init. ``extra`` holds pseudo-labelled targets that only enter the
    classification loss.
    """
    if len(source_stream) == 0 or len(target) == 0:
        raise ValueError("source and target sets must be non-empty")
    if model is None:
        dims = model_dims(cfg, source_stream.feature_dim, source_stream.num_classes)
        model = init_model(dims, cfg.bottlenecks, seed=run_seed)
    flags = loss_flags(cfg)
    iters = cfg.iterations_per_run
    schedule = GrlSchedule(cfg.grl_gamma, iters)
    bank = CentroidBank.empty(model.dims.num_classes, model.dims.bottleneck, cfg.theta)
    batch = min(cfg.batch_size, len(source_stream), len(target))
    stream = minibatch_indices(len(source_stream), len(target), batch, run_seed)
    extra_stream = None
    if extra is not None and len(extra):
        eb = min(batch, len(extra))
        extra_stream = minibatch_indices(len(extra), len(extra), eb, sub_seed(run_seed, 7))
    xs_all, ys_all = source_stream.features, source_stream.labels
    pseudo_all = source_stream.domains == Domain.PSEUDO
    xt_all = target.features
    trace = []
    for it in range(iters):
        progress = schedule.progress(it)
        l_am = lam(schedule, progress)
        lr = cfg.learning_rate * (1.0 + cfg.lr_gamma * progress) ** (-cfg.lr_power)
        si, ti = next(stream)
        step = StepBatch(xs_all[si], ys_all[si], xt_all[ti], pseudo_all[si])
        if extra_stream is not None:
            ei, _ = next(extra_stream)
            step.extra_x, step.extra_y = extra.features[ei], extra.labels[ei]
        const = prepare_step(model, step, flags, cfg.mixmatch, (run_seed, it))
        model.zero_grad()
        out = total_loss(model, bank, step, l_am, flags, cfg.mixmatch, const)
        bank = out.bank
        for layer in model.feature_path_layers():
            sgd_step(layer.params(), lr, cfg.weight_decay)
        for layer in model.discriminator:
            sgd_step(layer.params(), lr * cfg.disc_lr_mult, cfg.weight_decay)
        if evaluator is not None and (it + 1) % cfg.eval_interval == 0:
            trace.append(evaluator(model, it + 1))
    return model, trace


def score_targets(cfg: ExperimentConfig, m: GsdeModel, source: Dataset, target: Dataset) -> ScoreTable:
    """Score every target sample with the final model of a run."""
    ct = m.forward(target.features)
    p = ct.probs
    if cfg.ablation.disable_scoring_extras:
        return combined_scores(p, p, p)
    m_nb = min(cfg.neighbors, len(target) - 1)
    p_na = neighborhood_scores(ct.features, p, m_nb) if m_nb > 0 else p
    fs = m.forward(source.features).features
    p_lp = label_propagation(np.vstack([fs, ct.features]), one_hot(source.labels, source.num_classes), p,
                             lam=cfg.lp_lambda, num_neighbors=cfg.lp_neighbors,
                             target_anchor=cfg.lp_target_anchor)
    return combined_scores(p, p_na, p_lp)


def expand_source(source: Dataset, target: Dataset, table: Optional[ScoreTable], n: int, N: int) -> Dataset:
    """Original source plus the top ``(n-1)/N`` scored targets as pseudo-source rows."""
    if n < 1:
        raise ValueError("run index starts at 1")
    if n == 1 or selection_size(Fraction(n - 1, N), len(target)) == 0:
        return source
    if table is None:
        raise ValueError("a score table is required for runs after the first")
    return source.concat(pseudo_source(target, table, Fraction(n - 1, N)))


def pseudo_source(target: Dataset, table: ScoreTable, fraction) -> Dataset:
    chosen = select_top_fraction(table, fraction)
    idx = np.array([i for i, _ in chosen], dtype=np.int64)
    labels = np.array([c for _, c in chosen], dtype=np.int64)
    return Dataset(target.features[idx], labels, np.full(len(idx), int(Domain.PSEUDO)),
                   target.num_classes, target.name)


@dataclass
class ExperimentResult:
    seed: int
    records: list
    vault: LabelVault


def run_gsde(cfg: ExperimentConfig, source: Dataset, target: Dataset, vault: LabelVault,
             seed: int, keep_models: bool = False) -> list:
    """Full expansion schedule for one seed; returns one :class:`RunRecord` per run.

    ``target`` must be the label-free view from :func:`hide_labels`; ground
    truth is only reached through ``vault`` for evaluation.
    """
    N = cfg.max_runs
    if len(target) and np.any(target.labels != -1):
        raise ValueError("target set passed to training still carries labels")
    records: list[RunRecord] = []
    table: Optional[ScoreTable] = None
    prev_model: Optional[GsdeModel] = None
    for n in range(1, N + 1):
        fraction = Fraction(n - 1, N)
        size = selection_size(fraction, len(target)) if table is not None else 0
        pseudo = pseudo_source(target, table, fraction) if size else None
        rec = RunRecord(run=n, expansion_size=size, pseudo_accuracy=float("nan"))
        if pseudo is not None:
            idx = [i for i, _ in select_top_fraction(table, fraction)]
            ev = Evaluator(source, target, vault)
            rec.pseudo_accuracy = ev.accuracy(pseudo.labels, index=idx)[0]
        if pseudo is not None and not cfg.ablation.no_expansion:
            stream, extra = source.concat(pseudo), None
        else:
            stream, extra = source, pseudo
        run_seed = sub_seed(seed, n)
        start = None
        if cfg.ablation.no_reinit and prev_model is not None:
            start = prev_model.copy()
        evaluator = Evaluator(stream, target, vault)
        try:
            if start is None:
                dims = model_dims(cfg, source.feature_dim, source.num_classes)
                start = init_model(dims, cfg.bottlenecks, seed=run_seed)
            rec.start_fingerprint = fingerprint(start)
            model, trace = train_single_run(cfg, stream, target, run_seed, model=start,
                                            evaluator=evaluator, extra=extra)
        except NonFiniteLossError as e:
            rec.failed, rec.error = True, str(e)
            records.append(rec)
            log.error("seed %d run %d aborted: %s", seed, n, e)
            raise RunFailedError(f"seed {seed} run {n}: {e}", records) from e
        rec.trace = trace
        rec.end_fingerprint = fingerprint(model)
        final = trace[-1] if trace and trace[-1].iteration == cfg.iterations_per_run else evaluator(model, cfg.iterations_per_run)
        rec.final_accuracy, rec.per_class_accuracy = final.accuracy, final.per_class
        table = score_targets(cfg, model, source, target)
        rec.scores = table
        if keep_models:
            rec.model = model
        records.append(rec)
        prev_model = model
        log.info("seed %d run %d/%d: expansion %d, target accuracy %.4f", seed, n, N, size, rec.final_accuracy)
    return records


def run_experiment(cfg: ExperimentConfig, source: Dataset, labelled_target: Dataset, seed: int,
                   keep_models: bool = False) -> ExperimentResult:
    """Convenience wrapper that withholds target labels before training."""
    target, vault = hide_labels(labelled_target)
    src = source.with_domain(Domain.SOURCE) if np.any(source.domains != Domain.SOURCE) else source
    return ExperimentResult(seed, run_gsde(cfg, src, target, vault, seed, keep_models), vault)
