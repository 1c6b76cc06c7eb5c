"""Multiple choice learning training loop.

One step forwards every modality network on its slice of the batch, scores
each (sample, network) pair with the variant's criterion, picks a teacher
per sample and then updates each network once on the mean of its
per-sample losses:

* ``independent``: cross-entropy on every sample.
* ``smcl``: cross-entropy on won samples only; networks that win nothing
  are left untouched (no optimizer step, velocity frozen).
* ``cmcl``: cross-entropy on won samples, ``beta * KL(U || p)`` on lost ones.
* ``dmcl``: cross-entropy on won samples, generalized distillation towards
  the sample's teacher on lost ones.
* ``dmcl-random-teacher``: as ``dmcl`` with teachers drawn uniformly.
"""

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import losses
from . import tensor as tn
from .errors import ConfigError, ContractError, ShapeError
from .network import VARIANTS, Ensemble, forward, sgd_momentum_step

LOG_HEADER = ("step", "modality", "mean_loss", "winner_count", "variant", "seed")
THREADS_ENV = "MCL_FORGE_THREADS"


@dataclass
class TrainConfig:
    variant: str = "dmcl"
    temperature: float = 2.0
    lam: float = 0.5
    beta: float = 0.75
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    student_temperature_on: bool = True
    t_squared: bool = False
    eval_every: int = 0
    winner_window: int = 100
    normalization: str = "assigned"

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if not self.beta >= 0:
            raise ConfigError("beta must be non-negative")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.normalization not in ("assigned", "batch"):
            raise ConfigError("normalization must be 'assigned' or 'batch'")
        if self.eval_every < 0 or self.winner_window < 1:
            raise ConfigError("eval_every must be >= 0 and winner_window >= 1")
        return self


@dataclass
class StepOutcome:
    step_index: int
    per_modality_mean_loss: np.ndarray
    winner_counts: np.ndarray


@dataclass
class TrainResult:
    ensemble: Ensemble
    outcomes: List[StepOutcome]
    config: TrainConfig
    reports: list = field(default_factory=list)

    @property
    def log_rows(self):
        return log_rows(self.outcomes, self.config)

    def winner_fraction(self, window: Optional[int] = None) -> np.ndarray:
        return winner_fraction(self.outcomes, window or self.config.winner_window)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _forward_all(ensemble: Ensemble, xs, record: bool):
    def run(m):
        if record:
            return forward(ensemble[m], xs[m])
        with tn.no_grad():
            return forward(ensemble[m], xs[m])

    n_threads = min(_threads(), ensemble.M)
    if n_threads > 1:
        # grad mode is thread-local, so each worker sets its own
        with ThreadPoolExecutor(n_threads) as pool:
            return list(pool.map(run, range(ensemble.M)))
    return [run(m) for m in range(ensemble.M)]


def _check_batch(ensemble: Ensemble, xs, labels):
    if len(xs) != ensemble.M:
        raise ShapeError(f"batch has {len(xs)} modalities, ensemble has {ensemble.M}")
    n = len(labels)
    if n == 0:
        raise ContractError("empty batch")
    for m, x in enumerate(xs):
        if x is None:
            raise ContractError(f"modality {m} missing at training time")
        if np.shape(x)[0] != n:
            raise ShapeError(f"modality {m} has {np.shape(x)[0]} rows, labels have {n}")


def criterion_from_logits(logits: np.ndarray, labels, variant: str, beta: float = 0.75) -> np.ndarray:
    """N x M criterion matrix from stacked logits of shape M x N x C."""
    probs = np.stack([losses.softmax_rows(z) for z in logits])
    ce = np.stack([losses.per_sample_cross_entropy(p, labels) for p in probs], axis=1)
    if variant != "cmcl":
        return ce
    kl = np.stack([losses.per_sample_kl_to_uniform(p) for p in probs], axis=1)
    # each network's score adds the uniform-fit of all *other* networks
    return ce + beta * (kl.sum(axis=1, keepdims=True) - kl)


def criterion_losses(ensemble: Ensemble, xs, labels, variant: str, beta: float = 0.75) -> np.ndarray:
    _check_batch(ensemble, xs, labels)
    logits = np.stack([z.data for z in _forward_all(ensemble, xs, record=False)])
    return criterion_from_logits(logits, labels, variant, beta)


def select_winner(criterion_row) -> int:
    row = np.asarray(criterion_row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ShapeError("criterion row must be a nonempty vector")
    if np.any(np.isnan(row)):
        raise ContractError("NaN in criterion row")
    return int(np.argmin(row))  # first minimum on ties


def assign_teachers(criterion: np.ndarray, variant: str, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    criterion = np.asarray(criterion, dtype=np.float64)
    if variant == "independent":
        raise ContractError("the independent variant has no teachers")
    if variant == "dmcl-random-teacher":
        if rng is None:
            raise ContractError("random-teacher assignment needs a random generator")
        return rng.integers(0, criterion.shape[1], size=criterion.shape[0])
    if np.any(np.isnan(criterion)):
        raise ContractError("NaN in criterion matrix")
    return np.argmin(criterion, axis=1)


def _network_loss(variant, m, logits_m, labels, teachers, teacher_soft, config):
    """Mean loss over the samples assigned to network m, or None if it has none."""
    n = len(labels)
    won = teachers == m
    if variant == "independent":
        return losses.batch_cross_entropy(logits_m, labels)
    if variant == "smcl":
        k = int(won.sum())
        if k == 0:
            return None
        return losses.batch_cross_entropy(logits_m, labels, won / (k if config.normalization == "assigned" else n))
    lost = ~won
    winner_part = losses.batch_cross_entropy(logits_m, labels, won / n)
    if not lost.any():
        return winner_part
    if variant == "cmcl":
        loser_part = losses.batch_kl_to_uniform(logits_m, config.beta * lost / n)
    else:
        loser_part = losses.batch_gd_loss(
            logits_m,
            labels,
            teacher_soft,
            config.temperature,
            config.lam,
            weights=lost / n,
            student_temperature=config.student_temperature_on,
            t_squared=config.t_squared,
        )
    return tn.add(winner_part, loser_part)


def train_step(ensemble: Ensemble, xs, labels, config: TrainConfig, rng: Optional[np.random.Generator] = None, step_index: int = 0) -> StepOutcome:
    """One batched update of every network; selection uses pre-update parameters."""
    config.validate()
    labels = np.asarray(labels, dtype=np.int64)
    _check_batch(ensemble, xs, labels)
    variant = config.variant
    outs = _forward_all(ensemble, xs, record=True)
    logits = np.stack([z.data for z in outs])
    criterion = criterion_from_logits(logits, labels, variant, config.beta)
    if variant == "independent":
        teachers = np.argmin(criterion, axis=1)  # diagnostic only
    else:
        teachers = assign_teachers(criterion, variant, rng)
    teacher_soft = None
    if variant in ("dmcl", "dmcl-random-teacher"):
        teacher_soft = losses.teacher_targets(logits, teachers, config.temperature)

    # logged loss: plain batch cross-entropy of each network before the update
    ce = np.stack([losses.per_sample_cross_entropy(losses.softmax_rows(z), labels) for z in logits])
    for m, net in enumerate(ensemble.networks):
        loss = _network_loss(variant, m, outs[m], labels, teachers, teacher_soft, config)
        if loss is None:
            continue
        net.zero_grad()
        tn.backward(loss)
        sgd_momentum_step(net, config.lr, config.momentum)
    counts = np.bincount(teachers, minlength=ensemble.M).astype(np.int64)
    return StepOutcome(step_index, ce.mean(axis=1), counts)


def batch_indices(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield index batches of fixed size, reshuffling at every epoch boundary."""
    pool = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        while pool.size < batch_size:
            pool = np.concatenate([pool, rng.permutation(n)])
        yield pool[:batch_size]
        pool = pool[batch_size:]


def stream_seeds(seed: int):
    """(data order, teacher draws) generators for one run."""
    data_ss, teacher_ss = np.random.SeedSequence([seed, 7]).spawn(2)
    return np.random.default_rng(data_ss), np.random.default_rng(teacher_ss)


def fit_arrays(ensemble: Ensemble, xs, labels, config: TrainConfig, callback=None) -> List[StepOutcome]:
    """Run ``config.steps`` train steps over in-memory arrays."""
    config.validate()
    labels = np.asarray(labels, dtype=np.int64)
    _check_batch(ensemble, xs, labels)
    if config.variant != ensemble.variant:
        ensemble.variant = config.variant
    data_rng, teacher_rng = stream_seeds(config.seed)
    outcomes = []
    for step, idx in enumerate(batch_indices(labels.size, config.batch_size, config.steps, data_rng), start=1):
        out = train_step(ensemble, [x[idx] for x in xs], labels[idx], config, teacher_rng, step)
        outcomes.append(out)
        if callback is not None:
            callback(step, out)
    return outcomes


def train(ensemble: Ensemble, dataset, config: TrainConfig, subsets=None) -> TrainResult:
    """Train on the dataset's train split; evaluate on its test split.

    With ``config.eval_every > 0`` an EvalReport is produced every that
    many steps; a final report is always appended.
    """
    from .metrics import evaluate

    config.validate()
    xs, y = dataset.train()
    result = TrainResult(ensemble, [], config)

    def on_step(step, out):
        result.outcomes.append(out)
        if config.eval_every and step % config.eval_every == 0 and step != config.steps:
            result.reports.append(
                evaluate(ensemble, dataset, subsets, winner_fraction=result.winner_fraction(), step=step)
            )

    fit_arrays(ensemble, xs, y, config, on_step)
    result.reports.append(
        evaluate(ensemble, dataset, subsets, winner_fraction=result.winner_fraction(), step=config.steps)
    )
    return result


def winner_fraction(outcomes: List[StepOutcome], window: int = 100) -> np.ndarray:
    """Share of teacher assignments per modality over the trailing ``window`` steps."""
    if not outcomes:
        raise ContractError("no training steps recorded")
    counts = np.sum([o.winner_counts for o in outcomes[-window:]], axis=0).astype(np.float64)
    return counts / counts.sum()


def log_rows(outcomes: List[StepOutcome], config: TrainConfig):
    for o in outcomes:
        for m, (loss, count) in enumerate(zip(o.per_modality_mean_loss, o.winner_counts)):
            yield (o.step_index, m, repr(float(loss)), int(count), config.variant, config.seed)


def metrics_csv(outcomes: List[StepOutcome], config: TrainConfig) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    w.writerows(log_rows(outcomes, config))
    return buf.getvalue()


def write_metrics_log(path, outcomes: List[StepOutcome], config: TrainConfig):
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv(outcomes, config))


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
