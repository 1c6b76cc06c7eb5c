"""Evaluation of trained ensembles."""

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, ParseError
from .losses import softmax_rows
from .network import Ensemble, forward, penultimate_features

Subset = Tuple[int, ...]


def _norm_subset(subset, M) -> Subset:
    s = tuple(sorted({int(m) for m in subset}))
    if not s:
        raise ContractError("modality subset must be nonempty")
    if s[0] < 0 or s[-1] >= M:
        raise ContractError(f"subset {s} references a modality outside 0..{M - 1}")
    return s


def subset_key(subset) -> str:
    return ",".join(str(m) for m in subset)


def parse_subsets(text: str) -> List[Subset]:
    """``"0;1;2;0,1,2"`` -> [(0,), (1,), (2,), (0, 1, 2)]."""
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            out.append(tuple(int(v) for v in part.split(",")))
        except ValueError as exc:
            raise ConfigError(f"bad subset {part!r}") from exc
    if not out:
        raise ConfigError("no subsets given")
    return out


def modality_probs(ensemble: Ensemble, m: int, x) -> np.ndarray:
    with tn.no_grad():
        return softmax_rows(forward(ensemble[m], x).data)


def predict_subset(ensemble: Ensemble, sample, available) -> np.ndarray:
    """Mean softmax over the available modalities.

    ``sample`` is a sequence indexed by modality holding one feature vector
    or a batch of rows; entries for unavailable modalities are never read.
    Returns C probabilities for a single vector, N x C for a batch.
    """
    subset = _norm_subset(available, ensemble.M)
    single = np.ndim(sample[subset[0]]) == 1
    probs = [modality_probs(ensemble, m, sample[m]) for m in subset]
    mean = np.mean(probs, axis=0)
    return mean[0] if single else mean


@dataclass
class EvalReport:
    per_modality_accuracy: np.ndarray
    sum_accuracy: float
    oracle_accuracy: float
    subset_accuracies: Dict[Subset, float]
    winner_fraction: Optional[np.ndarray]
    num_test_samples: int
    step: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def items(self):
        """Flat ordered (key, value) pairs used by both text and CSV forms."""
        M = len(self.per_modality_accuracy)
        yield "step", "" if self.step is None else str(self.step)
        yield "num_test_samples", str(self.num_test_samples)
        for m in range(M):
            yield f"accuracy_{m}", repr(float(self.per_modality_accuracy[m]))
        yield "sum_accuracy", repr(float(self.sum_accuracy))
        yield "oracle_accuracy", repr(float(self.oracle_accuracy))
        for s, acc in self.subset_accuracies.items():
            yield f"subset_{subset_key(s)}", repr(float(acc))
        for m in range(M):
            wf = "" if self.winner_fraction is None else repr(float(self.winner_fraction[m]))
            yield f"winner_fraction_{m}", wf
        for k, v in self.extra.items():
            yield k, str(v)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def csv_header(self) -> str:
        return _csv_line(k for k, _ in self.items())

    def csv_row(self) -> str:
        return _csv_line(v for _, v in self.items())

    def summary(self) -> str:
        accs = " ".join(f"m{m}={a:.4f}" for m, a in enumerate(self.per_modality_accuracy))
        return f"per-modality {accs} | sum={self.sum_accuracy:.4f} oracle={self.oracle_accuracy:.4f} (n={self.num_test_samples})"


def _csv_line(fields) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="").writerow(list(fields))
    return buf.getvalue()


def reports_csv(reports: Sequence[EvalReport]) -> str:
    if not reports:
        return ""
    lines = [reports[0].csv_header()] + [r.csv_row() for r in reports]
    return "\n".join(lines) + "\n"


def evaluate(
    ensemble: Ensemble,
    dataset,
    subsets=None,
    winner_fraction=None,
    step: Optional[int] = None,
    split: str = "test",
) -> EvalReport:
    """Accuracy of every singleton, the full ensemble average, requested subsets and the oracle.

    The oracle counts a sample as correct when at least one modality's own
    argmax hits the label. Argmax ties go to the lowest class index.
    """
    xs, y = dataset.test() if split == "test" else dataset.train()
    if len(y) == 0:
        raise ContractError("evaluation split is empty")
    M = ensemble.M
    probs = [modality_probs(ensemble, m, xs[m]) for m in range(M)]
    hits = np.stack([np.argmax(p, axis=1) == y for p in probs])
    per_mod = hits.mean(axis=1)
    full = tuple(range(M))

    wanted: List[Subset] = [(m,) for m in range(M)] + [full]
    for s in subsets or ():
        s = _norm_subset(s, M)
        if s not in wanted:
            wanted.append(s)
    subset_acc = {}
    for s in wanted:
        mean = np.mean([probs[m] for m in s], axis=0)
        subset_acc[s] = float(np.mean(np.argmax(mean, axis=1) == y))

    oracle = float(np.mean(hits.any(axis=0)))
    assert oracle >= per_mod.max(), "oracle accuracy below a singleton accuracy"
    report = EvalReport(
        per_modality_accuracy=per_mod,
        sum_accuracy=subset_acc[full],
        oracle_accuracy=oracle,
        subset_accuracies=subset_acc,
        winner_fraction=None if winner_fraction is None else np.asarray(winner_fraction, dtype=np.float64),
        num_test_samples=int(len(y)),
        step=step,
    )
    return report


def select_subsets(report: EvalReport, subsets) -> Dict[Subset, float]:
    """The requested subset accuracies only, in request order."""
    M = len(report.per_modality_accuracy)
    return {s: report.subset_accuracies[s] for s in (_norm_subset(s, M) for s in subsets)}


# ------------------------------------------------------------------- kNN probe


def knn_predict(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, k: int, num_classes: int) -> np.ndarray:
    """Majority vote of the k nearest training points (Euclidean).

    Distance ties go to the lower training index, vote ties to the lower class.
    """
    if not 1 <= k <= len(train_y):
        raise ConfigError(f"k={k} must lie in [1, {len(train_y)}]")
    preds = np.empty(len(test_x), dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, train_x.size))
    for start in range(0, len(test_x), chunk):
        block = test_x[start:start + chunk]
        d2 = np.sum((block[:, None, :] - train_x[None, :, :]) ** 2, axis=2)
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
        for i, row in enumerate(nearest):
            preds[start + i] = np.argmax(np.bincount(train_y[row], minlength=num_classes))
    return preds


def knn_probe(ensemble: Ensemble, dataset, k_values: Sequence[int]) -> np.ndarray:
    """M x len(k_values) test accuracies of kNN on penultimate features.

    Meant for freshly initialized networks: the features are random
    projections, so the table measures how much class structure each
    modality exposes before any training.
    """
    xs_tr, y_tr = dataset.train()
    xs_te, y_te = dataset.test()
    k_values = [int(k) for k in k_values]
    for k in k_values:
        if not 1 <= k <= len(y_tr):
            raise ConfigError(f"k={k} must lie in [1, {len(y_tr)}]")
    table = np.zeros((ensemble.M, len(k_values)))
    for m, net in enumerate(ensemble.networks):
        with tn.no_grad():
            f_tr = penultimate_features(net, xs_tr[m]).data
            f_te = penultimate_features(net, xs_te[m]).data
        for j, k in enumerate(k_values):
            table[m, j] = np.mean(knn_predict(f_tr, y_tr, f_te, k, ensemble.num_classes) == y_te)
    return table


def probe_csv(table: np.ndarray, k_values: Sequence[int]) -> str:
    lines = ["modality," + ",".join(f"k={k}" for k in k_values)]
    for m, row in enumerate(table):
        lines.append(f"{m}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- curve export

CURVE_HEADER = ("step", "modality", "mean_loss", "winner_fraction", "variant", "seed")


def read_metrics_log(path) -> List[dict]:
    from .engine import LOG_HEADER

    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != LOG_HEADER:
            raise ParseError(f"expected header {','.join(LOG_HEADER)}", line=1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(LOG_HEADER):
                raise ParseError(f"expected {len(LOG_HEADER)} fields, got {len(rec)}", line=lineno)
            try:
                rows.append({
                    "step": int(rec[0]),
                    "modality": int(rec[1]),
                    "mean_loss": float(rec[2]),
                    "winner_count": int(rec[3]),
                    "variant": rec[4],
                    "seed": rec[5],
                })
            except ValueError as exc:
                raise ParseError(f"bad value: {exc}", line=lineno) from exc
    return rows


def trailing_mean(values: Sequence[float], window: int) -> List[float]:
    """Mean of the last ``window`` values at each position (shorter at the start)."""
    if window < 1:
        raise ConfigError("smoothing window must be positive")
    out, acc = [], 0.0
    vals = list(values)
    for i, v in enumerate(vals):
        acc += v
        if i >= window:
            acc -= vals[i - window]
        out.append(acc / min(i + 1, window))
    return out


def curves(rows: List[dict], window: Optional[int] = None) -> List[tuple]:
    totals = defaultdict(int)
    for r in rows:
        totals[(r["variant"], r["seed"], r["step"])] += r["winner_count"]
    out = []
    for r in rows:
        total = totals[(r["variant"], r["seed"], r["step"])]
        out.append([r["step"], r["modality"], r["mean_loss"], r["winner_count"] / total if total else 0.0, r["variant"], r["seed"]])
    if window:
        series = defaultdict(list)
        for i, r in enumerate(out):
            series[(r[4], r[5], r[1])].append(i)
        for idx in series.values():
            for col in (2, 3):
                smoothed = trailing_mean([out[i][col] for i in idx], window)
                for i, v in zip(idx, smoothed):
                    out[i][col] = v
    return [tuple(r) for r in out]


def export_curves(metrics_log_path, out_path, window: Optional[int] = None):
    """Per-modality loss and winner fraction against step, as CSV."""
    table = curves(read_metrics_log(metrics_log_path), window)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for step, m, loss, wf, variant, seed in table:
        w.writerow((step, m, repr(float(loss)), repr(float(wf)), variant, seed))
    with open(out_path, "w", newline="") as fh:
        fh.write(buf.getvalue())
    return table
