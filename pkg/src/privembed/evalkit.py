"""Privacy and utility evaluation: attacker probe, ROC/AUC, ASV scoring, EER."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import EmbeddingSet, Trial
from .dpmech import BudgetLedger, NoiseSource
from .errors import ConfigError, DataError, MetricError, ShapeError, StateError
from .gaae import GaaeModel, protect
from .nncore import Adam, LinearLayer, ReLU, Sigmoid, as_matrix, bce_loss


@dataclass(frozen=True)
class ScoreSet:
    """Scores with binary labels (1 = positive/target)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64).ravel())
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64).ravel())
        if self.scores.shape != self.labels.shape:
            raise ShapeError("scores and labels must have the same length")

    def __len__(self) -> int:
        return int(self.scores.size)


def _require_both_classes(s: ScoreSet, what: str) -> None:
    if len(s) == 0 or not (np.any(s.labels == 1) and np.any(s.labels == 0)):
        raise MetricError(f"{what} needs scores from both classes")


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(s: ScoreSet) -> float:
    """Area under the ROC curve by the rank statistic; ties count one half."""
    _require_both_classes(s, "AUC")
    ranks = _average_ranks(s.scores)
    n_pos = int(np.sum(s.labels == 1))
    n_neg = len(s) - n_pos
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _roc_points(s: ScoreSet):
    """ROC staircase as (false-accept rate, miss rate) with one point per
    distinct false-accept rate, keeping the best (lowest) miss rate."""
    order = np.argsort(-s.scores, kind="mergesort")
    labels = s.labels[order]
    scores = s.scores[order]
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos

    fars = [0.0]
    misses = [1.0]
    tp = fp = 0
    i = 0
    while i < len(labels):
        j = i
        while j + 1 < len(labels) and scores[j + 1] == scores[i]:
            j += 1
        group = labels[i:j + 1]
        tp += int(np.sum(group == 1))
        fp += len(group) - int(np.sum(group == 1))
        far = fp / n_neg
        miss = 1.0 - tp / n_pos
        if far == fars[-1]:
            misses[-1] = min(misses[-1], miss)
        else:
            fars.append(far)
            misses.append(miss)
        i = j + 1
    return np.asarray(fars), np.asarray(misses)


def eer(s: ScoreSet) -> float:
    """Equal error rate from the threshold sweep over the score set.

    The ROC operating points are reduced to one point per false-accept rate
    (keeping the lowest miss rate) and the crossing with the miss rate is
    found by linear interpolation between adjacent points. Invariant under
    strictly increasing transforms of the scores.
    """
    _require_both_classes(s, "EER")
    fars, misses = _roc_points(s)
    diff = misses - fars  # starts at +1, ends <= 0
    for k in range(len(diff) - 1):
        d1, d2 = diff[k], diff[k + 1]
        if d1 == 0.0:
            return float(fars[k])
        if d1 > 0.0 >= d2:
            u = d1 / (d1 - d2)
            return float(fars[k] + u * (fars[k + 1] - fars[k]))
    return float(fars[-1])


def spearman_rho(x, y) -> float:
    """Spearman rank correlation; tolerates infinities via ranking."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise MetricError("rank correlation needs two equal-length series of >= 2 points")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float((rx**2).sum() * (ry**2).sum()))
    if denom == 0.0:
        raise MetricError("rank correlation is undefined for a constant series")
    return float((rx * ry).sum() / denom)


class AttackerClassifier:
    """External two-layer gender probe trained on clean embeddings."""

    def __init__(self, input_dim: int = 192, hidden_dim: int = 100, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.lin1 = LinearLayer(self.input_dim, self.hidden_dim, rng)
        self.act = ReLU()
        self.lin2 = LinearLayer(self.hidden_dim, 1, rng)
        self.out = Sigmoid()
        self.trained = False

    def predict_proba(self, x) -> np.ndarray:
        x = as_matrix(x)
        return self.out.forward(self.lin2.forward(self.act.forward(self.lin1.forward(x)))).ravel()

    def _zero_grads(self) -> None:
        self.lin1.zero_grad()
        self.lin2.zero_grad()

    def parameters(self):
        return self.lin1.parameters() + self.lin2.parameters()


@dataclass(frozen=True)
class AttackerTrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("attacker training needs positive lr, batch size and epochs")


def train_attacker(clf: AttackerClassifier, vectors, labels,
                   cfg: AttackerTrainConfig) -> AttackerClassifier:
    """Binary cross-entropy training of the gender probe with Adam."""
    vectors = as_matrix(vectors)
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if len(labels) != len(vectors):
        raise ShapeError("labels and vectors disagree on the number of rows")
    if np.unique(labels).size < 2:
        raise DataError("attacker training data must contain both gender classes")
    opt = Adam(clf.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(7,)))
    n = len(vectors)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            p = clf.predict_proba(vectors[idx])
            _, grad_p = bce_loss(p, labels[idx], flipped=False)
            g = clf.out.backward(grad_p.reshape(-1, 1))
            g = clf.lin2.backward(g)
            g = clf.act.backward(g)
            clf.lin1.backward(g)
            opt.step()
            clf._zero_grads()
    clf.trained = True
    return clf


def attacker_auc(clf: AttackerClassifier, es: EmbeddingSet) -> float:
    """AUC of the probe's female probability against the true labels."""
    return roc_auc(ScoreSet(clf.predict_proba(es.vectors), es.genders))


def build_speaker_models(enroll: EmbeddingSet) -> dict[int, np.ndarray]:
    """Mean-then-normalize speaker models from enrollment embeddings."""
    if len(enroll) == 0:
        raise DataError("enrollment set is empty")
    models: dict[int, np.ndarray] = {}
    for sid in np.unique(enroll.speaker_ids):
        mean = enroll.vectors[enroll.speaker_ids == sid].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise DataError(f"speaker {sid}: enrollment mean has zero norm")
        models[int(sid)] = mean / norm
    return models


def score_trials(models: dict[int, np.ndarray], test: EmbeddingSet,
                 trials: list[Trial]) -> ScoreSet:
    """Cosine similarity between speaker models and test embeddings, per trial."""
    index: dict[tuple[int, int], int] = {}
    for i in range(len(test)):
        index[(int(test.speaker_ids[i]), int(test.segment_ids[i]))] = i
    scores = np.empty(len(trials))
    labels = np.empty(len(trials), dtype=np.int64)
    for k, t in enumerate(trials):
        if t.enroll_speaker not in models:
            raise DataError(f"trial {k}: unknown enrollment speaker {t.enroll_speaker}")
        row = index.get((t.test_speaker, t.test_segment))
        if row is None:
            raise DataError(
                f"trial {k}: unknown test segment ({t.test_speaker}, {t.test_segment})"
            )
        v = test.vectors[row]
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise DataError(f"trial {k}: test embedding has zero norm")
        scores[k] = float(models[t.enroll_speaker] @ v / norm)
        labels[k] = 1 if t.target else 0
    return ScoreSet(scores, labels)


REPORT_COLUMNS = (
    "epsilon_tr", "epsilon_ts", "C",
    "auc_clean", "auc_protected", "eer_clean", "eer_protected",
    "n_trials", "seed",
)


@dataclass(frozen=True)
class MetricsReport:
    """One privacy/utility evaluation cell."""

    epsilon_tr: float
    epsilon_ts: float
    clip_threshold: float
    auc_clean: float
    auc_protected: float
    eer_clean: float
    eer_protected: float
    n_trials: int
    seed: int

    def to_row(self) -> list[str]:
        return [
            format_value(self.epsilon_tr),
            format_value(self.epsilon_ts),
            format_value(self.clip_threshold),
            format_value(self.auc_clean),
            format_value(self.auc_protected),
            format_value(self.eer_clean),
            format_value(self.eer_protected),
            str(self.n_trials),
            str(self.seed),
        ]


def format_value(x: float) -> str:
    """CSV number formatting; infinities become the literal ``inf``."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".12g")


def write_metrics_csv(reports, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for report in reports:
            writer.writerow(report.to_row())


def read_metrics_csv(path) -> list[dict[str, float]]:
    rows: list[dict[str, float]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != REPORT_COLUMNS:
            raise DataError(f"{path}: unexpected metrics CSV header {reader.fieldnames}")
        for raw in reader:
            rows.append({k: float(v) for k, v in raw.items()})
    return rows


def evaluate_cell(model: GaaeModel, attacker: AttackerClassifier,
                  enroll: EmbeddingSet, test: EmbeddingSet, trials: list[Trial],
                  epsilon_ts: float, source: NoiseSource | None = None,
                  seed: int = 0, ledger: BudgetLedger | None = None) -> MetricsReport:
    """Protect the evaluation data at one test budget and measure both sides.

    The attacker AUC is computed on the protected test embeddings; the ASV
    EER protects both the enrollment and the test side. Clean baselines are
    recomputed from the raw embeddings so every row is self-contained.
    """
    if not attacker.trained:
        raise StateError("the attacker classifier must be trained before evaluation")
    auc_clean = attacker_auc(attacker, test)
    eer_clean = eer(score_trials(build_speaker_models(enroll), test, trials))

    prot_enroll = enroll.with_vectors(
        protect(model, enroll.vectors, epsilon_ts, source, ledger=ledger,
                release_id=f"eval-enroll-eps{format_value(float(epsilon_ts))}")
    )
    prot_test = test.with_vectors(
        protect(model, test.vectors, epsilon_ts, source, ledger=ledger,
                release_id=f"eval-test-eps{format_value(float(epsilon_ts))}")
    )
    auc_protected = attacker_auc(attacker, prot_test)
    eer_protected = eer(score_trials(build_speaker_models(prot_enroll), prot_test, trials))

    return MetricsReport(
        epsilon_tr=float(model.epsilon_tr if model.epsilon_tr is not None else math.inf),
        epsilon_ts=float(epsilon_ts),
        clip_threshold=float(model.clip_threshold),
        auc_clean=auc_clean,
        auc_protected=auc_protected,
        eer_clean=eer_clean,
        eer_protected=eer_protected,
        n_trials=len(trials),
        seed=int(seed),
    )
