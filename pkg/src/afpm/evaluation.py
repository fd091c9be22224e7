"""Classification metrics and cross-subject fold evaluation.

Balanced accuracy is the mean of per-class recalls. AUROC is computed by the
midrank method (equals the probability that a random positive outscores a
random negative, ties counting one half). AUC-PR is average precision with
equal scores grouped at one threshold. Kappa is chance-corrected agreement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_model import DatasetManifest
from .errors import DataError
from .model import Model, forward

MI_METRICS = ("balanced_accuracy", "auc_pr")
ERP_METRICS = ("auroc", "auc_pr", "cohens_kappa")


def _check_lengths(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[0] != b.shape[0]:
        raise DataError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] == 0:
        raise DataError("empty input")
    return a, b


def balanced_accuracy(preds, labels) -> float:
    """Mean over classes of per-class recall."""
    preds, labels = _check_lengths(preds, labels)
    classes = np.unique(labels)
    recalls = [np.mean(preds[labels == c] == c) for c in classes]
    return float(np.mean(recalls))


def auroc(scores, labels) -> float:
    """Area under the ROC curve via midranks (Mann-Whitney statistic)."""
    scores, labels = _check_lengths(scores, labels)
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc_pr(scores, labels) -> float:
    """Average precision by descending-score sweep, ties grouped at one threshold."""
    scores, labels = _check_lengths(scores, labels)
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DataError("AUC-PR needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        group_tp = int(sorted_labels[i:j + 1].sum())
        tp += group_tp
        seen += j - i + 1
        if group_tp:
            precision = tp / seen
            delta_recall = group_tp / n_pos
            ap += precision * delta_recall
        i = j + 1
    return float(ap)


def cohens_kappa(preds, labels) -> float:
    """Chance-corrected agreement; 0 when expected agreement is total."""
    preds, labels = _check_lengths(preds, labels)
    classes = np.unique(np.concatenate([preds, labels]))
    n = preds.shape[0]
    p_o = float(np.mean(preds == labels))
    p_e = 0.0
    for c in classes:
        p_e += float(np.sum(preds == c)) * float(np.sum(labels == c)) / (n * n)
    if p_e >= 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


def softmax_scores(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def positive_class_index(class_names, task: str) -> int:
    """The score-carrying class: 'target' for ERP when present, else class 1."""
    if task == "erp":
        lowered = [c.lower() for c in class_names]
        if "target" in lowered:
            return lowered.index("target")
    return 1


@dataclass
class EvalReport:
    dataset: str
    task: str
    n_trials: int
    n_subjects: int
    folds: int
    repeats: int
    metrics: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset, "task": self.task,
            "n_trials": self.n_trials, "n_subjects": self.n_subjects,
            "folds": self.folds, "repeats": self.repeats,
            "metrics": self.metrics,
        }

    def mean(self, metric: str) -> float:
        return self.metrics[metric]["mean"]

    def table(self) -> str:
        lines = [f"dataset {self.dataset} ({self.task}), "
                 f"{self.n_trials} trials, {self.n_subjects} subjects, "
                 f"{self.folds} fold(s) x {self.repeats} repeat(s)"]
        for name, stats in self.metrics.items():
            lines.append(f"  {name:>18s}: {stats['mean']:.4f} +- {stats['std']:.4f}")
        return "\n".join(lines)


def subject_of(domain_id: str) -> str:
    """Subject key: drop the final (session) segment of dataset:subject:session."""
    parts = domain_id.rsplit(":", 1)
    return parts[0] if len(parts) == 2 else domain_id


def subject_folds(subjects, n_folds: int, seed: int) -> dict[str, int]:
    """Sorted subjects, seeded shuffle, round-robin fold assignment."""
    uniq = sorted(set(subjects))
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(uniq)))
    return {uniq[idx]: pos % n_folds for pos, idx in enumerate(order)}


def task_metrics(task: str) -> tuple[str, ...]:
    return MI_METRICS if task == "mi" else ERP_METRICS


def primary_metric(task: str) -> str:
    return "balanced_accuracy" if task == "mi" else "auroc"


def compute_metrics(task: str, logits: np.ndarray, labels: np.ndarray,
                    positive: int) -> dict[str, float]:
    preds = np.argmax(logits, axis=1)
    out: dict[str, float] = {}
    for name in task_metrics(task):
        if name == "balanced_accuracy":
            out[name] = balanced_accuracy(preds, labels)
        elif name == "auroc":
            scores = softmax_scores(logits)[:, positive]
            out[name] = auroc(scores, (labels == positive).astype(int))
        elif name == "auc_pr":
            scores = softmax_scores(logits)[:, positive]
            out[name] = auc_pr(scores, (labels == positive).astype(int))
        elif name == "cohens_kappa":
            out[name] = cohens_kappa(preds, labels)
    return out


def evaluate_arrays(model: Model, x: np.ndarray, labels: np.ndarray,
                    domains: list[str], dataset_name: str, *,
                    folds: int = 1, repeats: int = 1, seed: int = 0,
                    positive: int = 1, batch_size: int = 256) -> EvalReport:
    """Calibration-free inference + metrics, optionally split into subject folds."""
    task = model.cfg.task
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    logits = np.concatenate(
        [forward(x[i:i + batch_size], model) for i in range(0, n, batch_size)]
    ) if n else np.zeros((0, model.cfg.transformer.n_classes))

    subjects = [subject_of(d) for d in domains]
    report = EvalReport(dataset=dataset_name, task=task, n_trials=n,
                        n_subjects=len(set(subjects)),
                        folds=folds, repeats=repeats)
    values: dict[str, list[float]] = {m: [] for m in task_metrics(task)}
    for rep in range(repeats):
        if folds <= 1:
            parts = [np.arange(n)]
        else:
            assignment = subject_folds(subjects, folds, seed + rep)
            fold_ids = np.array([assignment[s] for s in subjects])
            parts = [np.flatnonzero(fold_ids == f) for f in range(folds)]
        for part in parts:
            if part.size == 0:
                continue
            got = compute_metrics(task, logits[part], labels[part], positive)
            for m, val in got.items():
                values[m].append(val)
    for m, vals in values.items():
        arr = np.asarray(vals, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        report.metrics[m] = {"values": [float(v) for v in arr],
                             "mean": float(arr.mean()), "std": std}
    return report


def check_template_match(model: Model, manifest: DatasetManifest) -> None:
    """The dataset must be aligned to the checkpoint's template layout."""
    align = manifest.alignment or {}
    channels = tuple(align.get("template_channels", ()))
    length = align.get("template_len")
    if align.get("mapped") and (
        channels != model.cfg.template_channels or length != model.cfg.template_len
    ):
        raise DataError(
            f"template mismatch: checkpoint expects {len(model.cfg.template_channels)} "
            f"channels x {model.cfg.template_len} samples ({model.cfg.task}), dataset "
            f"is aligned to {len(channels)} x {length} ({align.get('task')})"
        )
    if not align:
        raise DataError(
            "dataset has no alignment metadata; run the alignment stage before eval"
        )


def pad_to_model(x: np.ndarray, model: Model) -> np.ndarray:
    """Zero-pad stacked trials up to the model's input layout (unmapped data)."""
    m, t = model.cfg.n_channels, model.cfg.template_len
    if x.shape[1] > m or x.shape[2] > t:
        raise DataError(
            f"stacked trials {x.shape[1]}x{x.shape[2]} exceed model input {m}x{t}"
        )
    if x.shape[1] == m and x.shape[2] == t:
        return x
    out = np.zeros((x.shape[0], m, t), dtype=x.dtype)
    out[:, :x.shape[1], :x.shape[2]] = x
    return out


def evaluate_dataset(model: Model, manifest: DatasetManifest, *,
                     folds: int = 1, repeats: int = 1, seed: int = 0) -> EvalReport:
    """Zero-calibration evaluation of one aligned dataset."""
    from .pipeline import stack_aligned

    check_template_match(model, manifest)
    x, labels, domains, _ = stack_aligned([manifest])
    x = pad_to_model(x, model)
    positive = positive_class_index(manifest.class_names, model.cfg.task)
    return evaluate_arrays(model, x, labels, domains, manifest.name,
                           folds=folds, repeats=repeats, seed=seed,
                           positive=positive)
