"""Answer accuracy, BLEU-n, condition-revision rates, confusion matrix and PCA."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n: int,
           standard_bp: bool = False) -> float:
    """Corpus BLEU-n with clipped i-gram precisions, i = 1..n.

    The brevity penalty is 1 when the total candidate length exceeds the
    total reference length and otherwise the ratio candidate/reference.
    ``standard_bp=True`` uses ``exp(1 - r/c)`` instead.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"n must be in 1..4, got {n}")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("bleu_n: empty corpus")
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    log_sum = 0.0
    for i in range(1, n + 1):
        matched = total = 0
        for c, r in zip(candidates, references):
            cc, rc = _ngrams(c, i), _ngrams(r, i)
            matched += sum(min(k, rc[g]) for g, k in cc.items())
            total += max(len(c) - i + 1, 0)
        if matched == 0 or total == 0:
            return 0.0
        log_sum += math.log(matched / total)
    if cand_len > ref_len:
        bp = 1.0
    elif cand_len == 0:
        return 0.0
    elif standard_bp:
        bp = math.exp(1.0 - ref_len / cand_len)
    else:
        bp = cand_len / ref_len
    return bp * math.exp(log_sum / n)


def confusion_matrix(gold: Sequence[int], pred: Sequence[int], classes: int) -> np.ndarray:
    """Rows are gold labels, columns predictions."""
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(gold, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


@dataclass
class RevisionCounts:
    defective: int = 0
    corrected: int = 0
    unrevised: int = 0
    wrongly_revised: int = 0
    clean: int = 0
    damaged: int = 0

    @property
    def revision_accuracy(self) -> float | None:
        return self.corrected / self.defective if self.defective else None

    @property
    def revision_damage(self) -> float | None:
        return self.damaged / self.clean if self.clean else None

    def fractions(self) -> dict[str, float | None]:
        d = self.defective
        return {
            "revision_accuracy": self.revision_accuracy,
            "unrevised": self.unrevised / d if d else None,
            "wrongly_revised": self.wrongly_revised / d if d else None,
            "revision_damage": self.revision_damage,
        }


def revision_counts(observed: np.ndarray, true: np.ndarray, revised: np.ndarray) -> RevisionCounts:
    """Slot-level outcome of revision.

    A defective slot (observed != true) is *corrected* when revised == true,
    *unrevised* when revised == observed, and *wrongly revised* otherwise.
    A clean slot is *damaged* when revised != observed.
    """
    observed, true, revised = (np.asarray(a) for a in (observed, true, revised))
    bad = observed != true
    return RevisionCounts(
        defective=int(bad.sum()),
        corrected=int((bad & (revised == true)).sum()),
        unrevised=int((bad & (revised == observed)).sum()),
        wrongly_revised=int((bad & (revised != true) & (revised != observed)).sum()),
        clean=int((~bad).sum()),
        damaged=int((~bad & (revised != observed)).sum()),
    )


@dataclass
class Metrics:
    samples: int
    accuracy: float
    bleu: list[float]
    revision_accuracy: float | None = None
    revision_damage: float | None = None
    unrevised: float | None = None
    wrongly_revised: float | None = None
    confusion: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self, with_confusion: bool = True) -> dict:
        out = asdict(self)
        out["confusion"] = self.confusion.tolist() if (with_confusion and self.confusion is not None) else None
        return out


def compute_metrics(pred: np.ndarray, gold: np.ndarray, candidate_tokens: Sequence[Sequence[str]],
                    classes: int, observed: np.ndarray | None = None,
                    true: np.ndarray | None = None, revised: np.ndarray | None = None,
                    standard_bp: bool = False) -> Metrics:
    pred, gold = np.asarray(pred, dtype=np.int64), np.asarray(gold, dtype=np.int64)
    n = len(gold)
    if n == 0:
        return Metrics(0, 0.0, [0.0] * 4, confusion=np.zeros((classes, classes), np.int64))
    acc = float((pred == gold).mean())
    hyps = [candidate_tokens[p] for p in pred]
    refs = [candidate_tokens[g] for g in gold]
    bleu = [bleu_n(hyps, refs, k, standard_bp) for k in range(1, 5)]
    m = Metrics(n, acc, bleu, confusion=confusion_matrix(gold, pred, classes))
    if observed is not None and true is not None and revised is not None:
        f = revision_counts(observed, true, revised).fractions()
        m.revision_accuracy = f["revision_accuracy"]
        m.revision_damage = f["revision_damage"]
        m.unrevised = f["unrevised"]
        m.wrongly_revised = f["wrongly_revised"]
    return m


def pca_project(vectors, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Project mean-centred rows onto the top-``k`` principal axes.

    Returns ``(coords [N, k], explained_variance [k])`` with components in
    decreasing variance order.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"pca_project expects a 2-D array, got shape {x.shape}")
    n, dim = x.shape
    if k > dim:
        raise ValueError(f"k={k} exceeds vector dimension {dim}")
    if n < k:
        raise ValueError(f"need at least k={k} vectors, got {n}")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    axes = evecs[:, order]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(axes[np.abs(axes).argmax(axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    axes = axes * signs
    return centred @ axes, np.clip(evals[order], 0.0, None)
