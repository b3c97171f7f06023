"""
Evaluation metrics: RMSE / MAE / Pearson / Spearman for grade prediction, corpus
BLEU-4 and ROUGE-1/2 F1 for generated feedback.

All functions are pure. Generation metrics take token sequences (the data
tokenizer's output), so results are deterministic given raw text.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats
from sklearn.metrics import mean_absolute_error, mean_squared_error

from errors import EmptyInput, LengthMismatch, ValidationError

logger = logging.getLogger(__name__)

BLEU_MAX_ORDER = 4
UNDEFINED = 'n/a'


# ==============================================================================
# SCORING METRICS
# ==============================================================================

def _paired(preds, targets):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.size != targets.size:
        raise LengthMismatch(f"{preds.size} predictions for {targets.size} targets")
    if preds.size == 0:
        raise EmptyInput("need at least one prediction")
    return preds, targets


def _correlation_defined(preds, targets, name):
    if preds.size < 2:
        return False
    if np.ptp(preds) == 0.0 or np.ptp(targets) == 0.0:
        logger.warning("%s correlation undefined: zero-variance input", name)
        return False
    return True


def pearson(preds, targets):
    """
    Pearson correlation, or None when it is undefined (fewer than two
    points, or either side has zero variance).
    """
    preds, targets = _paired(preds, targets)
    if not _correlation_defined(preds, targets, 'Pearson'):
        return None
    return max(-1.0, min(1.0, float(stats.pearsonr(preds, targets).statistic)))


def spearman(preds, targets):
    """
    Spearman rank correlation (ties take their average rank), or None
    under the same conditions as pearson.

    Example:
        >>> round(spearman([1, 2, 3, 4], [1, 1, 2, 2]), 6)
        0.894427
    """
    preds, targets = _paired(preds, targets)
    if not _correlation_defined(preds, targets, 'Spearman'):
        return None
    return max(-1.0, min(1.0, float(stats.spearmanr(preds, targets).statistic)))


def score_metrics(preds, targets):
    """
    Returns {'rmse', 'mae', 'pearson', 'spearman'}; the correlations are
    None when undefined.

    Example:
        >>> round(score_metrics([1, 2, 3], [1, 2, 4])['pearson'], 6)
        0.981981
    """
    preds, targets = _paired(preds, targets)
    return {
        'rmse': math.sqrt(mean_squared_error(targets, preds)),
        'mae': float(mean_absolute_error(targets, preds)),
        'pearson': pearson(preds, targets),
        'spearman': spearman(preds, targets),
    }


def grade_error_percent(preds, targets):
    """Mean absolute grade error as a percentage of the unit scale (100 * MAE)."""
    return 100.0 * score_metrics(preds, targets)['mae']


# ==============================================================================
# GENERATION METRICS
# ==============================================================================

def ngrams(tokens, n):
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


def bleu(candidates, references):
    """
    Corpus BLEU-4 with one reference per candidate and no smoothing.

    Clipped n-gram matches and candidate n-gram totals are pooled over the
    corpus for n = 1..4. Orders the candidate corpus has no n-grams for
    (every candidate shorter than n) are left out, and the geometric mean
    runs over the remaining orders; BLEU = BP * exp(mean(ln p_n)), with
    brevity penalty BP = exp(1 - r/c) when the candidate corpus is shorter
    than the reference corpus. Any remaining order with zero matches, or
    an empty candidate corpus, gives 0.

    Example:
        >>> round(bleu([['the', 'cat', 'sat', 'on', 'mat']],
        ...            [['the', 'cat', 'sat', 'on', 'the', 'mat']]), 4)
        0.5789
        >>> bleu([['good', 'answer', '.']], [['good', 'answer', '.']])
        1.0
    """
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates for {len(references)} references")
    if not candidates:
        raise EmptyInput("bleu needs at least one candidate")
    matches = [0] * BLEU_MAX_ORDER
    totals = [0] * BLEU_MAX_ORDER
    cand_length = ref_length = 0
    for candidate, reference in zip(candidates, references):
        cand_length += len(candidate)
        ref_length += len(reference)
        for n in range(1, BLEU_MAX_ORDER + 1):
            cand_counts = ngrams(candidate, n)
            ref_counts = ngrams(reference, n)
            matches[n - 1] += sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
            totals[n - 1] += sum(cand_counts.values())
    if cand_length == 0:
        return 0.0
    orders = [(m, t) for m, t in zip(matches, totals) if t > 0]
    if any(m == 0 for m, _ in orders):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in orders) / len(orders)
    brevity = math.exp(1.0 - ref_length / cand_length) if cand_length < ref_length else 1.0
    return brevity * math.exp(log_precision)


def sentence_bleu(candidate, reference):
    """The corpus formula over a one-item corpus."""
    return bleu([candidate], [reference])


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float


def rouge_n(candidate, reference, n):
    """
    ROUGE-N precision, recall and F1 from clipped n-gram overlap.

    Example:
        >>> rouge_n(['the', 'cat', 'sat'], ['the', 'cat'], 1).f1
        0.8
    """
    if n not in (1, 2):
        raise ValidationError(f"rouge_n supports n in {{1, 2}}, got {n}")
    cand_counts = ngrams(candidate, n)
    ref_counts = ngrams(reference, n)
    cand_total = sum(cand_counts.values())
    ref_total = sum(ref_counts.values())
    if cand_total == 0 or ref_total == 0:
        return RougeScore(0.0, 0.0, 0.0)
    overlap = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
    precision = overlap / cand_total
    recall = overlap / ref_total
    f1 = 0.0 if overlap == 0 else 2.0 * precision * recall / (precision + recall)
    return RougeScore(precision, recall, f1)


def mean_rouge_f1(candidates, references, n):
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates for {len(references)} references")
    if not candidates:
        raise EmptyInput("rouge needs at least one candidate")
    return float(np.mean([rouge_n(c, r, n).f1 for c, r in zip(candidates, references)]))


# ==============================================================================
# REPORT
# ==============================================================================

@dataclass
class MetricsReport:
    """
    Any subset of the scoring and generation metrics. Scoring fields are
    None for generation-only reports and vice versa; `pearson` and `spearman`
    may also be None when undefined while rmse/mae are present.
    """
    n_examples: int
    rmse: Optional[float] = None
    mae: Optional[float] = None
    pearson: Optional[float] = None
    spearman: Optional[float] = None
    bleu: Optional[float] = None
    rouge1_f: Optional[float] = None
    rouge2_f: Optional[float] = None
    grade_error_pct: Optional[float] = None

    @property
    def has_scores(self):
        return self.rmse is not None

    @property
    def has_generation(self):
        return self.bleu is not None

    def validate(self):
        if self.has_scores and self.mae > self.rmse * (1.0 + 1e-12):
            raise ValidationError(f"mae {self.mae} exceeds rmse {self.rmse}")
        return self

    def to_tsv(self):
        """
        `metric<TAB>value` lines in the fixed order rmse, mae, pearson, spearman,
        bleu, rouge1_f, rouge2_f, n_examples; grade_error_pct follows when
        scores are present. Undefined correlations render as 'n/a'.
        """
        lines = []
        if self.has_scores:
            lines.append(f"rmse\t{self.rmse:.6f}")
            lines.append(f"mae\t{self.mae:.6f}")
            lines.append(f"pearson\t{UNDEFINED if self.pearson is None else format(self.pearson, '.6f')}")
            lines.append(f"spearman\t{UNDEFINED if self.spearman is None else format(self.spearman, '.6f')}")
        if self.has_generation:
            lines.append(f"bleu\t{self.bleu:.6f}")
            lines.append(f"rouge1_f\t{self.rouge1_f:.6f}")
            lines.append(f"rouge2_f\t{self.rouge2_f:.6f}")
        lines.append(f"n_examples\t{self.n_examples}")
        if self.has_scores and self.grade_error_pct is not None:
            lines.append(f"grade_error_pct\t{self.grade_error_pct:.6f}")
        return '\n'.join(lines) + '\n'


def score_report(preds, targets):
    values = score_metrics(preds, targets)
    return MetricsReport(
        n_examples=len(preds),
        grade_error_pct=grade_error_percent(preds, targets),
        **values,
    ).validate()


def generation_report(candidates, references):
    return MetricsReport(
        n_examples=len(candidates),
        bleu=bleu(candidates, references),
        rouge1_f=mean_rouge_f1(candidates, references, 1),
        rouge2_f=mean_rouge_f1(candidates, references, 2),
    )


def combined_report(preds, targets, candidates, references):
    """Both metric families over the same examples (the pipeline's aggregate)."""
    scores = score_report(preds, targets)
    generation = generation_report(candidates, references)
    scores.bleu = generation.bleu
    scores.rouge1_f = generation.rouge1_f
    scores.rouge2_f = generation.rouge2_f
    return scores
