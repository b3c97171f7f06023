"""
Grading data: records, score scales, the dataset file format, class-balancing
upsampling, the word-level tokenizer and a synthetic grading corpus.

Dataset file format (UTF-8, one record per line, `#` lines ignored):

    id  split  question  reference_answer  provided_answer  raw_score  scale  feedback

with split in {train, val, test_ua, test_uq} and scale in {unit, mohler}.
"""

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.linear_model import LinearRegression
from sklearn.metrics import mean_absolute_error, mean_squared_error

from config import MOHLER_MAX_GRADE, MOHLER_STEP
from errors import (
    DuplicateId,
    EmptyDataset,
    InvalidSpec,
    ParseError,
    ScoreOutOfRange,
    ValidationError,
)

logger = logging.getLogger(__name__)

# ==============================================================================
# CONSTANTS
# ==============================================================================

SPLIT_NAMES = ('train', 'val', 'test_ua', 'test_uq')
N_FIELDS = 8

PAD, UNK, BOS, EOS, SEP = '<pad>', '<unk>', '<bos>', '<eos>', '[sep]'
RESERVED_TOKENS = (PAD, UNK, BOS, EOS, SEP)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID = range(len(RESERVED_TOKENS))

# Reserved markers first, then letter runs, single digits, and any other
# non-space character as its own token.
TOKEN_PATTERN = re.compile(r"<pad>|<unk>|<bos>|<eos>|\[sep\]|[^\W\d_]+|\d|\S")


# ==============================================================================
# RECORDS AND SCALES
# ==============================================================================

@dataclass(frozen=True)
class GradeScale:
    kind: str
    min: float
    max: float
    step: Optional[float] = None

    @classmethod
    def unit(cls):
        return cls('unit', 0.0, 1.0)

    @classmethod
    def mohler(cls):
        return cls('mohler', 0.0, MOHLER_MAX_GRADE, MOHLER_STEP)

    @classmethod
    def by_name(cls, name):
        if name == 'unit':
            return cls.unit()
        if name == 'mohler':
            return cls.mohler()
        raise ValidationError(f"Unknown grade scale {name!r}. Must be 'unit' or 'mohler'")

    def grades(self):
        """Representable raw grades; None for a continuous scale."""
        if self.step is None:
            return None
        count = int(round((self.max - self.min) / self.step)) + 1
        return [self.min + i * self.step for i in range(count)]


def normalize_score(raw, scale):
    """
    Map a raw grade onto [0, 1]: (raw - min) / (max - min).

    Example:
        >>> normalize_score(2.5, GradeScale.mohler())
        0.5
    """
    raw = float(raw)
    if not scale.min <= raw <= scale.max:
        raise ScoreOutOfRange(f"score {raw} outside the {scale.kind} range [{scale.min}, {scale.max}]")
    if scale.kind == 'unit':
        return raw
    return (raw - scale.min) / (scale.max - scale.min)


@dataclass(frozen=True)
class GradingExample:
    id: str
    question: str
    reference_answer: str
    provided_answer: str
    score: float
    raw_score: float
    feedback: str
    scale: str = 'unit'


@dataclass
class DatasetSplits:
    train: List[GradingExample] = field(default_factory=list)
    validation: List[GradingExample] = field(default_factory=list)
    test_unseen_answers: List[GradingExample] = field(default_factory=list)
    test_unseen_questions: List[GradingExample] = field(default_factory=list)

    def by_name(self, name):
        """Split list by its file name: train, val, test_ua or test_uq."""
        lists = dict(zip(SPLIT_NAMES, self._lists()))
        if name not in lists:
            raise ValidationError(f"Unknown split {name!r}. Must be one of: {', '.join(SPLIT_NAMES)}")
        return lists[name]

    def _lists(self):
        return [self.train, self.validation, self.test_unseen_answers, self.test_unseen_questions]

    def items(self):
        return list(zip(SPLIT_NAMES, self._lists()))

    def all_examples(self):
        return [ex for examples in self._lists() for ex in examples]

    def validate(self):
        seen = {}
        for name, examples in self.items():
            for ex in examples:
                if ex.id in seen:
                    raise DuplicateId(f"id {ex.id!r} appears in both {seen[ex.id]} and {name}")
                seen[ex.id] = name
        return self


def split_summary(splits):
    """Per-split example counts and mean normalized score."""
    rows = []
    for name, examples in splits.items():
        scores = [ex.score for ex in examples]
        rows.append({
            'split': name,
            'examples': len(examples),
            'mean_score': float(np.mean(scores)) if scores else float('nan'),
        })
    return pd.DataFrame(rows, columns=['split', 'examples', 'mean_score'])


# ==============================================================================
# DATASET FILE
# ==============================================================================

def _clean(text):
    return text.replace('\r\n', ' ').replace('\t', ' ').replace('\n', ' ').replace('\r', ' ')


def format_record(example, split):
    fields = [
        example.id, split, example.question, example.reference_answer,
        example.provided_answer, repr(float(example.raw_score)), example.scale, example.feedback,
    ]
    return '\t'.join(_clean(str(value)) for value in fields)


def write_dataset(splits, path):
    """Write every split in the dataset file format (inverse of load_dataset)."""
    lines = ['# ' + '\t'.join(('id', 'split', 'question', 'reference_answer', 'provided_answer',
                               'raw_score', 'scale', 'feedback'))]
    for name, examples in splits.items():
        lines.extend(format_record(ex, name) for ex in examples)
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write('\n'.join(lines) + '\n')
    logger.info("Wrote %d records to %s", len(lines) - 1, path)


def parse_record(line, line_number, scale=None):
    """Parse one record line into (split, GradingExample)."""
    fields = line.split('\t')
    if len(fields) != N_FIELDS:
        raise ParseError(f"expected {N_FIELDS} tab-separated fields, got {len(fields)}", line_number)
    record_id, split, question, reference, provided, raw_text, scale_name, feedback = fields
    if not record_id:
        raise ParseError("empty id", line_number)
    if split not in SPLIT_NAMES:
        raise ParseError(f"unknown split {split!r}", line_number)
    try:
        raw = float(raw_text)
    except ValueError:
        raise ParseError(f"raw_score {raw_text!r} is not a number", line_number) from None
    if not math.isfinite(raw):
        raise ParseError(f"raw_score {raw_text!r} is not finite", line_number)
    try:
        record_scale = GradeScale.by_name(scale_name)
    except ValidationError:
        raise ParseError(f"unknown scale {scale_name!r}", line_number) from None
    effective = scale if scale is not None else record_scale
    try:
        score = normalize_score(raw, effective)
    except ScoreOutOfRange as exc:
        raise ScoreOutOfRange(f"line {line_number}: {exc}") from None
    return split, GradingExample(
        id=record_id,
        question=question,
        reference_answer=reference,
        provided_answer=provided,
        score=score,
        raw_score=raw,
        feedback=feedback,
        scale=effective.kind,
    )


def load_dataset(path, scale=None):
    """
    Read a dataset file into its four splits.

    Args:
        path: dataset file
        scale: GradeScale overriding every record's own scale column

    Raises:
        ParseError: malformed line (message carries the line number)
        DuplicateId: an id seen twice anywhere in the file
        ScoreOutOfRange: raw score outside its scale
    """
    splits = DatasetSplits()
    seen = set()
    with open(path, encoding='utf-8') as handle:
        for line_number, raw_line in enumerate(handle, start=1):
            line = raw_line.rstrip('\n').rstrip('\r')
            if not line.strip() or line.startswith('#'):
                continue
            split, example = parse_record(line, line_number, scale)
            if example.id in seen:
                raise DuplicateId(f"line {line_number}: duplicate id {example.id!r}")
            seen.add(example.id)
            splits.by_name(split).append(example)
    logger.info("Loaded %s: %s", path, ', '.join(f"{n}={len(e)}" for n, e in splits.items()))
    return splits


# ==============================================================================
# UPSAMPLING
# ==============================================================================

def score_bin(score, n_bins):
    return min(int(math.floor(score * n_bins)), n_bins - 1)


def upsample_balance(examples, n_bins, seed):
    """
    Duplicate examples of under-represented score bins until every nonempty
    bin (equal-width over [0, 1]) holds as many as the largest one, then
    shuffle. Duplicates are drawn with replacement from a seeded generator.
    """
    if n_bins < 2:
        raise ValidationError(f"n_bins must be >= 2, got {n_bins}")
    if not examples:
        raise EmptyDataset("cannot upsample an empty list")
    rng = np.random.default_rng(seed)
    bins = {}
    for index, ex in enumerate(examples):
        bins.setdefault(score_bin(ex.score, n_bins), []).append(index)
    largest = max(len(members) for members in bins.values())
    chosen = list(range(len(examples)))
    for key in sorted(bins):
        shortfall = largest - len(bins[key])
        if shortfall:
            chosen.extend(int(i) for i in rng.choice(bins[key], size=shortfall, replace=True))
    order = rng.permutation(len(chosen))
    logger.info("Upsampled %d examples to %d over %d bins", len(examples), len(chosen), len(bins))
    return [examples[chosen[i]] for i in order]


# ==============================================================================
# TOKENIZER
# ==============================================================================

def split_tokens(text):
    """Lowercase, then split into words, single digits and punctuation marks."""
    return TOKEN_PATTERN.findall(text.lower())


@dataclass
class Vocab:
    id_to_token: List[str]
    token_to_id: dict = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValidationError(f"vocabulary must start with the reserved tokens {RESERVED_TOKENS}")
        self.token_to_id = {token: i for i, token in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValidationError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.id_to_token)

    def to_text(self):
        return '\n'.join(self.id_to_token)

    @classmethod
    def from_text(cls, text):
        return cls(text.split('\n'))


def build_vocab(corpus, max_size, keep=()):
    """
    Keep the most frequent tokens of `corpus` (ties broken lexicographically)
    after the five reserved ids. Tokens of the `keep` texts come first, in
    order of appearance, whatever their frequency.
    """
    if max_size <= len(RESERVED_TOKENS):
        raise ValidationError(f"max_size must exceed {len(RESERVED_TOKENS)}, got {max_size}")
    pinned = []
    for text in keep:
        pinned.extend(t for t in split_tokens(text) if t not in RESERVED_TOKENS and t not in pinned)
    counts = Counter()
    for text in corpus:
        counts.update(t for t in split_tokens(text) if t not in RESERVED_TOKENS and t not in pinned)
    ranked = pinned + [token for token, _ in sorted(counts.items(), key=lambda item: (-item[1], item[0]))]
    room = max_size - len(RESERVED_TOKENS)
    if len(ranked) > room:
        logger.warning("Vocabulary truncated: %d distinct tokens, keeping %d", len(ranked), room)
    return Vocab(list(RESERVED_TOKENS) + ranked[:room])


def tokenize(text, vocab):
    return [vocab.token_to_id.get(token, UNK_ID) for token in split_tokens(text)]


def detokenize(ids, vocab):
    return ' '.join(vocab.id_to_token[int(i)] for i in ids)


# ==============================================================================
# SYNTHETIC CORPUS
# ==============================================================================

_ONSETS = 'bdfgklmnprstvz'
_VOWELS = 'aeiou'

_TEMPLATE_WORDS = frozenset(
    'what are the key ideas behind explain how works in terms of its parts answer involves and '
    'i think it is about excellent covers every idea good but should also mention partially '
    'correct missing incomplete incorrect discuss a this topic s'.split()
)

# Score band -> feedback phrase, checked top-down.
FEEDBACK_BANDS = (
    (1.0, 'excellent , the answer covers every key idea .'),
    (0.75, 'good answer , but it should also mention'),
    (0.5, 'partially correct , the answer is missing'),
    (1e-9, 'incomplete , the answer is missing'),
    (0.0, 'incorrect , the answer should discuss'),
)


@dataclass
class SyntheticSpec:
    n_questions: int = 31
    n_examples: int = 2857
    vocab_theme_size: int = 120
    seed: int = 7
    concepts_per_question: int = 4
    max_distractors: int = 3

    def validate(self):
        if self.n_examples < 40:
            raise InvalidSpec(f"n_examples must be >= 40, got {self.n_examples}")
        if self.n_questions < 2:
            raise InvalidSpec(f"n_questions must be >= 2, got {self.n_questions}")
        if self.concepts_per_question < 1 or self.max_distractors < 1:
            raise InvalidSpec("concepts_per_question and max_distractors must be >= 1")
        if self.vocab_theme_size < 2 * max(self.concepts_per_question, self.max_distractors):
            raise InvalidSpec(
                f"vocab_theme_size {self.vocab_theme_size} too small for "
                f"{self.concepts_per_question} concepts and {self.max_distractors} distractors"
            )
        return self


def _pseudo_words(rng, count, exclude):
    syllables = [c + v for c in _ONSETS for v in _VOWELS]
    pool = [a + b for a in syllables for b in syllables]
    pool = [w for w in pool if w not in exclude]
    picks = rng.choice(len(pool), size=count, replace=False)
    return [pool[int(i)] for i in picks]


def _join_list(words):
    if len(words) == 1:
        return words[0]
    return ' , '.join(words[:-1]) + ' and ' + words[-1]


def synthetic_feedback(score, missing):
    for threshold, phrase in FEEDBACK_BANDS:
        if score >= threshold:
            if not missing:
                return phrase
            return f"{phrase} {_join_list(missing)} ."
    raise ValidationError(f"score {score} below every band")


def gen_synthetic(spec):
    """
    Deterministic templated grading corpus.

    Theme words are split into a concept pool and a distractor pool. Each
    question owns `concepts_per_question` concepts; an answer mentions a
    seeded subset of them plus distractors, and its raw score is the fraction
    of concepts mentioned. Feedback names the band and the missing concepts.
    Splits are 70/15/7.5/7.5; the unseen-questions split draws only from
    held-out questions.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.concepts_per_question
    words = _pseudo_words(rng, spec.vocab_theme_size + spec.n_questions, _TEMPLATE_WORDS)
    topics = words[:spec.n_questions]
    theme = words[spec.n_questions:]
    concept_pool = theme[:len(theme) // 2]
    distractor_pool = theme[len(theme) // 2:]

    questions = []
    for topic in topics:
        concepts = [concept_pool[int(i)] for i in rng.choice(len(concept_pool), size=k, replace=False)]
        questions.append({
            'topic': topic,
            'concepts': concepts,
            'question': f"what are the key ideas behind {topic} ?",
            'reference': f"{topic} involves {_join_list(concepts)} .",
        })

    n = spec.n_examples
    n_train = round(0.70 * n)
    n_val = round(0.15 * n)
    n_uq = round(0.075 * n)
    n_ua = n - n_train - n_val - n_uq
    n_heldout = max(1, spec.n_questions // 8)
    heldout = list(range(spec.n_questions - n_heldout, spec.n_questions))
    seen = list(range(spec.n_questions - n_heldout))

    def make_example(index, question_index):
        q = questions[question_index]
        mentioned = int(rng.integers(0, k + 1))
        hits = [q['concepts'][int(i)] for i in sorted(rng.choice(k, size=mentioned, replace=False))]
        n_distract = int(rng.integers(1, spec.max_distractors + 1))
        distract = [distractor_pool[int(i)] for i in rng.choice(len(distractor_pool), size=n_distract, replace=False)]
        body = hits + distract
        body = [body[int(i)] for i in rng.permutation(len(body))]
        score = mentioned / k
        missing = [c for c in q['concepts'] if c not in hits]
        return GradingExample(
            id=f"syn-{index:05d}",
            question=q['question'],
            reference_answer=q['reference'],
            provided_answer='i think it is about ' + ' '.join(body) + ' .',
            score=score,
            raw_score=score,
            feedback=synthetic_feedback(score, missing),
            scale='unit',
        )

    splits = DatasetSplits()
    counts = (n_train, n_val, n_ua)
    targets = (splits.train, splits.validation, splits.test_unseen_answers)
    index = 0
    for count, target in zip(counts, targets):
        for _ in range(count):
            target.append(make_example(index, seen[int(rng.integers(len(seen)))]))
            index += 1
    for _ in range(n_uq):
        splits.test_unseen_questions.append(make_example(index, heldout[int(rng.integers(len(heldout)))]))
        index += 1
    logger.info("Generated synthetic corpus: %d examples over %d questions (%d held out)",
                n, spec.n_questions, n_heldout)
    return splits.validate()


def concept_fraction(example, concepts):
    """Fraction of `concepts` mentioned in the example's answer."""
    tokens = set(split_tokens(example.provided_answer))
    return sum(1 for c in concepts if c in tokens) / len(concepts)


# ==============================================================================
# REFERENCE BASELINES
# ==============================================================================

@dataclass
class BaselineScores:
    name: str
    rmse: float
    mae: float


def _errors(name, preds, targets):
    return BaselineScores(
        name,
        math.sqrt(mean_squared_error(targets, preds)),
        float(mean_absolute_error(targets, preds)),
    )


def global_mean_baseline(splits):
    """Predict the mean training score for every validation example."""
    if not splits.train or not splits.validation:
        raise EmptyDataset("baseline needs train and validation examples")
    mean = float(np.mean([ex.score for ex in splits.train]))
    targets = [ex.score for ex in splits.validation]
    return _errors('global_mean', [mean] * len(targets), targets)


def bag_of_words_oracle(splits):
    """
    Least-squares regression of the score on answer token counts (plus an
    intercept), fit on train and scored on validation. A learnability check
    for the scoring task.
    """
    if not splits.train or not splits.validation:
        raise EmptyDataset("oracle needs train and validation examples")
    vectorizer = CountVectorizer(analyzer=split_tokens)
    features = vectorizer.fit_transform([ex.provided_answer for ex in splits.train])
    regressor = LinearRegression().fit(features, [ex.score for ex in splits.train])
    preds = np.clip(regressor.predict(vectorizer.transform([ex.provided_answer for ex in splits.validation])), 0.0, 1.0)
    return _errors('bag_of_words', preds, [ex.score for ex in splits.validation])
