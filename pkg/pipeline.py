"""
Two-stage grading: a scorer predicts the grade, then a generator writes
feedback from a prompt holding the question, answer, rubric and (optionally)
that predicted grade. Also the with/without-grade conditioning experiment.

Prompt template (absent segments are dropped entirely):

    question: {q} [SEP] answer: {a} [SEP] rubric: {r} [SEP] grade: {g:.2f} [SEP] feedback:
"""

import dataclasses
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List

import numpy as np
import pandas as pd

from config import DecodeConfig, PipelineConfig, evaluation_threads
from data import (
    BOS_ID,
    EOS_ID,
    SEP_ID,
    build_vocab,
    detokenize,
    split_tokens,
    tokenize,
    upsample_balance,
)
from errors import EmptyDataset, IncompatibleCheckpoint, InvalidGrade, ValidationError
from metrics import MetricsReport, generation_report
from model import build_model, generate, grade_bin, predicted_score
from training import Sample, train

logger = logging.getLogger(__name__)

GENERATOR_MODES = ('with_grade', 'without_grade')
PROMPT_TEMPLATE_WORDS = 'question : answer : rubric : grade : feedback : 0 1 2 3 4 5 6 7 8 9 .'


@dataclass(frozen=True)
class Rubric:
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError("rubric text must be nonempty")


def default_rubric(example):
    """Per-question rubric derived from the reference answer."""
    return Rubric(f"full credit mentions {example.reference_answer}")


@dataclass
class PipelineOutput:
    id: str
    predicted_score: float
    feedback_text: str
    prompt_used: str
    prompt_ids: tuple
    generator_mode: str


def corpus_vocab(splits, max_size):
    """Vocabulary over the training texts; the prompt template tokens are always kept."""
    corpus = []
    for ex in splits.train:
        corpus.extend((ex.question, ex.reference_answer, ex.provided_answer, ex.feedback))
    return build_vocab(corpus, max_size, keep=[PROMPT_TEMPLATE_WORDS])


def max_sequence(model_config, train_config=None):
    limit = model_config.max_seq_len
    if train_config is not None:
        limit = min(limit, train_config.max_seq_len)
    return limit


# ==============================================================================
# SCORING
# ==============================================================================

def scorer_input_ids(example, vocab, max_len, include_question=True):
    """question [SEP] answer (or <bos> answer), truncated to keep the answer's tail."""
    prefix = tokenize(example.question, vocab) + [SEP_ID] if include_question else [BOS_ID]
    ids = prefix + tokenize(example.provided_answer, vocab)
    return ids[-max_len:]


def predict_grade(scorer, example, vocab, include_question=True):
    """Normalized grade in [0, 1] from a regression (or classification) scorer."""
    ids = scorer_input_ids(example, vocab, scorer.config.max_seq_len, include_question)
    return predicted_score(scorer, ids)


def predict_grades(scorer, examples, vocab, include_question=True):
    """predict_grade over many examples, fanned out over QGRADE_THREADS workers."""
    with ThreadPoolExecutor(max_workers=evaluation_threads()) as pool:
        return list(pool.map(lambda ex: predict_grade(scorer, ex, vocab, include_question), examples))


def scorer_samples(examples, vocab, model_config, max_len, include_question=True):
    samples = []
    for ex in examples:
        ids = tuple(scorer_input_ids(ex, vocab, max_len, include_question))
        if model_config.head_kind == 'classification':
            samples.append(Sample(ids, target=grade_bin(ex.score, model_config.n_classes)))
        else:
            samples.append(Sample(ids, target=ex.score))
    return samples


def train_scorer(splits, vocab, model_config, train_config, pipeline_config, model=None):
    """Fit a scorer (built from model_config unless `model` is given); returns (model, TrainReport)."""
    if model_config.head_kind == 'lm':
        raise ValidationError("a scorer needs a regression or classification head")
    objective = 'ce' if model_config.head_kind == 'classification' else 'mse'
    train_examples = splits.train
    if pipeline_config.upsample:
        train_examples = upsample_balance(train_examples, pipeline_config.upsample_bins, train_config.seed)
    max_len = max_sequence(model_config, train_config)
    if model is None:
        model = build_model(model_config, train_config.seed)
    report = train(
        model,
        scorer_samples(train_examples, vocab, model_config, max_len, pipeline_config.include_question),
        scorer_samples(splits.validation, vocab, model_config, max_len, pipeline_config.include_question),
        objective,
        train_config,
    )
    return model, report


# ==============================================================================
# PROMPTS AND GENERATION
# ==============================================================================

def _check_grade(grade):
    if grade is None:
        return
    if not (isinstance(grade, (int, float)) and math.isfinite(grade) and 0.0 <= grade <= 1.0):
        raise InvalidGrade(f"grade must lie in [0, 1], got {grade!r}")


def build_prompt(example, rubric, grade, vocab, max_len=None):
    """
    Token ids of the feedback prompt.

    When longer than `max_len` the prompt loses tokens from the front of the
    question/answer head first, then from the front of the remainder; the
    trailing `feedback:` cue always survives.
    """
    _check_grade(grade)
    head = f"question: {example.question} [SEP] answer: {example.provided_answer}"
    tail = []
    if rubric is not None:
        tail.append(f"rubric: {rubric.text}")
    if grade is not None:
        tail.append(f"grade: {grade:.2f}")
    tail.append("feedback:")
    head_ids = tokenize(head, vocab)
    tail_ids = tokenize(' [SEP] ' + ' [SEP] '.join(tail), vocab)
    if max_len is None or len(head_ids) + len(tail_ids) <= max_len:
        return head_ids + tail_ids
    if len(tail_ids) >= max_len:
        return tail_ids[-max_len:]
    return head_ids[len(head_ids) + len(tail_ids) - max_len:] + tail_ids


def _rubric_for(example, pipeline_config):
    return default_rubric(example) if pipeline_config.use_rubric else None


def feedback_sample(example, rubric, grade, vocab, max_len):
    """Prompt plus `feedback <eos>` as an LM sample; the response keeps at most half the budget."""
    response = tokenize(example.feedback, vocab)[:max(1, max_len // 2) - 1] + [EOS_ID]
    prompt = build_prompt(example, rubric, grade, vocab, max_len - len(response))
    return Sample(tuple(prompt + response), prompt_len=len(prompt))


def generator_samples(examples, vocab, max_len, pipeline_config, grades=None):
    """LM samples; `grades` None means prompts without a grade segment."""
    if grades is not None and len(grades) != len(examples):
        raise ValidationError(f"{len(grades)} grades for {len(examples)} examples")
    return [
        feedback_sample(ex, _rubric_for(ex, pipeline_config), None if grades is None else grades[i], vocab, max_len)
        for i, ex in enumerate(examples)
    ]


def generate_feedback(generator, example, rubric, grade, vocab, decode):
    """(feedback text, prompt ids) with the prompt sized to leave room for decoding."""
    budget = max(1, generator.config.max_seq_len - decode.max_new_tokens)
    prompt = build_prompt(example, rubric, grade, vocab, budget)
    output = generate(generator, prompt, decode)
    response = output[len(prompt):]
    if response and response[-1] == decode.stop_id:
        response = response[:-1]
    return detokenize(response, vocab), prompt


def grade_and_feedback(scorer, generator, example, rubric, mode, decode, vocab, include_question=True):
    """
    Predict the grade, then generate feedback. In with_grade mode the
    predicted grade (never the stored one) is written into the prompt.
    """
    if mode not in GENERATOR_MODES:
        raise ValidationError(f"mode must be one of {GENERATOR_MODES}, got {mode!r}")
    score = predict_grade(scorer, example, vocab, include_question)
    grade = score if mode == 'with_grade' else None
    feedback, prompt = generate_feedback(generator, example, rubric, grade, vocab, decode)
    return PipelineOutput(
        id=example.id,
        predicted_score=score,
        feedback_text=feedback,
        prompt_used=detokenize(prompt, vocab),
        prompt_ids=tuple(prompt),
        generator_mode=mode,
    )


def run_pipeline(scorer, generator, examples, vocab, mode, decode, pipeline_config):
    """grade_and_feedback over a split, fanned out over QGRADE_THREADS workers, order kept."""
    def one(example):
        return grade_and_feedback(scorer, generator, example, _rubric_for(example, pipeline_config),
                                  mode, decode, vocab, pipeline_config.include_question)

    with ThreadPoolExecutor(max_workers=evaluation_threads()) as pool:
        return list(pool.map(one, examples))


def evaluate_feedback(generator, examples, vocab, decode, pipeline_config, grades=None):
    """Generated feedback for each example, in order; `grades` None omits the grade segment."""
    if grades is not None and len(grades) != len(examples):
        raise ValidationError(f"{len(grades)} grades for {len(examples)} examples")

    def one(index):
        ex = examples[index]
        grade = None if grades is None else grades[index]
        return generate_feedback(generator, ex, _rubric_for(ex, pipeline_config), grade, vocab, decode)[0]

    with ThreadPoolExecutor(max_workers=evaluation_threads()) as pool:
        return list(pool.map(one, range(len(examples))))


def feedback_metrics(candidates, examples):
    """BLEU / ROUGE of generated texts against the examples' feedback, both re-tokenized."""
    return generation_report(
        [split_tokens(text) for text in candidates],
        [split_tokens(ex.feedback) for ex in examples],
    )


def check_shared_vocab(scorer_vocab, generator_vocab):
    if scorer_vocab.id_to_token != generator_vocab.id_to_token:
        raise IncompatibleCheckpoint("scorer and generator checkpoints use different vocabularies")


def training_grades(examples, pipeline_config, scorer, vocab):
    """Grades written into training prompts: stored scores, or the scorer's predictions."""
    if pipeline_config.train_grade_source == 'gold':
        return [ex.score for ex in examples]
    if scorer is None:
        raise ValidationError("train_grade_source=predicted needs a scorer")
    return predict_grades(scorer, examples, vocab, pipeline_config.include_question)


def train_generator(splits, vocab, model_config, train_config, pipeline_config, mode, scorer=None, model=None):
    """Fit a feedback generator for one mode (built unless `model` is given); returns (model, TrainReport)."""
    if mode not in GENERATOR_MODES:
        raise ValidationError(f"mode must be one of {GENERATOR_MODES}, got {mode!r}")
    model_config = dataclasses.replace(model_config, head_kind='lm')
    max_len = max_sequence(model_config, train_config)
    train_grades = val_grades = None
    if mode == 'with_grade':
        train_grades = training_grades(splits.train, pipeline_config, scorer, vocab)
        val_grades = training_grades(splits.validation, pipeline_config, scorer, vocab)
    if model is None:
        model = build_model(model_config, train_config.seed)
    report = train(
        model,
        generator_samples(splits.train, vocab, max_len, pipeline_config, train_grades),
        generator_samples(splits.validation, vocab, max_len, pipeline_config, val_grades),
        'lm',
        train_config,
    )
    return model, report


# ==============================================================================
# CONDITIONING EXPERIMENT
# ==============================================================================

@dataclass
class ExperimentRun:
    seed: int
    mode: str
    val_losses: List[float]
    metrics: MetricsReport

    @property
    def final_val_loss(self):
        return self.val_losses[-1]

    def to_text(self):
        lines = [f"# seed={self.seed} mode={self.mode}"]
        lines.extend(f"{epoch}\t{loss!r}" for epoch, loss in enumerate(self.val_losses, start=1))
        lines.append('metrics')
        return '\n'.join(lines) + '\n' + self.metrics.to_tsv()


@dataclass
class ExperimentReport:
    runs: List[ExperimentRun] = field(default_factory=list)

    def seeds(self):
        return sorted({run.seed for run in self.runs})

    def frame(self):
        return pd.DataFrame([
            {
                'seed': run.seed,
                'mode': run.mode,
                'final_val_loss': run.final_val_loss,
                'bleu': run.metrics.bleu,
                'rouge1_f': run.metrics.rouge1_f,
                'rouge2_f': run.metrics.rouge2_f,
            }
            for run in self.runs
        ])

    def summary(self):
        """Median of every metric per mode, one row per mode."""
        return self.frame().drop(columns='seed').groupby('mode', sort=True).median().reset_index()

    def bleu_wins(self):
        """Seeds where with_grade BLEU >= without_grade BLEU."""
        by_key = {(run.seed, run.mode): run for run in self.runs}
        return [
            seed for seed in self.seeds()
            if by_key[(seed, 'with_grade')].metrics.bleu >= by_key[(seed, 'without_grade')].metrics.bleu
        ]


def write_experiment(report, out_dir):
    """seed_<s>.tsv per seed (one block per mode) and summary.tsv (medians per mode)."""
    os.makedirs(out_dir, exist_ok=True)
    for seed in report.seeds():
        blocks = [run.to_text() for run in report.runs if run.seed == seed]
        with open(os.path.join(out_dir, f"seed_{seed}.tsv"), 'w', encoding='utf-8') as handle:
            handle.write(''.join(blocks))
    summary_path = os.path.join(out_dir, 'summary.tsv')
    report.summary().to_csv(summary_path, sep='\t', index=False, float_format='%.6f')
    logger.info("Wrote experiment report for seeds %s to %s", report.seeds(), out_dir)
    return summary_path


def conditioning_experiment(splits, vocab, model_config, train_config, seeds,
                            pipeline_config=None, decode=None, scorer=None, scorer_config=None,
                            scorer_train_config=None):
    """
    For each seed train one generator per mode on identical configs and
    record its validation-loss curve and test_ua BLEU / ROUGE.

    with_grade prompts carry stored grades at train time (or predictions,
    per train_grade_source) and the scorer's predicted grades at evaluation.
    A scorer is trained first (scorer_config, scorer_train_config) when none
    is given.
    """
    if not seeds:
        raise ValidationError("conditioning_experiment needs at least one seed")
    if not splits.test_unseen_answers:
        raise EmptyDataset("conditioning_experiment evaluates on test_ua, which is empty")
    pipeline_config = pipeline_config or PipelineConfig()
    decode = decode or DecodeConfig()
    if scorer is None:
        scorer_model_config = scorer_config or dataclasses.replace(model_config, head_kind='regression')
        scorer_train = scorer_train_config or dataclasses.replace(train_config, seed=seeds[0])
        scorer, _ = train_scorer(splits, vocab, scorer_model_config, scorer_train, pipeline_config)
    test = splits.test_unseen_answers
    predicted = predict_grades(scorer, test, vocab, pipeline_config.include_question)

    report = ExperimentReport()
    for seed in seeds:
        seed_config = dataclasses.replace(train_config, seed=seed)
        for mode in GENERATOR_MODES:
            generator, train_report = train_generator(
                splits, vocab, model_config, seed_config, pipeline_config, mode, scorer,
            )
            grades = predicted if mode == 'with_grade' else None
            texts = evaluate_feedback(generator, test, vocab, decode, pipeline_config, grades)
            run = ExperimentRun(seed, mode, list(train_report.val_losses), feedback_metrics(texts, test))
            report.runs.append(run)
            logger.info("seed %d %s: final val loss %.6f, bleu %.4f",
                        seed, mode, run.final_val_loss, run.metrics.bleu)
    return report


def median_final_losses(report):
    frame = report.frame()
    return {mode: float(np.median(frame.loc[frame['mode'] == mode, 'final_val_loss'])) for mode in GENERATOR_MODES}
