"""
Tests for the two-stage grading pipeline and the conditioning experiment.
"""

import math
import os
import tempfile
import unittest
import sys
from unittest.mock import patch

# Add parent directory to path to import the grading modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config import DecodeConfig, PipelineConfig
from data import BOS_ID, EOS_ID, SEP_ID, Vocab, detokenize, tokenize
from errors import IncompatibleCheckpoint, InvalidGrade, ValidationError
from model import build_model
from pipeline import (
    GENERATOR_MODES,
    Rubric,
    build_prompt,
    check_shared_vocab,
    conditioning_experiment,
    corpus_vocab,
    default_rubric,
    evaluate_feedback,
    feedback_metrics,
    feedback_sample,
    generate_feedback,
    grade_and_feedback,
    predict_grade,
    predict_grades,
    run_pipeline,
    scorer_input_ids,
    train_generator,
    train_scorer,
    training_grades,
    write_experiment,
)

from conftest import quick_train_config, tiny_model_config, tiny_splits

SHORT_DECODE = DecodeConfig(max_new_tokens=4)


class PipelineTestCase(unittest.TestCase):
    """Shares one synthetic corpus and a vocabulary wide enough for every prompt token"""

    @classmethod
    def setUpClass(cls):
        cls.splits = tiny_splits()
        cls.vocab = corpus_vocab(cls.splits, 200)
        cls.example = cls.splits.train[0]

    def model_config(self, head_kind='regression'):
        return tiny_model_config(head_kind, vocab_size=len(self.vocab), max_seq_len=64)

    def train_config(self, **overrides):
        values = dict(epochs=1, max_seq_len=64)
        values.update(overrides)
        return quick_train_config(**values)

    def prompt_text(self, grade, rubric=None, max_len=None):
        return detokenize(build_prompt(self.example, rubric, grade, self.vocab, max_len), self.vocab)


class TestBuildPrompt(PipelineTestCase):
    """Test build_prompt()"""

    def test_grade_segment(self):
        """A grade of 0.75 renders as 'grade : 0 . 7 5' before the feedback cue"""
        self.assertTrue(self.prompt_text(0.75).endswith('[sep] grade : 0 . 7 5 [sep] feedback :'))

    def test_two_decimals(self):
        """Grades are written with exactly two decimals"""
        self.assertIn('grade : 1 . 0 0', self.prompt_text(1.0))
        self.assertIn('grade : 0 . 3 3', self.prompt_text(1 / 3))

    def test_grade_omitted(self):
        """No grade means no grade segment at all"""
        text = self.prompt_text(None)
        self.assertNotIn('grade', text)
        self.assertTrue(text.startswith('question :'))
        self.assertTrue(text.endswith('[sep] feedback :'))

    def test_rubric_segment(self):
        """The rubric sits between the answer and the grade"""
        text = self.prompt_text(0.5, Rubric('mention both ideas'))
        self.assertLess(text.index('rubric :'), text.index('grade :'))
        self.assertLess(text.index('answer :'), text.index('rubric :'))

    def test_truncation_keeps_cue(self):
        """An over-long prompt loses its head and keeps the feedback cue"""
        full = build_prompt(self.example, None, 0.5, self.vocab)
        cut = build_prompt(self.example, None, 0.5, self.vocab, max_len=12)
        self.assertEqual(len(cut), 12)
        self.assertEqual(cut, full[-12:])
        self.assertEqual(detokenize(cut[-2:], self.vocab), 'feedback :')

    def test_tiny_budget_keeps_tail_only(self):
        """A budget shorter than the tail keeps the tail's end"""
        cut = build_prompt(self.example, None, 0.5, self.vocab, max_len=3)
        self.assertEqual(detokenize(cut, self.vocab), '[sep] feedback :')

    def test_invalid_grade(self):
        """Grades outside [0, 1] or non-finite are rejected"""
        for grade in (1.5, -0.1, math.nan):
            with self.assertRaises(InvalidGrade):
                build_prompt(self.example, None, grade, self.vocab)

    def test_empty_rubric(self):
        """Rubric text must not be blank"""
        with self.assertRaises(ValidationError):
            Rubric('  ')
        self.assertIn(self.example.reference_answer, default_rubric(self.example).text)


class TestFeedbackSample(PipelineTestCase):
    """Test feedback_sample()"""

    def test_layout(self):
        """Prompt, then the tokenized feedback, then <eos>"""
        sample = feedback_sample(self.example, None, 0.5, self.vocab, 64)
        prompt = build_prompt(self.example, None, 0.5, self.vocab)
        self.assertEqual(sample.prompt_len, len(prompt))
        self.assertEqual(list(sample.token_ids[:sample.prompt_len]), prompt)
        self.assertEqual(sample.token_ids[-1], EOS_ID)
        self.assertEqual(list(sample.token_ids[sample.prompt_len:-1]), tokenize(self.example.feedback, self.vocab))

    def test_fits_budget(self):
        """Samples never exceed max_len"""
        sample = feedback_sample(self.example, default_rubric(self.example), 0.5, self.vocab, 20)
        self.assertLessEqual(len(sample.token_ids), 20)
        self.assertEqual(sample.token_ids[-1], EOS_ID)


class TestGrading(PipelineTestCase):
    """Test predict_grade(), grade_and_feedback() and run_pipeline()"""

    def setUp(self):
        self.scorer = build_model(self.model_config(), seed=0)
        self.generator = build_model(self.model_config('lm'), seed=0)

    def test_fresh_scorer_predicts_half(self):
        """A zero-init regression head predicts 0.5 for every example"""
        self.assertEqual(predict_grade(self.scorer, self.example, self.vocab), 0.5)
        self.assertEqual(predict_grades(self.scorer, self.splits.validation, self.vocab), [0.5] * 9)

    def test_predicted_grade_in_prompt(self):
        """with_grade writes the predicted grade, not the stored one"""
        output = grade_and_feedback(self.scorer, self.generator, self.example, None, 'with_grade',
                                    SHORT_DECODE, self.vocab)
        self.assertEqual(output.predicted_score, 0.5)
        self.assertIn('grade : 0 . 5 0', output.prompt_used)
        self.assertEqual(output.generator_mode, 'with_grade')

    def test_without_grade_still_scores(self):
        """without_grade prompts omit the grade but the output keeps the score"""
        output = grade_and_feedback(self.scorer, self.generator, self.example, None, 'without_grade',
                                    SHORT_DECODE, self.vocab)
        self.assertEqual(output.predicted_score, 0.5)
        self.assertNotIn('grade', output.prompt_used)

    def test_unknown_mode(self):
        """Modes other than with_grade / without_grade are rejected"""
        with self.assertRaises(ValidationError):
            grade_and_feedback(self.scorer, self.generator, self.example, None, 'both', SHORT_DECODE, self.vocab)

    def test_run_pipeline_keeps_order(self):
        """Outputs come back in input order, also with several threads"""
        examples = self.splits.test_unseen_answers
        with patch.dict(os.environ, {'QGRADE_THREADS': '3'}):
            outputs = run_pipeline(self.scorer, self.generator, examples, self.vocab, 'with_grade',
                                   SHORT_DECODE, PipelineConfig())
        self.assertEqual([o.id for o in outputs], [ex.id for ex in examples])
        self.assertTrue(all('rubric :' in o.prompt_used for o in outputs))

    def test_scorer_input_without_question(self):
        """Without the question the scorer sees <bos> followed by the answer"""
        with_question = scorer_input_ids(self.example, self.vocab, 64)
        without = scorer_input_ids(self.example, self.vocab, 64, include_question=False)
        self.assertIn(SEP_ID, with_question)
        self.assertEqual(without[0], BOS_ID)
        self.assertEqual(without[1:], tokenize(self.example.provided_answer, self.vocab))
        self.assertEqual(with_question[-len(without) + 1:], without[1:])

    def test_evaluate_feedback_matches_sequential(self):
        """Threaded evaluation returns the same texts, in order, as one-by-one generation"""
        examples = self.splits.test_unseen_answers
        grades = [0.25] * len(examples)
        with patch.dict(os.environ, {'QGRADE_THREADS': '2'}):
            texts = evaluate_feedback(self.generator, examples, self.vocab, SHORT_DECODE, PipelineConfig(), grades)
        expected = [
            generate_feedback(self.generator, ex, default_rubric(ex), 0.25, self.vocab, SHORT_DECODE)[0]
            for ex in examples
        ]
        self.assertEqual(texts, expected)

    def test_evaluate_feedback_grade_count(self):
        """One grade per example is required when grades are given"""
        with self.assertRaises(ValidationError):
            evaluate_feedback(self.generator, self.splits.validation, self.vocab, SHORT_DECODE,
                              PipelineConfig(), [0.5])

    def test_feedback_metrics_perfect(self):
        """Reproducing the stored feedback scores BLEU and ROUGE of 1"""
        examples = self.splits.validation
        report = feedback_metrics([ex.feedback for ex in examples], examples)
        self.assertAlmostEqual(report.bleu, 1.0, places=12)
        self.assertAlmostEqual(report.rouge1_f, 1.0, places=12)
        self.assertAlmostEqual(report.rouge2_f, 1.0, places=12)
        self.assertIsNone(report.rmse)

    def test_shared_vocab(self):
        """Different vocabularies are incompatible"""
        check_shared_vocab(self.vocab, Vocab(list(self.vocab.id_to_token)))
        with self.assertRaises(IncompatibleCheckpoint):
            check_shared_vocab(self.vocab, corpus_vocab(self.splits, 30))


class TestTrainingStages(PipelineTestCase):
    """Test train_scorer(), train_generator() and training_grades()"""

    def test_train_scorer(self):
        """One epoch runs and returns a regression model"""
        model, report = train_scorer(self.splits, self.vocab, self.model_config(), self.train_config(),
                                     PipelineConfig(upsample=True))
        self.assertEqual(report.epochs_run, 1)
        self.assertEqual(model.config.head_kind, 'regression')
        self.assertTrue(0.0 < predict_grade(model, self.example, self.vocab) < 1.0)

    def test_scorer_needs_score_head(self):
        """An LM head cannot be a scorer"""
        with self.assertRaises(ValidationError):
            train_scorer(self.splits, self.vocab, self.model_config('lm'), self.train_config(), PipelineConfig())

    def test_train_generator(self):
        """Generators always get an LM head and a finite loss"""
        model, report = train_generator(self.splits, self.vocab, self.model_config(), self.train_config(),
                                        PipelineConfig(), 'with_grade')
        self.assertEqual(model.config.head_kind, 'lm')
        self.assertTrue(math.isfinite(report.best_val_loss))

    def test_training_grades(self):
        """gold uses stored scores; predicted needs a scorer"""
        examples = self.splits.validation
        self.assertEqual(training_grades(examples, PipelineConfig(), None, self.vocab), [ex.score for ex in examples])
        with self.assertRaises(ValidationError):
            training_grades(examples, PipelineConfig(train_grade_source='predicted'), None, self.vocab)


class TestConditioningExperiment(PipelineTestCase):
    """Test conditioning_experiment() and write_experiment()"""

    def test_two_seeds(self):
        """Two seeds give four runs, a two-row summary and per-seed files"""
        report = conditioning_experiment(self.splits, self.vocab, self.model_config('lm'), self.train_config(),
                                         [1, 2], decode=SHORT_DECODE)
        self.assertEqual(len(report.runs), 4)
        self.assertEqual(report.seeds(), [1, 2])
        summary = report.summary()
        self.assertEqual(list(summary['mode']), sorted(GENERATOR_MODES))
        self.assertTrue(all(len(run.val_losses) == 1 for run in report.runs))

        with tempfile.TemporaryDirectory() as tmp:
            write_experiment(report, tmp)
            self.assertEqual(sorted(os.listdir(tmp)), ['seed_1.tsv', 'seed_2.tsv', 'summary.tsv'])
            with open(os.path.join(tmp, 'seed_1.tsv'), encoding='utf-8') as handle:
                text = handle.read()
            self.assertIn('# seed=1 mode=with_grade', text)
            self.assertIn('# seed=1 mode=without_grade', text)

    def test_needs_seeds(self):
        """An empty seed list is rejected"""
        with self.assertRaises(ValidationError):
            conditioning_experiment(self.splits, self.vocab, self.model_config('lm'), self.train_config(), [])


if __name__ == '__main__':
    unittest.main()
