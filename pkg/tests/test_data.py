"""
Tests for grading records, the dataset file, upsampling, the tokenizer and
the synthetic corpus.
"""

import os
import tempfile
import unittest
import sys
from collections import Counter

# Add parent directory to path to import the grading modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from data import (
    BOS_ID,
    DatasetSplits,
    GradeScale,
    PAD_ID,
    RESERVED_TOKENS,
    SEP_ID,
    UNK_ID,
    bag_of_words_oracle,
    build_vocab,
    concept_fraction,
    detokenize,
    gen_synthetic,
    global_mean_baseline,
    load_dataset,
    normalize_score,
    score_bin,
    split_summary,
    split_tokens,
    tokenize,
    upsample_balance,
    write_dataset,
)
from errors import DuplicateId, EmptyDataset, InvalidSpec, ParseError, ScoreOutOfRange, ValidationError

from conftest import make_example, one_per_split, tiny_spec, tiny_splits

HEADER = '# id\tsplit\tquestion\treference_answer\tprovided_answer\traw_score\tscale\tfeedback\n'


def reference_concepts(example):
    """Concept words listed in a synthetic reference answer ('<topic> involves a , b and c .')."""
    tokens = split_tokens(example.reference_answer)
    listed = tokens[tokens.index('involves') + 1:-1]
    return [t for t in listed if t not in (',', 'and')]


class DatasetFileTestCase(unittest.TestCase):
    """Writes dataset files into a temporary directory"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'data.tsv')

    def tearDown(self):
        self.tmp.cleanup()

    def write_lines(self, *lines):
        with open(self.path, 'w', encoding='utf-8') as handle:
            handle.write(HEADER + ''.join(line + '\n' for line in lines))


class TestNormalizeScore(unittest.TestCase):
    """Test normalize_score() and GradeScale"""

    def test_mohler_endpoints(self):
        """0 -> 0, 2.5 -> 0.5, 5 -> 1 on the 0-5 scale"""
        scale = GradeScale.mohler()
        self.assertEqual(normalize_score(0, scale), 0.0)
        self.assertEqual(normalize_score(2.5, scale), 0.5)
        self.assertEqual(normalize_score(5, scale), 1.0)

    def test_unit_identity(self):
        """Unit-scale scores pass through"""
        self.assertEqual(normalize_score(0.3, GradeScale.unit()), 0.3)

    def test_out_of_range(self):
        """6.0 on the 0-5 scale raises ScoreOutOfRange"""
        with self.assertRaises(ScoreOutOfRange):
            normalize_score(6.0, GradeScale.mohler())

    def test_mohler_grades(self):
        """The 0-5 scale in half points has 11 grades"""
        grades = GradeScale.mohler().grades()
        self.assertEqual(len(grades), 11)
        self.assertEqual((grades[0], grades[-1]), (0.0, 5.0))
        self.assertIsNone(GradeScale.unit().grades())

    def test_unknown_scale(self):
        """Scale names other than unit/mohler are rejected"""
        with self.assertRaises(ValidationError):
            GradeScale.by_name('percent')


class TestDatasetFile(DatasetFileTestCase):
    """Test write_dataset() / load_dataset()"""

    def test_one_record_per_split(self):
        """Four records written and read back land in their splits with equal fields"""
        splits = one_per_split()
        write_dataset(splits, self.path)
        loaded = load_dataset(self.path)
        for (name, expected), (_, actual) in zip(splits.items(), loaded.items()):
            self.assertEqual(actual, expected, name)

    def test_tabs_and_newlines_flattened(self):
        """Tabs and newlines inside text fields become spaces"""
        splits = DatasetSplits(train=[make_example(0, answer='water\tmoves\nfreely .')])
        write_dataset(splits, self.path)
        self.assertEqual(load_dataset(self.path).train[0].provided_answer, 'water moves freely .')

    def test_mohler_record_normalized(self):
        """A 0-5 raw score is stored raw and normalized"""
        self.write_lines('a\ttrain\tq\tr\tp\t4.0\tmohler\tf')
        example = load_dataset(self.path).train[0]
        self.assertEqual((example.raw_score, example.score, example.scale), (4.0, 0.8, 'mohler'))

    def test_scale_override(self):
        """An explicit scale overrides the record's scale column"""
        self.write_lines('a\ttrain\tq\tr\tp\t2.5\tunit\tf')
        self.assertEqual(load_dataset(self.path, scale=GradeScale.mohler()).train[0].score, 0.5)

    def test_score_out_of_range(self):
        """A mohler score of 6.0 raises ScoreOutOfRange"""
        self.write_lines('a\ttrain\tq\tr\tp\t6.0\tmohler\tf')
        with self.assertRaises(ScoreOutOfRange):
            load_dataset(self.path)

    def test_parse_error_carries_line_number(self):
        """A 7-field record on file line 3 reports line 3"""
        self.write_lines('a\ttrain\tq\tr\tp\t1.0\tunit\tf', 'b\ttrain\tq\tr\tp\t1.0\tunit')
        with self.assertRaises(ParseError) as ctx:
            load_dataset(self.path)
        self.assertEqual(ctx.exception.line_number, 3)
        self.assertTrue(str(ctx.exception).startswith('line 3: '))

    def test_bad_fields(self):
        """Unknown split, unparsable score and unknown scale are parse errors"""
        for line in ('a\tdev\tq\tr\tp\t1.0\tunit\tf',
                     'a\ttrain\tq\tr\tp\thigh\tunit\tf',
                     'a\ttrain\tq\tr\tp\t1.0\tpercent\tf'):
            self.write_lines(line)
            with self.assertRaises(ParseError):
                load_dataset(self.path)

    def test_duplicate_id(self):
        """The same id twice raises DuplicateId"""
        self.write_lines('a\ttrain\tq\tr\tp\t1.0\tunit\tf', 'a\tval\tq\tr\tp\t0.0\tunit\tf')
        with self.assertRaises(DuplicateId):
            load_dataset(self.path)

    def test_blank_and_comment_lines_skipped(self):
        """Blank lines and # comments are ignored"""
        self.write_lines('', '# note', 'a\ttest_uq\tq\tr\tp\t0.5\tunit\tf')
        self.assertEqual(len(load_dataset(self.path).test_unseen_questions), 1)


class TestUpsample(unittest.TestCase):
    """Test upsample_balance()"""

    def test_balances_bins(self):
        """Bins of sizes {9, 3} become {9, 9}"""
        examples = [make_example(i, 0.9) for i in range(9)] + [make_example(9 + i, 0.1) for i in range(3)]
        balanced = upsample_balance(examples, n_bins=2, seed=0)
        self.assertEqual(Counter(score_bin(ex.score, 2) for ex in balanced), {1: 9, 0: 9})
        self.assertTrue(set(ex.id for ex in examples) <= set(ex.id for ex in balanced))

    def test_deterministic(self):
        """The same seed gives the same order"""
        examples = [make_example(i, i / 10) for i in range(10)]
        self.assertEqual(upsample_balance(examples, 4, seed=5), upsample_balance(examples, 4, seed=5))

    def test_balanced_input_unchanged_in_size(self):
        """Already balanced input only gets shuffled"""
        examples = [make_example(i, 0.1 if i % 2 else 0.9) for i in range(6)]
        self.assertEqual(len(upsample_balance(examples, 2, seed=1)), 6)

    def test_score_one_in_top_bin(self):
        """A perfect score falls in the last bin"""
        self.assertEqual(score_bin(1.0, 5), 4)

    def test_invalid(self):
        """Fewer than two bins or no examples are rejected"""
        with self.assertRaises(ValidationError):
            upsample_balance([make_example()], 1, 0)
        with self.assertRaises(EmptyDataset):
            upsample_balance([], 2, 0)


class TestTokenizer(unittest.TestCase):
    """Test split_tokens(), build_vocab(), tokenize() and detokenize()"""

    def test_sentence(self):
        """'The cat sat.' -> ['the', 'cat', 'sat', '.']"""
        self.assertEqual(split_tokens('The cat sat.'), ['the', 'cat', 'sat', '.'])

    def test_digits_split_individually(self):
        """Numbers become single digits"""
        self.assertEqual(split_tokens('grade: 0.75'), ['grade', ':', '0', '.', '7', '5'])

    def test_empty_text(self):
        """Empty text tokenizes to nothing"""
        self.assertEqual(split_tokens(''), [])
        self.assertEqual(tokenize('', build_vocab(['a'], 10)), [])

    def test_reserved_ids(self):
        """pad, unk, bos and [sep] keep fixed ids"""
        vocab = build_vocab(['a b'], 10)
        self.assertEqual(vocab.id_to_token[:len(RESERVED_TOKENS)], list(RESERVED_TOKENS))
        self.assertEqual((PAD_ID, UNK_ID, BOS_ID, SEP_ID), (0, 1, 2, 4))
        self.assertEqual(tokenize('[sep]', vocab), [SEP_ID])

    def test_frequency_order_with_ties(self):
        """Most frequent first; ties broken lexicographically; truncation respected"""
        vocab = build_vocab(['b a c b', 'c d'], max_size=8)
        self.assertEqual(vocab.id_to_token[5:], ['b', 'c', 'a'])

    def test_kept_tokens_survive_truncation(self):
        """Pinned tokens come first even when they are rare"""
        vocab = build_vocab(['b b b c c a'], max_size=8, keep=['grade : a'])
        self.assertEqual(vocab.id_to_token[5:], ['grade', ':', 'a'])

    def test_unknown_tokens(self):
        """Unseen words map to unk"""
        vocab = build_vocab(['the cat'], 10)
        ids = tokenize('the dog', vocab)
        self.assertEqual(ids[1], UNK_ID)
        self.assertEqual(detokenize(ids, vocab), 'the <unk>')

    def test_vocab_text_round_trip(self):
        """to_text / from_text restores the vocabulary"""
        vocab = build_vocab(['x y z'], 10)
        self.assertEqual(type(vocab).from_text(vocab.to_text()).id_to_token, vocab.id_to_token)

    def test_max_size_too_small(self):
        """max_size must leave room past the reserved tokens"""
        with self.assertRaises(ValidationError):
            build_vocab(['a'], len(RESERVED_TOKENS))


class TestSyntheticCorpus(unittest.TestCase):
    """Test gen_synthetic()"""

    def test_split_sizes(self):
        """60 examples split 42 / 9 / 5 / 4"""
        splits = tiny_splits()
        sizes = [len(examples) for _, examples in splits.items()]
        self.assertEqual(sizes, [42, 9, 5, 4])

    def test_deterministic(self):
        """The same spec twice gives identical records"""
        self.assertEqual(tiny_splits(seed=9).all_examples(), tiny_splits(seed=9).all_examples())
        self.assertNotEqual(tiny_splits(seed=9).all_examples(), tiny_splits(seed=10).all_examples())

    def test_score_is_concept_fraction(self):
        """Every score equals the fraction of the question's concepts the answer mentions"""
        for example in gen_synthetic(tiny_spec(n_examples=200)).all_examples():
            concepts = reference_concepts(example)
            self.assertEqual(len(concepts), 2)
            self.assertEqual(example.score, concept_fraction(example, concepts))

    def test_feedback_names_missing_concepts(self):
        """Perfect answers get the top band; others name what is missing"""
        for example in tiny_splits().all_examples():
            concepts = reference_concepts(example)
            feedback = split_tokens(example.feedback)
            if example.score == 1.0:
                self.assertEqual(feedback[0], 'excellent')
            else:
                answer = set(split_tokens(example.provided_answer))
                for concept in concepts:
                    self.assertEqual(concept in feedback, concept not in answer)

    def test_unseen_questions_held_out(self):
        """test_uq questions never appear in train"""
        splits = tiny_splits()
        train_questions = {ex.question for ex in splits.train}
        self.assertTrue(all(ex.question not in train_questions for ex in splits.test_unseen_questions))

    def test_too_few_examples(self):
        """n_examples below 40 raises InvalidSpec"""
        with self.assertRaises(InvalidSpec):
            gen_synthetic(tiny_spec(n_examples=39))


class TestBaselines(unittest.TestCase):
    """Test the reference baselines and split_summary()"""

    def test_oracle_beats_mean(self):
        """Bag-of-words regression beats predicting the mean on a learnable corpus"""
        splits = gen_synthetic(tiny_spec(n_examples=400))
        self.assertLess(bag_of_words_oracle(splits).mae, global_mean_baseline(splits).mae)

    def test_empty_split(self):
        """Baselines need train and validation data"""
        with self.assertRaises(EmptyDataset):
            global_mean_baseline(DatasetSplits(train=[make_example()]))

    def test_split_summary(self):
        """One row per split with counts and mean scores"""
        frame = split_summary(one_per_split())
        self.assertEqual(list(frame['split']), ['train', 'val', 'test_ua', 'test_uq'])
        self.assertEqual(list(frame['examples']), [1, 1, 1, 1])
        self.assertEqual(frame.loc[0, 'mean_score'], 1.0)


if __name__ == '__main__':
    unittest.main()
