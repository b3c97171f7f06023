"""
Shared test factories for the grading toolkit tests.

Keeps the tiny model configs, hand-made grading records and small
synthetic corpora in one place so every test file builds them the same way.

Usage:
    from conftest import tiny_model_config, tiny_splits

    def test_something(self):
        model = build_model(tiny_model_config(), seed=0)
"""

import os
import sys

import numpy as np

# Add parent directory to path to import the grading modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from autodiff import Tensor
from config import ModelConfig, TrainConfig
from data import DatasetSplits, GradingExample, SyntheticSpec, gen_synthetic
from pipeline import corpus_vocab


def tiny_model_config(head_kind='regression', tune='full', quantize_base=False, **overrides):
    """
    A one-layer model small enough for finite differences and quick training.

    Defaults to full fine-tuning of an unquantized base; pass
    tune='lora', quantize_base=True for the QLoRA layout.

    Example:
        >>> cfg = tiny_model_config('lm', max_seq_len=64)
    """
    values = dict(
        vocab_size=40,
        d_model=8,
        n_heads=2,
        n_layers=1,
        max_seq_len=32,
        head_kind=head_kind,
        n_classes=11,
        tune=tune,
        quantize_base=quantize_base,
        lora_rank=2,
        lora_alpha=4.0,
        quant_bits=4,
        quant_block_size=16,
    )
    values.update(overrides)
    return ModelConfig(**values).validate()


def quick_train_config(**overrides):
    """A few epochs at a high learning rate; enough to move a tiny model."""
    values = dict(
        batch_size=4,
        learning_rate=1e-2,
        weight_decay=0.0,
        epochs=3,
        early_stop_patience=10,
        seed=0,
        max_seq_len=32,
    )
    values.update(overrides)
    return TrainConfig(**values).validate()


def random_tensor(shape, seed=0, requires_grad=False, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=requires_grad)


def make_example(index=0, score=0.5, question='what is osmosis ?',
                 answer='water moves across a membrane .', feedback='good answer .', scale='unit'):
    """A hand-written GradingExample with id ex-<index>."""
    return GradingExample(
        id=f'ex-{index}',
        question=question,
        reference_answer='osmosis moves water across a membrane .',
        provided_answer=answer,
        score=score,
        raw_score=score,
        feedback=feedback,
        scale=scale,
    )


def one_per_split():
    """Four hand-written records, one in each split."""
    return DatasetSplits(
        train=[make_example(0, 1.0)],
        validation=[make_example(1, 0.5)],
        test_unseen_answers=[make_example(2, 0.25)],
        test_unseen_questions=[make_example(3, 0.0, question='what is diffusion ?')],
    )


def tiny_spec(seed=3, n_examples=60):
    return SyntheticSpec(
        n_questions=4,
        n_examples=n_examples,
        vocab_theme_size=16,
        seed=seed,
        concepts_per_question=2,
        max_distractors=2,
    )


def tiny_splits(seed=3, n_examples=60):
    """A 60-record synthetic corpus: 42 train, 9 val, 5 test_ua, 4 test_uq."""
    return gen_synthetic(tiny_spec(seed, n_examples))


def tiny_vocab(splits, config=None):
    size = config.vocab_size if config is not None else 40
    return corpus_vocab(splits, size)
