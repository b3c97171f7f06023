"""
Command-line entry point: python app.py <subcommand> [flags]

Subcommands: gen-data, train, eval, pipeline, experiment, inspect, report.
Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""

import argparse
import dataclasses
import logging
import os
import sys

import pandas as pd

from checkpoint import describe, load_checkpoint, read_sections, require_task, save_checkpoint
from config import (
    ENV_LOG_LEVEL,
    RunConfig,
    apply_overrides,
    config_hash,
    load_config_file,
    preset,
)
from data import GradeScale, SyntheticSpec, gen_synthetic, load_dataset, split_summary, split_tokens, write_dataset
from errors import EmptyDataset, InvalidConfig, QGradeError, ValidationError
from lora import prepare_qlora
from metrics import combined_report, score_report
from pipeline import (
    GENERATOR_MODES,
    check_shared_vocab,
    conditioning_experiment,
    corpus_vocab,
    evaluate_feedback,
    feedback_metrics,
    predict_grades,
    run_pipeline,
    train_generator,
    train_scorer,
    write_experiment,
)
from training import RUN_LOG_COLUMNS, UNDEFINED, write_run_log

logger = logging.getLogger('qgrade')

# ==============================================================================
# CONSTANTS
# ==============================================================================

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

TASKS = ('scorer', 'feedback')
DEFAULT_LOG_LEVEL = 'WARNING'
LOG_FORMAT = '%(levelname)s %(name)s: %(message)s'

# argparse dest -> RunConfig key. Flags left unset (None) do not override.
FLAG_KEYS = {
    'epochs': 'train.epochs',
    'batch_size': 'train.batch_size',
    'learning_rate': 'train.learning_rate',
    'weight_decay': 'train.weight_decay',
    'patience': 'train.early_stop_patience',
    'grad_clip': 'train.grad_clip_norm',
    'seed': 'train.seed',
    'vocab_size': 'model.vocab_size',
    'd_model': 'model.d_model',
    'n_heads': 'model.n_heads',
    'n_layers': 'model.n_layers',
    'max_seq_len': 'model.max_seq_len',
    'head': 'model.head_kind',
    'tune': 'model.tune',
    'quantize_base': 'model.quantize_base',
    'lora_rank': 'model.lora_rank',
    'lora_alpha': 'model.lora_alpha',
    'quant_bits': 'model.quant_bits',
    'quant_block_size': 'model.quant_block_size',
    'include_question': 'pipeline.include_question',
    'upsample': 'pipeline.upsample',
    'grade_source': 'pipeline.train_grade_source',
    'rubric': 'pipeline.use_rubric',
    'decode': 'decode.mode',
    'temperature': 'decode.temperature',
    'max_new_tokens': 'decode.max_new_tokens',
    'scale': 'data.scale',
}

# ==============================================================================
# END CONSTANTS
# ==============================================================================


def resolve_config(args, preset_name=None):
    """defaults < preset < --config file < --set KEY=VALUE < explicit flags."""
    run = RunConfig()
    if preset_name is not None:
        run = dataclasses.replace(run, train=preset(preset_name))
    if getattr(args, 'config', None):
        run = apply_overrides(run, load_config_file(args.config))
    pairs = {}
    for item in getattr(args, 'set', None) or []:
        key, sep, value = item.partition('=')
        if not sep:
            raise InvalidConfig(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value.strip()
    run = apply_overrides(run, pairs)
    flags = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if getattr(args, dest, None) is not None}
    run = apply_overrides(run, flags)
    if 'max_seq_len' in vars(args) and args.max_seq_len is not None:
        run = apply_overrides(run, {'train.max_seq_len': args.max_seq_len})
    return run.validate()


def _scale(run):
    return GradeScale.by_name(run.data.scale) if run.data.scale else None


def _meta_flag(checkpoint, key, default=True):
    return checkpoint.meta.get(key, str(default)) == 'True'


def _require_examples(examples, split):
    if not examples:
        raise EmptyDataset(f"split {split!r} has no examples")
    return examples


def _print_pairs(pairs):
    for key, value in pairs:
        print(f"{key}\t{value}")


# ==============================================================================
# SUBCOMMANDS
# ==============================================================================

def cmd_gen_data(args):
    spec = SyntheticSpec(
        n_questions=args.questions,
        n_examples=args.examples,
        vocab_theme_size=args.theme_size,
        seed=args.seed,
    )
    splits = gen_synthetic(spec)
    write_dataset(splits, args.out)
    print(split_summary(splits).to_string(index=False, float_format=lambda v: f"{v:.4f}"))


def cmd_train(args):
    preset_name = args.preset or args.task
    run = resolve_config(args, preset_name)
    if args.task == 'feedback':
        run = dataclasses.replace(run, model=dataclasses.replace(run.model, head_kind='lm'))
    elif run.model.head_kind == 'lm':
        run = dataclasses.replace(run, model=dataclasses.replace(run.model, head_kind='regression'))
    run.validate()
    splits = load_dataset(args.data, _scale(run))

    model = None
    model_config = run.model
    if args.init:
        init = load_checkpoint(args.init)
        require_task(init, args.task)
        vocab = init.vocab
        model = init.model
        prepare_qlora(
            model, run.model.tune, run.model.quantize_base, run.model.lora_rank, run.model.lora_alpha,
            run.train.seed, bits=run.model.quant_bits, block_size=run.model.quant_block_size,
        )
        model_config = model.config
    else:
        vocab = corpus_vocab(splits, min(run.data.vocab_max_size, run.model.vocab_size))

    meta = {'task': args.task, 'seed': run.train.seed, 'config_hash': config_hash(run),
            'include_question': run.pipeline.include_question, 'use_rubric': run.pipeline.use_rubric}
    if args.task == 'scorer':
        model, report = train_scorer(splits, vocab, model_config, run.train, run.pipeline, model=model)
    else:
        scorer = None
        if args.scorer_ckpt:
            scorer_ckpt = load_checkpoint(args.scorer_ckpt)
            require_task(scorer_ckpt, 'scorer')
            check_shared_vocab(scorer_ckpt.vocab, vocab)
            scorer = scorer_ckpt.model
        model, report = train_generator(splits, vocab, model_config, run.train, run.pipeline,
                                        args.mode, scorer=scorer, model=model)
        meta['mode'] = args.mode
    if report.best_epoch is None:
        best_epoch, best_val = UNDEFINED, UNDEFINED
    else:
        best_epoch, best_val = report.best_epoch, f"{report.best_val_loss:.6f}"
    meta['epoch'] = best_epoch

    save_checkpoint(args.out, model, vocab, meta)
    log_path = args.log or args.out + '.log'
    write_run_log(report, log_path)
    _print_pairs([
        ('checkpoint', args.out),
        ('run_log', log_path),
        ('epochs_run', report.epochs_run),
        ('best_epoch', best_epoch),
        ('best_val_loss', best_val),
        ('initial_val_loss', f"{report.initial_val_loss:.6f}"),
        ('stopped_early', str(report.stopped_early).lower()),
        ('trainable_fraction', f"{report.trainable_fraction:.6f}"),
    ])


def cmd_eval(args):
    checkpoint = load_checkpoint(args.ckpt)
    require_task(checkpoint, args.task)
    run = resolve_config(args)
    splits = load_dataset(args.data, _scale(run))
    examples = _require_examples(splits.by_name(args.split), args.split)
    include_question = _meta_flag(checkpoint, 'include_question')

    if args.task == 'scorer':
        preds = predict_grades(checkpoint.model, examples, checkpoint.vocab, include_question)
        report = score_report(preds, [ex.score for ex in examples])
    else:
        pipeline_config = dataclasses.replace(
            run.pipeline, include_question=include_question, use_rubric=_meta_flag(checkpoint, 'use_rubric'),
        )
        grades = None
        if checkpoint.meta.get('mode') == 'with_grade':
            if args.scorer_ckpt:
                scorer = load_checkpoint(args.scorer_ckpt)
                require_task(scorer, 'scorer')
                check_shared_vocab(scorer.vocab, checkpoint.vocab)
                grades = predict_grades(scorer.model, examples, checkpoint.vocab, include_question)
            else:
                grades = [ex.score for ex in examples]
        texts = evaluate_feedback(checkpoint.model, examples, checkpoint.vocab, run.decode, pipeline_config, grades)
        report = feedback_metrics(texts, examples)
    sys.stdout.write(report.to_tsv())


def cmd_pipeline(args):
    scorer = load_checkpoint(args.scorer_ckpt)
    generator = load_checkpoint(args.gen_ckpt)
    require_task(scorer, 'scorer')
    require_task(generator, 'feedback')
    check_shared_vocab(scorer.vocab, generator.vocab)
    run = resolve_config(args)
    pipeline_config = dataclasses.replace(
        run.pipeline,
        include_question=_meta_flag(scorer, 'include_question'),
        use_rubric=_meta_flag(generator, 'use_rubric'),
    )
    splits = load_dataset(args.data, _scale(run))
    examples = _require_examples(splits.by_name(args.split), args.split)

    outputs = run_pipeline(scorer.model, generator.model, examples, generator.vocab,
                           args.mode, run.decode, pipeline_config)
    records = pd.DataFrame({
        'id': [out.id for out in outputs],
        'predicted_score': [out.predicted_score for out in outputs],
        'feedback': [out.feedback_text for out in outputs],
    })
    records.to_csv(args.out, sep='\t', index=False, float_format='%.6f')
    if args.dump_prompts:
        prompts = pd.DataFrame({'id': [o.id for o in outputs], 'prompt': [o.prompt_used for o in outputs]})
        prompts.to_csv(args.dump_prompts, sep='\t', index=False)
    report = combined_report(
        [out.predicted_score for out in outputs],
        [ex.score for ex in examples],
        [split_tokens(out.feedback_text) for out in outputs],
        [split_tokens(ex.feedback) for ex in examples],
    )
    sys.stdout.write(report.to_tsv())


def cmd_experiment(args):
    run = resolve_config(args, 'feedback')
    seeds = parse_seeds(args.seeds)
    splits = load_dataset(args.data, _scale(run))
    vocab = corpus_vocab(splits, min(run.data.vocab_max_size, run.model.vocab_size))
    scorer = None
    if args.scorer_ckpt:
        checkpoint = load_checkpoint(args.scorer_ckpt)
        require_task(checkpoint, 'scorer')
        check_shared_vocab(checkpoint.vocab, vocab)
        scorer = checkpoint.model
    scorer_model = dataclasses.replace(run.model, head_kind='regression')
    scorer_train = dataclasses.replace(preset('scorer'), seed=seeds[0], max_seq_len=run.train.max_seq_len)
    report = conditioning_experiment(
        splits, vocab, run.model, run.train, seeds,
        pipeline_config=run.pipeline, decode=run.decode, scorer=scorer,
        scorer_config=scorer_model, scorer_train_config=scorer_train,
    )
    summary_path = write_experiment(report, args.out_dir)
    print(report.summary().to_string(index=False, float_format=lambda v: f"{v:.6f}"))
    logger.info("Summary written to %s", summary_path)


def parse_seeds(text):
    try:
        seeds = [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise ValidationError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ValidationError("--seeds needs at least one seed")
    return seeds


def cmd_inspect(args):
    version, sections = describe(args.ckpt)
    with open(args.ckpt, 'rb') as handle:
        _, table = read_sections(handle.read())
    texts = {name: payload.decode('utf-8') for name, kind, payload in table if name in ('config', 'meta')}
    print(f"format_version\t{version}")
    print(f"sections\t{len(sections)}")
    for name in ('meta', 'config'):
        for line in texts.get(name, '').splitlines():
            key, _, value = line.partition(' = ')
            print(f"{key}\t{value}")
    for name, kind, size in sections:
        print(f"section\t{name}\t{kind}\t{size}")


def read_run_log(path):
    """Per-epoch rows as a DataFrame plus the `#` summary fields."""
    frame = pd.read_csv(path, sep='\t', comment='#', header=None, names=list(RUN_LOG_COLUMNS))
    summary = {}
    with open(path, encoding='utf-8') as handle:
        for line in handle:
            if line.startswith('# ') and '=' in line:
                for pair in line[2:].split():
                    key, _, value = pair.partition('=')
                    summary[key] = value
    return frame, summary


def cmd_report(args):
    frame, summary = read_run_log(args.log)
    if frame.empty:
        raise EmptyDataset(f"run log {args.log} has no epochs")
    stopped_early = summary.get('stopped_early') == 'true'
    if frame['val_loss'].notna().any():
        best_row = frame.loc[frame['val_loss'].idxmin()]
        best_epoch, best_val = int(best_row['epoch']), f"{best_row['val_loss']:.6f}"
    else:
        best_epoch, best_val = UNDEFINED, UNDEFINED
    _print_pairs([
        ('epochs_run', len(frame)),
        ('best_epoch', best_epoch),
        ('best_val_loss', best_val),
        ('final_train_loss', f"{frame['train_loss'].iloc[-1]:.6f}"),
        ('final_val_loss', f"{frame['val_loss'].iloc[-1]:.6f}"),
        ('stop_reason', 'early_stop' if stopped_early else 'epoch_budget'),
        ('total_seconds', f"{frame['seconds'].sum():.3f}"),
    ])


# ==============================================================================
# ARGUMENT PARSING
# ==============================================================================

def _add_model_flags(parser):
    group = parser.add_argument_group('model')
    group.add_argument('--vocab-size', type=int)
    group.add_argument('--d-model', type=int)
    group.add_argument('--n-heads', type=int)
    group.add_argument('--n-layers', type=int)
    group.add_argument('--max-seq-len', type=int)
    group.add_argument('--head', choices=('regression', 'classification'))
    group.add_argument('--tune', choices=('lora', 'heads', 'full'))
    group.add_argument('--quantize-base', action=argparse.BooleanOptionalAction, default=None)
    group.add_argument('--lora-rank', type=int)
    group.add_argument('--lora-alpha', type=float)
    group.add_argument('--quant-bits', type=int, choices=(4, 8))
    group.add_argument('--quant-block-size', type=int)


def _add_train_flags(parser):
    group = parser.add_argument_group('training')
    group.add_argument('--epochs', type=int)
    group.add_argument('--batch-size', type=int)
    group.add_argument('--learning-rate', type=float)
    group.add_argument('--weight-decay', type=float)
    group.add_argument('--patience', type=int)
    group.add_argument('--grad-clip', type=float)
    group.add_argument('--include-question', action=argparse.BooleanOptionalAction, default=None)
    group.add_argument('--rubric', action=argparse.BooleanOptionalAction, default=None)
    group.add_argument('--upsample', action=argparse.BooleanOptionalAction, default=None)
    group.add_argument('--grade-source', choices=('gold', 'predicted'))


def _add_decode_flags(parser):
    group = parser.add_argument_group('decoding')
    group.add_argument('--decode', choices=('greedy', 'sample'))
    group.add_argument('--temperature', type=float)
    group.add_argument('--max-new-tokens', type=int)


def _add_common(parser):
    parser.add_argument('--config', help='key = value config file, merged under explicit flags')
    parser.add_argument('--set', action='append', metavar='KEY=VALUE', help='override one config key')
    parser.add_argument('--scale', choices=('unit', 'mohler'), help='override every record\'s grade scale')


def build_parser():
    parser = argparse.ArgumentParser(prog='qgrade', description='Short-answer scoring and feedback generation')
    parser.add_argument('--log-level', help=f'logging level (default: ${ENV_LOG_LEVEL} or {DEFAULT_LOG_LEVEL})')
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen-data', help='write a synthetic grading corpus')
    gen.add_argument('--seed', type=int, default=7)
    gen.add_argument('--examples', type=int, default=2857)
    gen.add_argument('--questions', type=int, default=31)
    gen.add_argument('--theme-size', type=int, default=120)
    gen.add_argument('--out', required=True)
    gen.set_defaults(handler=cmd_gen_data)

    tr = commands.add_parser('train', help='train a scorer or a feedback generator')
    tr.add_argument('--task', choices=TASKS, required=True)
    tr.add_argument('--preset', choices=('scorer', 'feedback'))
    tr.add_argument('--data', required=True)
    tr.add_argument('--out', required=True)
    tr.add_argument('--seed', type=int)
    tr.add_argument('--log', help='run log path (default: <out>.log)')
    tr.add_argument('--init', help='start from this checkpoint (convert with --tune/--quantize-base)')
    tr.add_argument('--mode', choices=GENERATOR_MODES, default='with_grade')
    tr.add_argument('--scorer-ckpt', help='scorer for --grade-source predicted')
    _add_common(tr)
    _add_model_flags(tr)
    _add_train_flags(tr)
    tr.set_defaults(handler=cmd_train)

    ev = commands.add_parser('eval', help='evaluate a checkpoint on one split')
    ev.add_argument('--task', choices=TASKS, required=True)
    ev.add_argument('--ckpt', required=True)
    ev.add_argument('--data', required=True)
    ev.add_argument('--split', default='test_ua', choices=('train', 'val', 'test_ua', 'test_uq'))
    ev.add_argument('--scorer-ckpt', help='grade source for a with_grade generator (default: stored grades)')
    _add_common(ev)
    _add_decode_flags(ev)
    ev.set_defaults(handler=cmd_eval)

    pl = commands.add_parser('pipeline', help='grade and write feedback for one split')
    pl.add_argument('--scorer-ckpt', required=True)
    pl.add_argument('--gen-ckpt', required=True)
    pl.add_argument('--data', required=True)
    pl.add_argument('--split', default='test_ua', choices=('train', 'val', 'test_ua', 'test_uq'))
    pl.add_argument('--mode', choices=GENERATOR_MODES, default='with_grade')
    pl.add_argument('--out', required=True)
    pl.add_argument('--dump-prompts', help='also write id<TAB>prompt lines here')
    _add_common(pl)
    _add_decode_flags(pl)
    pl.set_defaults(handler=cmd_pipeline)

    ex = commands.add_parser('experiment', help='with/without-grade conditioning experiment')
    ex.add_argument('--data', required=True)
    ex.add_argument('--seeds', default='1,2,3')
    ex.add_argument('--out-dir', required=True)
    ex.add_argument('--scorer-ckpt', help='use this scorer instead of training one')
    _add_common(ex)
    _add_model_flags(ex)
    _add_train_flags(ex)
    _add_decode_flags(ex)
    ex.set_defaults(handler=cmd_experiment)

    ins = commands.add_parser('inspect', help='print a checkpoint header')
    ins.add_argument('--ckpt', required=True)
    ins.set_defaults(handler=cmd_inspect)

    rep = commands.add_parser('report', help='summarise a training run log')
    rep.add_argument('--log', required=True)
    rep.set_defaults(handler=cmd_report)
    return parser


def configure_logging(level_name=None):
    level_name = (level_name or os.environ.get(ENV_LOG_LEVEL) or DEFAULT_LOG_LEVEL).upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        raise ValidationError(f"Unknown log level {level_name!r}")
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        configure_logging(args.log_level)
        args.handler(args)
    except ValidationError as exc:
        logger.debug("Validation failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (QGradeError, OSError) as exc:
        logger.debug("Runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception("Unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
