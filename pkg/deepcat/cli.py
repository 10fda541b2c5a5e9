"""
Command-line driver.

    python -m deepcat gen-data --seed 7 --out data
    python -m deepcat train --data data --out data/model.npz
    python -m deepcat eval --checkpoint data/model.npz --data data
    python -m deepcat predict --checkpoint data/model.npz --data data "motion activated kitchen faucet"
    python -m deepcat ablate --data data
    python -m deepcat report data/report.json
    python -m deepcat baseline --data data
    python -m deepcat gradcheck

Flags override the JSON config file (--config or DEEPCAT_CONFIG), which
overrides the built-in defaults. Config file sections: generator, split,
model, train, loss, eval, baseline.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional

from pydantic import BaseModel

from deepcat import config
from deepcat.checkpoint import load_checkpoint, save_checkpoint
from deepcat.corpus import read_taxonomy
from deepcat.errors import ConfigError, DeepCatError, GradientCheckError, MetricError
from deepcat.evaluate import read_report, render_table, report_rows, write_report
from deepcat.gradcheck import TOLERANCE, gradient_check_suite
from deepcat.models import (
    Ablation,
    BaselineConfig,
    CMMode,
    EvalConfig,
    GeneratorConfig,
    LossConfig,
    ModelConfig,
    SplitConfig,
    TrainConfig,
)
from deepcat.pipeline import (
    AblationRunner,
    LAMBDA_SWEEP,
    data_paths,
    evaluate_checkpoint,
    generate_data,
    load_dataset,
    predict_texts,
    run_baseline,
    table_columns,
    train_model,
    write_table,
)

logger = logging.getLogger(__name__)

RULE = '=' * 60


def _default(model: type, name: str) -> Any:
    value = model.model_fields[name].default
    return value.value if hasattr(value, 'value') else value


def _help(text: str, model: type, name: str) -> str:
    return f"{text} (default: {_default(model, name)})"


class Run:
    """Per-invocation state: resolved config sections and the files to remove on failure."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.quiet = args.quiet
        self.sections = config.load_config_file(args.config)
        # path -> mtime before the run (None if absent)
        self.outputs: Dict[str, Optional[float]] = {}

    def section(self, name: str) -> Dict[str, Any]:
        value = self.sections.get(name) or {}
        if not isinstance(value, dict):
            raise ConfigError(f"config section '{name}' must be a JSON object")
        return value

    def say(self, message: str = '') -> None:
        if not self.quiet:
            print(message)

    def output(self, path: str) -> str:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        self.outputs.setdefault(path, os.path.getmtime(path) if os.path.exists(path) else None)
        return path

    def cleanup(self) -> None:
        for path, before in self.outputs.items():
            if os.path.exists(path) and os.path.getmtime(path) != before:
                os.remove(path)
                logger.info(f"removed partial output {path}")

    def echo(self, **configs: BaseModel) -> Dict[str, Any]:
        """Resolved configuration embedded in every artifact."""
        out: Dict[str, Any] = {'command': self.args.command}
        for name, cfg in configs.items():
            out[name] = cfg.model_dump(mode='json')
        return out

    # --- config builders ---------------------------------------------------------

    def generator_config(self) -> GeneratorConfig:
        a = self.args
        return config.resolve(GeneratorConfig, self.section('generator'), {
            'num_l1': a.num_l1, 'num_leaves': a.num_leaves, 'vocab_size': a.vocab_size,
            'num_queries': a.num_queries, 'zipf_exponent': a.zipf_exponent,
            'correlation_strength': a.correlation, 'seed': a.seed,
        })

    def split_config(self) -> SplitConfig:
        a = self.args
        return config.resolve(SplitConfig, self.section('split'), {
            'per_bucket': getattr(a, 'per_bucket', None),
            'valid_fraction': getattr(a, 'valid_fraction', None),
            'min_freq': getattr(a, 'min_freq', None),
            'seed': a.seed,
        })

    def train_config(self) -> TrainConfig:
        a = self.args
        loss_cfg = config.resolve(LossConfig, self.section('loss'), {
            'lambda1': a.lambda1, 'lambda2': a.lambda2, 'cm_mode': a.cm_mode, 'positive_only': a.positive_only,
        })
        return config.resolve(TrainConfig, self.section('train'), {
            'learning_rate': a.lr, 'batch_size': a.batch_size, 'dropout': a.dropout, 'epochs': a.epochs,
            'seed': a.seed, 'threshold': a.threshold, 'ablation': getattr(a, 'ablation', None),
            'loss_cfg': loss_cfg,
        })

    def model_overrides(self) -> Dict[str, Any]:
        a = self.args
        values = dict(self.section('model'))
        flags = {'embed_dim': a.embed_dim, 'max_len': a.max_len, 'conv_layers': a.conv_layers,
                 'num_heads': a.num_heads, 'head_dim': a.head_dim}
        values.update({k: v for k, v in flags.items() if v is not None})
        # sized from the data at train time
        values.pop('vocab_size', None)
        values.pop('num_categories', None)
        return values

    def eval_config(self) -> EvalConfig:
        a = self.args
        return config.resolve(EvalConfig, self.section('eval'), {
            'ks': a.ks, 'threshold': a.threshold, 'minority_m': a.minority_m, 'bucket_k': a.bucket_k,
        })

    def baseline_config(self) -> BaselineConfig:
        a = self.args
        return config.resolve(BaselineConfig, self.section('baseline'), {
            'epochs': getattr(a, 'baseline_epochs', None), 'learning_rate': getattr(a, 'baseline_lr', None),
            'reg': getattr(a, 'baseline_reg', None), 'seed': a.seed,
        })


# --- subcommands -----------------------------------------------------------------

def cmd_gen_data(run: Run) -> None:
    gen_cfg = run.generator_config()
    split_cfg = run.split_config()
    out = run.args.out or config.DATA_DIR
    for path in data_paths(out).values():
        run.output(path)
    run.say(f"🔄 Generating {gen_cfg.num_queries} queries over {gen_cfg.num_leaves} categories (seed {gen_cfg.seed})...")
    summary = generate_data(gen_cfg, split_cfg, out, run.echo(generator=gen_cfg, split=split_cfg))

    run.say(f"\n{RULE}")
    run.say('📊 CORPUS SUMMARY')
    run.say(RULE)
    run.say(f"Queries: {summary['queries']}")
    for bucket, count in summary['buckets'].items():
        run.say(f"  {bucket}: {count}")
    run.say(f"Multi-label queries: {summary['multi_label']}")
    run.say(f"Top-10 category label share: {summary['top10_label_share']:.3f}")
    run.say(f"Categories without queries: {summary['empty_categories']}")
    run.say(f"Split: train {summary['train']}, valid {summary['valid']}, test {summary['test']}")
    run.say(f"📁 Written to: {out}")
    run.say(RULE)


def cmd_train(run: Run) -> None:
    a = run.args
    train_cfg = run.train_config()
    split_cfg = run.split_config()
    overrides = run.model_overrides()
    if a.vectors and not os.path.exists(a.vectors):
        raise ConfigError(f"word vector file not found: {a.vectors}")
    dataset = load_dataset(a.data)

    out = run.output(a.out or os.path.join(a.data, 'model.npz'))
    log_path = run.output(a.log or os.path.splitext(out)[0] + '.log.jsonl')

    run.say(f"🔄 Training {train_cfg.ablation.value} for {train_cfg.epochs} epochs "
            f"on {len(dataset.train)} queries...")
    echo = run.echo(split=split_cfg, train=train_cfg)
    echo['model'] = overrides
    result = train_model(dataset, train_cfg, split_cfg.min_freq, overrides, vectors_path=a.vectors,
                         log_path=log_path, progress=not run.quiet, config_echo=echo)
    checkpoint = result.checkpoint
    save_checkpoint(out, checkpoint.params, checkpoint.meta)

    run.say(f"\n{RULE}")
    run.say('📊 TRAINING SUMMARY')
    run.say(RULE)
    for entry in result.log:
        run.say(f"  epoch {entry['epoch']:>3}: loss {entry['train_loss']:.4f}  "
                f"valid macro-F1 {entry['valid_macro_f1']:.4f}  micro-F1 {entry['valid_micro_f1']:.4f}")
    run.say(f"✅ Best epoch: {checkpoint.meta.best_epoch} (valid micro-F1 {checkpoint.meta.valid_micro_f1:.4f})")
    run.say(f"📁 Checkpoint: {out}")
    run.say(f"📁 Training log: {log_path}")
    run.say(RULE)


def cmd_eval(run: Run) -> None:
    a = run.args
    eval_cfg = run.eval_config()
    dataset = load_dataset(a.data)
    checkpoint = load_checkpoint(a.checkpoint, taxonomy=dataset.taxonomy)
    out = run.output(a.out or os.path.join(a.data, f"report_{a.split}.json"))
    csv_path = run.output(os.path.splitext(out)[0] + '.csv')

    run.say(f"🔄 Evaluating {a.checkpoint} on the {a.split} split...")
    report = evaluate_checkpoint(checkpoint, dataset, eval_cfg, split=a.split, config_echo=run.echo(eval=eval_cfg))
    write_report(report, out)
    print(render_table([{'metric': m, 'value': v} for m, v in report_rows(report)], ['metric', 'value']))
    run.say(f"📁 Report: {out} (+ {csv_path})")


def _read_queries(a: argparse.Namespace) -> List[str]:
    if a.queries:
        lines = a.queries
    elif a.input and a.input != '-':
        with open(a.input, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
    else:
        lines = sys.stdin.read().splitlines()
    return [line.strip() for line in lines if line.strip()]


def cmd_predict(run: Run) -> None:
    a = run.args
    if a.k < 1:
        raise ConfigError('predict: -k must be >= 1')
    taxonomy = read_taxonomy(data_paths(a.data)['taxonomy'])
    checkpoint = load_checkpoint(a.checkpoint, taxonomy=taxonomy)
    queries = _read_queries(a)
    for text, ranked in predict_texts(checkpoint, taxonomy, queries, a.k):
        print(text)
        for rank, (name, score) in enumerate(ranked, 1):
            print(f"  {rank}. {name}\t{score:.4f}")


def cmd_ablate(run: Run) -> None:
    a = run.args
    train_cfg = run.train_config()
    split_cfg = run.split_config()
    eval_cfg = run.eval_config()
    baseline_cfg = None if a.no_baseline else run.baseline_config()
    dataset = load_dataset(a.data)
    out = run.output(a.out or os.path.join(a.data, 'ablation.json'))
    run.output(os.path.splitext(out)[0] + '.csv')

    runner = AblationRunner(dataset, train_cfg, eval_cfg, baseline_cfg, split_cfg.min_freq,
                            lambdas=a.lambdas or LAMBDA_SWEEP, model_overrides=run.model_overrides(),
                            quiet=run.quiet)
    tables = runner.run()
    rows = [{'table': name, **row} for name, section in tables.items() for row in section]
    echo = run.echo(split=split_cfg, train=train_cfg, eval=eval_cfg)
    if baseline_cfg is not None:
        echo['baseline'] = baseline_cfg.model_dump(mode='json')
    write_table(out, rows, echo)

    run.say(f"\n{RULE}")
    run.say('📊 ABLATION SUMMARY')
    run.say(RULE)
    for name, section in tables.items():
        if section:
            print(f"\n[{name}]")
            print(render_table(section, table_columns(section)))
    run.say(f"\n✅ Trained {runner.completed} configurations")
    run.say(f"📁 Table: {out}")
    run.say(RULE)


def cmd_report(run: Run) -> None:
    for path in run.args.paths:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise MetricError(f"report not found: {path}")
        except json.JSONDecodeError as e:
            raise MetricError(f"{path}: not JSON ({e})")
        print(f"== {path}")
        if isinstance(payload, dict) and 'rows' in payload:
            rows = payload['rows']
            print(render_table(rows, table_columns(rows)))
        else:
            report = read_report(path)
            print(render_table([{'metric': m, 'value': v} for m, v in report_rows(report)], ['metric', 'value']))


def cmd_baseline(run: Run) -> None:
    a = run.args
    cfg = run.baseline_config()
    eval_cfg = run.eval_config()
    dataset = load_dataset(a.data)
    out = run.output(a.out or os.path.join(a.data, 'report_baseline.json'))
    run.output(os.path.splitext(out)[0] + '.csv')
    model_path = run.output(a.model_out) if a.model_out else None

    run.say(f"🔄 Training TF-IDF one-vs-rest baseline on {len(dataset.train)} queries...")
    report = run_baseline(dataset, cfg, eval_cfg, model_path=model_path, progress=not run.quiet,
                          config_echo=run.echo(baseline=cfg, eval=eval_cfg))
    write_report(report, out)
    print(render_table([{'metric': m, 'value': v} for m, v in report_rows(report)], ['metric', 'value']))
    if report.flagged_classes:
        run.say(f"⚠️  {len(report.flagged_classes)} categories had no positive training example")
    run.say(f"📁 Report: {out}")


def cmd_gradcheck(run: Run) -> None:
    a = run.args
    run.say('🔄 Running finite-difference gradient checks...')
    report = gradient_check_suite(seed=a.seed or 0, tolerance=a.tolerance)
    print(render_table(report.rows(), ['component', 'max_rel_error', 'status']))
    run.say(f"\n{RULE}")
    run.say(f"✅ Passed: {len(report.errors) - len(report.failures)}")
    run.say(f"❌ Failed: {len(report.failures)}")
    run.say(RULE)
    if not report.passed:
        raise GradientCheckError(f"{len(report.failures)} components above {a.tolerance:g}: "
                                 f"{', '.join(report.failures)}")


# --- parser ----------------------------------------------------------------------

def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None,
                        help='JSON config file (default: $DEEPCAT_CONFIG, else none)')
    common.add_argument('--seed', type=int, default=None, help='seed for every random stream (default: 0)')
    common.add_argument('--log-level', type=str.upper, default=config.LOG_LEVEL,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help=f"logging level (default: {config.LOG_LEVEL})")
    common.add_argument('--quiet', action='store_true', help='no progress bars or status lines (default: off)')
    return common


def _data_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument('--data', default=config.DATA_DIR,
                   help=f"data directory written by gen-data (default: {config.DATA_DIR})")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--embed-dim', type=int, help=_help('word/category embedding size', ModelConfig, 'embed_dim'))
    p.add_argument('--max-len', type=int, help=_help('tokens per query', ModelConfig, 'max_len'))
    p.add_argument('--conv-layers', type=int, help=_help('convolution + highway blocks', ModelConfig, 'conv_layers'))
    p.add_argument('--num-heads', type=int, help=_help('attention heads', ModelConfig, 'num_heads'))
    p.add_argument('--head-dim', type=int, help=_help('size of each attention head', ModelConfig, 'head_dim'))


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--lambda1', type=float, help=_help('co-occurrence loss weight', LossConfig, 'lambda1'))
    p.add_argument('--lambda2', type=float, help=_help('classification loss weight', LossConfig, 'lambda2'))
    p.add_argument('--cm-mode', choices=[m.value for m in CMMode],
                   help=_help('co-occurrence loss form', LossConfig, 'cm_mode'))
    p.add_argument('--positive-only', action='store_true', default=None,
                   help='classification loss with the positive term only (default: off)')
    p.add_argument('--lr', type=float, help=_help('Adam learning rate', TrainConfig, 'learning_rate'))
    p.add_argument('--batch-size', type=int, help=_help('mini-batch size', TrainConfig, 'batch_size'))
    p.add_argument('--dropout', type=float, help=_help('dropout rate', TrainConfig, 'dropout'))
    p.add_argument('--epochs', type=int, help=_help('training epochs', TrainConfig, 'epochs'))
    p.add_argument('--threshold', type=float, help=_help('decision threshold on sigmoid scores', TrainConfig, 'threshold'))
    p.add_argument('--min-freq', type=int, help=_help('minimum token count for the vocabulary', SplitConfig, 'min_freq'))
    _model_flags(p)


def _eval_flags(p: argparse.ArgumentParser, threshold: bool = True) -> None:
    p.add_argument('--ks', type=int, nargs='+', help=f"cutoffs for P/R/F1/MAP@K (default: {EvalConfig().ks})")
    if threshold:
        p.add_argument('--threshold', type=float, help=_help('decision threshold on sigmoid scores', EvalConfig, 'threshold'))
    p.add_argument('--minority-m', type=int, help=_help('least frequent classes in the minority report', EvalConfig, 'minority_m'))
    p.add_argument('--bucket-k', type=int, help=_help('K for per-bucket F1@K', EvalConfig, 'bucket_k'))


def _baseline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--baseline-epochs', type=int, help=_help('baseline epochs', BaselineConfig, 'epochs'))
    p.add_argument('--baseline-lr', type=float, help=_help('baseline step size', BaselineConfig, 'learning_rate'))
    p.add_argument('--baseline-reg', type=float, help=_help('baseline L2 strength', BaselineConfig, 'reg'))


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog='deepcat', description='Query-to-category mapping with joint word-category representations')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help='generate and split a synthetic query corpus')
    p.add_argument('--out', help=f"output directory (default: {config.DATA_DIR})")
    p.add_argument('--num-queries', type=int, help=_help('distinct queries', GeneratorConfig, 'num_queries'))
    p.add_argument('--num-l1', type=int, help=_help('L1 groups', GeneratorConfig, 'num_l1'))
    p.add_argument('--num-leaves', type=int, help=_help('leaf categories', GeneratorConfig, 'num_leaves'))
    p.add_argument('--vocab-size', type=int, help=_help('generated word types', GeneratorConfig, 'vocab_size'))
    p.add_argument('--zipf-exponent', type=float, help=_help('category popularity skew', GeneratorConfig, 'zipf_exponent'))
    p.add_argument('--correlation', type=float,
                   help=_help('chance an extra label is a sibling', GeneratorConfig, 'correlation_strength'))
    p.add_argument('--per-bucket', type=int, help=_help('test queries per traffic bucket', SplitConfig, 'per_bucket'))
    p.add_argument('--valid-fraction', type=float,
                   help=_help('share of the training portion held out', SplitConfig, 'valid_fraction'))
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('train', parents=[common], help='train a model and write a checkpoint')
    _data_flag(p)
    p.add_argument('--out', help='checkpoint path (default: <data>/model.npz)')
    p.add_argument('--log', help='per-epoch JSON-lines log (default: <out>.log.jsonl)')
    p.add_argument('--ablation', choices=[m.value for m in Ablation], help=_help('model variant', TrainConfig, 'ablation'))
    p.add_argument('--vectors', help='pretrained word vectors, text format "token v1 ... vD" (default: none)')
    _train_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='evaluate a checkpoint and write a report')
    _data_flag(p)
    p.add_argument('--checkpoint', required=True, help='checkpoint written by train')
    p.add_argument('--split', choices=['test', 'valid'], default='test', help='split to score (default: test)')
    p.add_argument('--out', help='report path (default: <data>/report_<split>.json)')
    _eval_flags(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('predict', parents=[common], help='print the top-K categories for queries')
    _data_flag(p)
    p.add_argument('--checkpoint', required=True, help='checkpoint written by train')
    p.add_argument('--input', help='file with one query per line, "-" for stdin (default: stdin)')
    p.add_argument('-k', type=int, default=5, help='categories per query (default: 5)')
    p.add_argument('queries', nargs='*', help='queries (default: read from --input)')
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser('ablate', parents=[common], help='train the three variants, the lambda1 sweep and the baseline')
    _data_flag(p)
    p.add_argument('--out', help='table path (default: <data>/ablation.json)')
    p.add_argument('--lambdas', type=float, nargs='+',
                   help=f"lambda1 values to sweep (default: {' '.join(f'{x:g}' for x in LAMBDA_SWEEP)})")
    p.add_argument('--no-baseline', action='store_true', help='skip the TF-IDF baseline row (default: off)')
    _train_flags(p)
    _eval_flags(p, threshold=False)
    _baseline_flags(p)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser('report', parents=[common], help='render JSON reports and tables as plain text')
    p.add_argument('paths', nargs='+', help='report.json or ablation.json files')
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser('baseline', parents=[common], help='train and evaluate the TF-IDF one-vs-rest baseline')
    _data_flag(p)
    p.add_argument('--out', help='report path (default: <data>/report_baseline.json)')
    p.add_argument('--model-out', help='also save the baseline model as JSON (default: not saved)')
    _baseline_flags(p)
    _eval_flags(p)
    p.set_defaults(handler=cmd_baseline)

    p = sub.add_parser('gradcheck', parents=[common], help='finite-difference check of every gradient')
    p.add_argument('--tolerance', type=float, default=TOLERANCE,
                   help=f"maximum relative error (default: {TOLERANCE:g})")
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def _check_conflicts(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    if getattr(args, 'queries', None) and getattr(args, 'input', None):
        parser.error('predict: give queries as arguments or --input, not both')
    ablation = getattr(args, 'ablation', None)
    if ablation is not None and ablation != Ablation.JOINT_PLUS_CM.value and args.lambda1 is not None:
        parser.error(f"--lambda1 has no effect with --ablation {ablation}")
    if getattr(args, 'lambdas', None) and any(x < 0 for x in args.lambdas):
        parser.error('--lambdas must be >= 0')


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_conflicts(parser, args)
    logging.basicConfig(level=args.log_level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    handler: Callable[[Run], None] = args.handler
    current: Optional[Run] = None
    try:
        current = Run(args)
        handler(current)
    except (DeepCatError, OSError) as e:
        if current is not None:
            current.cleanup()
        message = ' '.join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        if current is not None:
            current.cleanup()
        print('error: KeyboardInterrupt: interrupted', file=sys.stderr)
        return 130
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
