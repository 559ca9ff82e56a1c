import argparse
import json
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv
# Load environment variables
load_dotenv()

from core.augmentation import augment_dataset, client_from_settings
from core.corpus import (
    Dataset,
    Provenance,
    class_prevalence,
    dedup_reports,
    exclude_overlap,
    load_reports_csv,
    split_random,
    write_reports_csv,
)
from core.errors import AlignmentError, DataError, ReportLabelerError
from core.evaluation import compare_models, evaluate
from core.model import load_checkpoint, predict_texts
from core.run_config import RunConfig, load_run_config
from core.tools.report_generation import (
    per_condition_report,
    render_report_text,
    write_evaluation_json,
    write_report_csv,
)
from core.tools.synthetic_corpus import generate_synthetic_corpus
from core.workflow import run_training
from utils.logger import setup_logger

logger = setup_logger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Run config JSON file')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Config override, e.g. hyperparams.learning_rate=3e-5 (repeatable)')
    common.add_argument('--preset', help='Named experiment preset applied before --set overrides')
    common.add_argument('--seed', type=int, help='Seed for splitting, training and bootstrap')
    common.add_argument('--out', help='Output path (run directory, CSV file or output directory)')

    parser = argparse.ArgumentParser(description='Radiology report labeler')
    commands = parser.add_subparsers(dest='command', required=True)

    commands.add_parser('train', parents=[common], help='Train a labeler')

    label = commands.add_parser('label', parents=[common], help='Label reports with a checkpoint')
    label.add_argument('--checkpoint', required=True)
    label.add_argument('--data', required=True, help='Report CSV')

    evaluate_cmd = commands.add_parser('evaluate', parents=[common], help='Score labels against gold labels')
    evaluate_cmd.add_argument('--preds', required=True)
    evaluate_cmd.add_argument('--gold', required=True)

    compare = commands.add_parser('compare', parents=[common], help='Paired bootstrap comparison of two labelers')
    compare.add_argument('--preds-a', required=True)
    compare.add_argument('--preds-b', required=True)
    compare.add_argument('--gold', required=True)

    augment = commands.add_parser('augment', parents=[common], help='Backtranslation augmentation')
    augment.add_argument('--data', required=True)
    augment.add_argument('--augment-dev', action='store_true', help='Also augment dev-split reports')

    prevalence = commands.add_parser('prevalence', parents=[common], help='Class prevalence table')
    prevalence.add_argument('--data', required=True)

    prepare = commands.add_parser('prepare', parents=[common], help='Deduplicate and split a labeled CSV')
    prepare.add_argument('--data', required=True)
    prepare.add_argument('--exclude', help='CSV whose report texts are removed from --data')
    prepare.add_argument('--fraction', type=float, help='Train fraction (default data.rad_train_fraction)')

    synthesize = commands.add_parser('synthesize', parents=[common], help='Write the synthetic corpus')
    synthesize.add_argument('--n', type=int, default=400)
    synthesize.add_argument('--provenance', default=Provenance.EXPERT.value,
                            choices=[p.value for p in Provenance])
    return parser


def _config(args) -> RunConfig:
    return load_run_config(args.config, args.overrides, args.preset, args.seed)


def _require_out(args, default: str) -> str:
    return args.out or default


def _aligned(*datasets: Dataset) -> None:
    reference = datasets[0].ids
    for ds in datasets[1:]:
        if ds.ids != reference:
            raise AlignmentError("Label files do not cover the same reports in the same order")


def _gold(path: str) -> Dataset:
    ds = load_reports_csv(path)
    if not ds.labeled:
        raise DataError(f"{path} has no label columns")
    return ds


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg.check()
    run_dir = args.out or os.path.join(cfg.output_dir, cfg.name)
    state = run_training(cfg, run_dir)
    print(json.dumps(state['summary'], indent=2))
    return 0


def cmd_label(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    ds = load_reports_csv(args.data)
    preds = predict_texts(model, ds.texts, cfg.hyperparams.batch_size) if len(ds) else []
    items = tuple(
        item.model_copy(update={'labels': vec, 'provenance': Provenance.AUTOMATIC})
        for item, vec in zip(ds.items, preds)
    )
    labeled = Dataset(items=items, split=ds.split, seed=ds.seed, labeled=True, flagged=ds.flagged)
    write_reports_csv(labeled, _require_out(args, 'labeled.csv'))
    return 0


def _write_evaluation(out_dir: str, report, comparison=None, label: str = '') -> None:
    os.makedirs(out_dir, exist_ok=True)
    table = per_condition_report(report, comparison)
    write_report_csv(table, os.path.join(out_dir, 'per_condition.csv'))
    name = 'comparison.json' if comparison is not None else 'evaluation.json'
    write_evaluation_json(os.path.join(out_dir, name), report, comparison, label=label)
    print(render_report_text(table))


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    preds, gold = _gold(args.preds), _gold(args.gold)
    _aligned(preds, gold)
    report = evaluate(preds.label_vectors, gold.label_vectors, cfg.resolved_eval_config())
    _write_evaluation(_require_out(args, 'evaluation'), report, label=os.path.basename(args.preds))
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    preds_a, preds_b, gold = _gold(args.preds_a), _gold(args.preds_b), _gold(args.gold)
    _aligned(preds_a, preds_b, gold)
    eval_cfg = cfg.resolved_eval_config()
    report = evaluate(preds_a.label_vectors, gold.label_vectors, eval_cfg)
    comparison = compare_models(preds_a.label_vectors, preds_b.label_vectors, gold.label_vectors, eval_cfg)
    _write_evaluation(_require_out(args, 'comparison'), report, comparison, label=os.path.basename(args.preds_a))
    return 0


def cmd_augment(args) -> int:
    cfg = _config(args)
    settings = cfg.augmentation
    client = client_from_settings(settings)
    ds = load_reports_csv(args.data, seed=cfg.seed)
    augmented = augment_dataset(ds, client, augment_dev=args.augment_dev or settings.augment_dev,
                                parallelism=settings.parallelism, batch_size=settings.batch_size)
    write_reports_csv(augmented.combined(), _require_out(args, 'augmented.csv'))
    return 0


def cmd_prevalence(args) -> int:
    ds = _gold(args.data)
    table = class_prevalence(ds)
    if args.out:
        table.to_csv(args.out, index=False, encoding='utf-8')
        logger.info(f"Prevalence table written to {args.out}")
    print(table.to_string(index=False))
    return 0


def cmd_prepare(args) -> int:
    cfg = _config(args)
    ds = dedup_reports(_gold(args.data))
    if args.exclude:
        ds = exclude_overlap(ds, load_reports_csv(args.exclude))
    fraction = args.fraction if args.fraction is not None else cfg.data.rad_train_fraction
    ds = split_random(ds, fraction, cfg.seed)
    write_reports_csv(ds, _require_out(args, 'prepared.csv'))
    return 0


def cmd_synthesize(args) -> int:
    cfg = _config(args)
    ds = generate_synthetic_corpus(args.n, cfg.seed, Provenance(args.provenance))
    write_reports_csv(ds, _require_out(args, 'synthetic.csv'))
    return 0


HANDLERS = {
    'train': cmd_train,
    'label': cmd_label,
    'evaluate': cmd_evaluate,
    'compare': cmd_compare,
    'augment': cmd_augment,
    'prevalence': cmd_prevalence,
    'prepare': cmd_prepare,
    'synthesize': cmd_synthesize,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one command

    Returns:
        0 on success, 1 on a user, data or config error, 2 on an internal error
    """
    args = build_parser().parse_args(argv)
    try:
        logger.info(f"Running command '{args.command}'")
        return HANDLERS[args.command](args)
    except ReportLabelerError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception(f"Internal error in {args.command}: {str(e)}")
        return 2


if __name__ == '__main__':
    sys.exit(main())
