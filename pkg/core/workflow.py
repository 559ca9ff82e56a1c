from typing import Annotated, Dict, Any, Optional

try:
    from typing import NotRequired, TypedDict
except ImportError:  # Python < 3.11
    from typing_extensions import NotRequired, TypedDict
import json
import os

from langgraph.graph import StateGraph

try:
    from langgraph.graph import Graph
except ImportError:  # removed in langgraph 1.x; only used as an annotation
    from langgraph.graph.state import CompiledStateGraph as Graph

from core.augmentation import augment_dataset, client_from_settings
from core.corpus import Dataset, Provenance, dedup_reports, exclude_overlap, load_reports_csv, split_random, write_reports_csv
from core.errors import DataError
from core.evaluation import evaluate
from core.model import EncoderAdapter, MultiHeadClassifier, load_checkpoint, predict_texts, save_checkpoint
from core.run_config import RunConfig, write_resolved_config
from core.tools.report_generation import per_condition_report, render_report_text, write_evaluation_json, write_report_csv
from core.tools.synthetic_corpus import generate_synthetic_corpus
from core.training import StrategyKind, TrainRun, TrainStrategy, apply_freeze, train
from utils.logger import attach_run_log, detach_run_log, setup_logger

logger = setup_logger(__name__)

# Data path value that selects the generated corpus instead of a file
SYNTHETIC = 'synthetic'

# Seed offsets keeping the generated expert / automatic / test corpora distinct
_SYNTHETIC_OFFSETS = {'rad': 0, 'auto': 1, 'test': 2}


class WorkflowState(TypedDict, total=False):
    """Shared state of a training run"""

    # === Run setup ===
    config: Annotated[RunConfig, "Resolved run config"]
    run_dir: Annotated[str, "Output directory of the run"]

    # === Data ===
    rad_data: NotRequired[Optional[Dataset]]
    auto_data: NotRequired[Optional[Dataset]]
    test_data: NotRequired[Optional[Dataset]]

    # === Model and training ===
    model: NotRequired[MultiHeadClassifier]
    train_run: NotRequired[TrainRun]

    # === Outputs ===
    test_report: NotRequired[Dict[str, Any]]
    summary: NotRequired[Dict[str, Any]]


def create_workflow_graph() -> Graph:
    """Create workflow graph"""
    workflow = StateGraph(WorkflowState)

    workflow.add_node("load_data", load_data_node)
    workflow.add_node("prepare_data", prepare_data_node)
    workflow.add_node("augment_data", augment_data_node)
    workflow.add_node("build_model", build_model_node)
    workflow.add_node("train_model", train_model_node)
    workflow.add_node("evaluate_test", evaluate_test_node)
    workflow.add_node("write_outputs", write_outputs_node)

    workflow.add_edge("load_data", "prepare_data")
    workflow.add_conditional_edges(
        "prepare_data",
        lambda x: "augment_data" if x["config"].augmentation.enabled and x.get("rad_data") is not None else "build_model",
        {
            "augment_data": "augment_data",
            "build_model": "build_model"
        }
    )
    workflow.add_edge("augment_data", "build_model")
    workflow.add_edge("build_model", "train_model")
    workflow.add_conditional_edges(
        "train_model",
        lambda x: "evaluate_test" if x.get("test_data") is not None else "write_outputs",
        {
            "evaluate_test": "evaluate_test",
            "write_outputs": "write_outputs"
        }
    )
    workflow.add_edge("evaluate_test", "write_outputs")

    workflow.set_entry_point("load_data")
    workflow.set_finish_point("write_outputs")

    return workflow.compile()


def _load_dataset(path: Optional[str], cfg: RunConfig, role: str, provenance: Provenance) -> Optional[Dataset]:
    if not path:
        return None
    if path == SYNTHETIC:
        logger.info(f"Generating synthetic {role} corpus ({cfg.data.synthetic_items} reports)")
        return generate_synthetic_corpus(cfg.data.synthetic_items, cfg.seed + _SYNTHETIC_OFFSETS[role],
                                         provenance, id_prefix=f"syn-{role}")
    return load_reports_csv(path, provenance=provenance, seed=cfg.seed)


# Node function definitions

def load_data_node(state: WorkflowState) -> WorkflowState:
    """Load the expert, automatic and test corpora named by the config"""
    try:
        cfg = state['config']
        cfg.check()
        state['rad_data'] = _load_dataset(cfg.data.rad_data, cfg, 'rad', Provenance.EXPERT)
        state['auto_data'] = _load_dataset(cfg.data.auto_data, cfg, 'auto', Provenance.AUTOMATIC)
        state['test_data'] = _load_dataset(cfg.data.test_data, cfg, 'test', Provenance.EXPERT)
        return state
    except Exception as e:
        logger.error(f"Loading data error: {str(e)}")
        raise


def prepare_data_node(state: WorkflowState) -> WorkflowState:
    """Deduplicate, drop expert reports from the automatic corpus, split train/dev"""
    try:
        cfg = state['config']
        rad, auto = state.get('rad_data'), state.get('auto_data')
        if cfg.data.dedup:
            rad = dedup_reports(rad) if rad is not None else None
            auto = dedup_reports(auto) if auto is not None else None
        if auto is not None and rad is not None and cfg.data.exclude_rad_from_auto:
            auto = exclude_overlap(auto, rad)
        if rad is not None and rad.split is None:
            rad = split_random(rad, cfg.data.rad_train_fraction, cfg.seed)
        if auto is not None and auto.split is None:
            auto = split_random(auto, cfg.data.auto_train_fraction, cfg.seed)
        state['rad_data'] = rad
        state['auto_data'] = auto
        return state
    except Exception as e:
        logger.error(f"Preparing data error: {str(e)}")
        raise


def augment_data_node(state: WorkflowState) -> WorkflowState:
    """Backtranslate the expert train split and train on the doubled pool"""
    try:
        cfg = state['config']
        settings = cfg.augmentation
        client = client_from_settings(settings)
        augmented = augment_dataset(state['rad_data'], client, augment_dev=settings.augment_dev,
                                    parallelism=settings.parallelism, batch_size=settings.batch_size)
        combined = augmented.combined()
        write_reports_csv(combined, os.path.join(state['run_dir'], 'augmented.csv'))
        state['rad_data'] = combined
        return state
    except Exception as e:
        logger.error(f"Augmenting data error: {str(e)}")
        raise


def build_model_node(state: WorkflowState) -> WorkflowState:
    """Build the classifier from the configured encoder, or from a hybrid init checkpoint"""
    try:
        cfg = state['config']
        if cfg.strategy.kind is StrategyKind.HYBRID and cfg.strategy.init_checkpoint:
            model = load_checkpoint(cfg.strategy.init_checkpoint)
        elif cfg.encoder.name == 'tiny':
            texts = []
            for key in ('rad_data', 'auto_data', 'test_data'):
                if state.get(key) is not None:
                    texts.extend(state[key].texts)
            encoder = EncoderAdapter.tiny(texts, seed=cfg.seed, max_tokens=cfg.encoder.max_tokens)
            model = MultiHeadClassifier(encoder, cfg.model.head_input_mode)
        else:
            encoder = EncoderAdapter.from_pretrained(cfg.encoder.name, cfg.encoder.max_tokens)
            model = MultiHeadClassifier(encoder, cfg.model.head_input_mode)
        state['model'] = apply_freeze(model, cfg.model.baseline)
        return state
    except Exception as e:
        logger.error(f"Building model error: {str(e)}")
        raise


def train_model_node(state: WorkflowState) -> WorkflowState:
    """Run the configured strategy and keep the best checkpoint"""
    try:
        cfg = state['config']
        strategy = TrainStrategy(
            kind=cfg.strategy.kind,
            rad_data=state.get('rad_data'),
            auto_data=state.get('auto_data'),
            init_checkpoint=cfg.strategy.init_checkpoint,
            auto_max_epochs=cfg.strategy.auto_max_epochs,
        )
        run = train(state['model'], strategy, cfg.resolved_hyperparams(), run_dir=state['run_dir'])
        save_checkpoint(state['model'], os.path.join(state['run_dir'], 'best'))
        state['train_run'] = run
        return state
    except Exception as e:
        logger.error(f"Training error: {str(e)}")
        raise


def evaluate_test_node(state: WorkflowState) -> WorkflowState:
    """Label the test set with the best checkpoint and score it with bootstrap CIs"""
    try:
        cfg = state['config']
        test = state['test_data']
        if len(test) == 0:
            logger.error("Test set is empty")
            raise DataError("Test set is empty")
        preds = predict_texts(state['model'], test.texts, cfg.hyperparams.batch_size)
        labeled = test.with_items(
            item.model_copy(update={'labels': vec, 'provenance': Provenance.AUTOMATIC})
            for item, vec in zip(test.items, preds)
        )
        write_reports_csv(labeled, os.path.join(state['run_dir'], 'test_predictions.csv'))

        report = evaluate(preds, test.label_vectors, cfg.resolved_eval_config())
        table = per_condition_report(report)
        write_report_csv(table, os.path.join(state['run_dir'], 'per_condition.csv'))
        state['test_report'] = write_evaluation_json(os.path.join(state['run_dir'], 'evaluation.json'),
                                                     report, label=cfg.name)
        logger.info(f"Test set evaluation:\n{render_report_text(table)}")
        return state
    except Exception as e:
        logger.error(f"Test evaluation error: {str(e)}")
        raise


def write_outputs_node(state: WorkflowState) -> WorkflowState:
    """Write the run summary"""
    try:
        run = state['train_run']
        summary = {
            'name': state['config'].name,
            'strategy': state['config'].strategy.kind.value,
            'best_dev_f1': run.best_dev_f1,
            'best_step': run.best_checkpoint.step,
            'evaluations': len(run.history),
            'checkpoint': os.path.join(state['run_dir'], 'best'),
        }
        if run.auto_run is not None:
            summary['auto_best_dev_f1'] = run.auto_run.best_dev_f1
        if state.get('test_report') is not None:
            summary['test_macro_f1'] = state['test_report']['evaluation']['macro_f1']
        with open(os.path.join(state['run_dir'], 'summary.json'), 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2)
        state['summary'] = summary
        logger.info(f"Run summary: {json.dumps(summary)}")
        return state
    except Exception as e:
        logger.error(f"Writing outputs error: {str(e)}")
        raise


def run_training(cfg: RunConfig, run_dir: str) -> WorkflowState:
    """
    Execute a full training run into run_dir

    Returns:
        Final workflow state
    """
    os.makedirs(run_dir, exist_ok=True)
    history = os.path.join(run_dir, 'history.jsonl')
    if os.path.exists(history):
        os.remove(history)
    write_resolved_config(cfg, os.path.join(run_dir, 'config.json'))
    handler = attach_run_log(run_dir)
    try:
        logger.info(f"Starting run '{cfg.name}' in {run_dir}")
        workflow_graph = create_workflow_graph()
        initial_state = WorkflowState(config=cfg, run_dir=run_dir)
        return workflow_graph.invoke(initial_state)
    finally:
        detach_run_log(handler)
