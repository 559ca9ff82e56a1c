#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import os
import tempfile
from functools import lru_cache

import torch

from core.corpus import Dataset, Split, split_random
from core.errors import ConfigError, DataError
from core.evaluation import evaluate
from core.label_schema import Condition, LabelClass
from core.model import (
    EncoderAdapter,
    FreezeMode,
    HeadInputMode,
    HyperParams,
    MultiHeadClassifier,
    encode_texts,
    loss,
    predict_texts,
    save_checkpoint,
)
from core.tools.synthetic_corpus import generate_synthetic_corpus, trigger_word
from core.training import (
    Baseline,
    Checkpoint,
    StrategyKind,
    TrainingEngine,
    TrainStrategy,
    apply_freeze,
    train,
)

# The tiny encoder starts from random weights, so it needs a larger step than 2e-5
TINY_LR = 3e-3


def synthetic_split(n_items: int = 400, seed: int = 0) -> Dataset:
    return split_random(generate_synthetic_corpus(n_items, seed), 0.75, seed)


def tiny_classifier(texts, head_input_mode: HeadInputMode = HeadInputMode.CLS, seed: int = 0) -> MultiHeadClassifier:
    return MultiHeadClassifier(EncoderAdapter.tiny(texts, seed=seed, max_tokens=64), head_input_mode)


def snapshot(model: MultiHeadClassifier) -> dict:
    return {name: tensor.detach().clone() for name, tensor in model.state_dict().items()}


def same_weights(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[name], b[name]) for name in a)


@lru_cache(maxsize=None)
def rad_smoke_run():
    ds = synthetic_split()
    model = tiny_classifier(ds.texts)
    hp = HyperParams(learning_rate=TINY_LR, batch_size=18, max_epochs=20, eval_every=500, seed=0, patience=None)
    tmp = tempfile.mkdtemp()
    run = train(model, TrainStrategy(kind=StrategyKind.RAD, rad_data=ds), hp, run_dir=tmp)
    return ds, model, run, tmp


def test_synthetic_corpus():
    ds = generate_synthetic_corpus(50, seed=3)
    assert ds == generate_synthetic_corpus(50, seed=3)
    assert len(ds) == 50 and ds.split is None
    for item in ds.items:
        words = item.report.text.split()
        for condition in Condition:
            label = item.labels[condition]
            if label is not LabelClass.BLANK:
                assert trigger_word(condition, label) in words
        no_finding = item.labels[Condition.NO_FINDING] is LabelClass.POSITIVE
        others_blank = all(item.labels[c] is LabelClass.BLANK for c in Condition if c is not Condition.NO_FINDING)
        assert no_finding == others_blank


def test_rad_smoke_run():
    ds, model, run, run_dir = rad_smoke_run()
    assert run.best_dev_f1 >= 0.9, run.best_dev_f1
    assert run.auto_run is None
    # eval_every exceeds an epoch, so there is exactly one evaluation per epoch
    assert len(run.history) == 20
    assert [record.epoch for record in run.history] == list(range(1, 21))
    assert run.history[-1].loss < run.history[0].loss

    train_part = ds.subset(Split.TRAIN)
    report = evaluate(predict_texts(model, train_part.texts), train_part.label_vectors, with_ci=False)
    assert report.macro_f1 >= 0.95, report.macro_f1

    with open(os.path.join(run_dir, 'history.jsonl'), encoding='utf-8') as f:
        assert len(f.readlines()) == 20
    assert os.path.exists(os.path.join(run_dir, 'checkpoints', 'rad-best', 'manifest.json'))


def test_best_checkpoint_is_loaded():
    ds, model, run, _ = rad_smoke_run()
    assert same_weights(snapshot(model), run.best_checkpoint.state)
    assert run.best_dev_f1 == max(record.dev_f1_macro for record in run.history)


def test_loss_decreases_on_fixed_batch():
    ds = synthetic_split(60)
    model = tiny_classifier(ds.texts)
    batch = encode_texts(model, ds.texts[:8])
    gold = ds.label_vectors[:8]
    optimizer = torch.optim.Adam(model.parameters(), lr=2e-5)
    values = []
    for _ in range(6):
        optimizer.zero_grad()
        value = loss(model, batch, gold)
        value.backward()
        optimizer.step()
        values.append(value.item())
    assert all(later < earlier for earlier, later in zip(values, values[1:])), values


def test_hybrid_rad_phase_starts_from_auto_best():
    rad = synthetic_split(80, seed=1)
    auto = synthetic_split(120, seed=2)
    model = tiny_classifier(rad.texts + auto.texts)
    hp = HyperParams(learning_rate=TINY_LR, batch_size=18, max_epochs=2, eval_every=3, seed=0, patience=None)
    starts = {}
    strategy = TrainStrategy(kind=StrategyKind.HYBRID, rad_data=rad, auto_data=auto, auto_max_epochs=2)
    run = train(model, strategy, hp, on_phase_start=lambda phase, m: starts.setdefault(phase, snapshot(m)))

    assert list(starts) == ['auto', 'rad']
    assert run.auto_run is not None
    assert all(record.phase == 'auto' for record in run.auto_run.history)
    assert all(record.phase == 'rad' for record in run.history)
    assert same_weights(starts['rad'], run.auto_run.best_checkpoint.state)


def test_hybrid_with_init_checkpoint_skips_auto():
    rad = synthetic_split(80, seed=1)
    source = tiny_classifier(rad.texts, seed=5)
    hp = HyperParams(learning_rate=TINY_LR, batch_size=18, max_epochs=1, eval_every=500, seed=0, patience=None)

    in_memory = Checkpoint(state=snapshot(source), phase='auto', step=0, dev_f1=0.0)
    model = tiny_classifier(rad.texts, seed=6)
    starts = {}
    run = train(model, TrainStrategy(kind=StrategyKind.HYBRID, rad_data=rad, init_checkpoint=in_memory), hp,
                on_phase_start=lambda phase, m: starts.setdefault(phase, snapshot(m)))
    assert run.auto_run is None and list(starts) == ['rad']
    assert same_weights(starts['rad'], in_memory.state)

    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(source, os.path.join(tmp, 'auto-best'))
        model = tiny_classifier(rad.texts, seed=7)
        starts = {}
        train(model, TrainStrategy(kind=StrategyKind.HYBRID, rad_data=rad, init_checkpoint=path), hp,
              on_phase_start=lambda phase, m: starts.setdefault(phase, snapshot(m)))
        assert same_weights(starts['rad'], in_memory.state)


def test_frozen_baselines():
    ds = synthetic_split(80, seed=3)
    hp = HyperParams(learning_rate=TINY_LR, batch_size=18, max_epochs=2, eval_every=500, seed=0, patience=None)
    for baseline, mode in ((Baseline.T_CLS, HeadInputMode.CLS), (Baseline.T_TOKEN, HeadInputMode.TOKEN_AVERAGE)):
        model = apply_freeze(tiny_classifier(ds.texts), baseline)
        assert model.freeze_mode is FreezeMode.ENCODER_FROZEN
        assert model.head_input_mode is mode
        encoder_before = snapshot(model.encoder)
        heads_before = snapshot(model.heads)
        train(model, TrainStrategy(kind=StrategyKind.RAD, rad_data=ds), hp)
        assert same_weights(snapshot(model.encoder), encoder_before)
        assert not same_weights(snapshot(model.heads), heads_before)

    full = apply_freeze(tiny_classifier(ds.texts), Baseline.FULL)
    assert full.freeze_mode is FreezeMode.NONE
    assert all(param.requires_grad for param in full.parameters())


def test_frozen_heads_train_at_default_rate():
    assert HyperParams().learning_rate == 2e-5
    ds = synthetic_split(60, seed=6)
    model = apply_freeze(tiny_classifier(ds.texts), Baseline.T_CLS)
    encoder_before = snapshot(model.encoder)
    hp = HyperParams(batch_size=8, max_epochs=8, eval_every=500, seed=0, patience=None)
    run = train(model, TrainStrategy(kind=StrategyKind.RAD, rad_data=ds), hp)
    assert len(run.history) == 8
    assert run.history[-1].loss < run.history[0].loss, [r.loss for r in run.history]
    assert same_weights(snapshot(model.encoder), encoder_before)


def test_training_is_reproducible():
    ds = synthetic_split(60, seed=4)
    hp = HyperParams(learning_rate=TINY_LR, batch_size=18, max_epochs=2, eval_every=500, seed=11, patience=None)
    runs = []
    for _ in range(2):
        model = tiny_classifier(ds.texts)
        run = train(model, TrainStrategy(kind=StrategyKind.RAD, rad_data=ds), hp)
        runs.append((run, snapshot(model)))
    (first, first_weights), (second, second_weights) = runs
    assert [r.loss for r in first.history] == [r.loss for r in second.history]
    assert first.best_dev_f1 == second.best_dev_f1
    assert same_weights(first_weights, second_weights)


def test_early_stopping():
    ds = synthetic_split(60, seed=5)
    model = tiny_classifier(ds.texts)
    # A vanishing step size never improves on the first evaluation
    hp = HyperParams(learning_rate=1e-12, batch_size=18, max_epochs=20, eval_every=1, seed=0, patience=2)
    run = train(model, TrainStrategy(kind=StrategyKind.RAD, rad_data=ds), hp)
    assert len(run.history) == 3
    assert run.best_checkpoint.step == 1


def test_strategy_errors():
    ds = synthetic_split(20)
    bad = [
        TrainStrategy(kind=StrategyKind.RAD),
        TrainStrategy(kind=StrategyKind.AUTO, rad_data=ds),
        TrainStrategy(kind=StrategyKind.HYBRID, rad_data=ds),
        TrainStrategy(kind=StrategyKind.RAD, rad_data=ds, init_checkpoint='somewhere'),
    ]
    model = tiny_classifier(ds.texts)
    for strategy in bad:
        try:
            train(model, strategy, HyperParams())
            assert False, "expected ConfigError"
        except ConfigError:
            pass


def test_set_data_errors():
    ds = synthetic_split(20)
    engine = TrainingEngine(tiny_classifier(ds.texts), HyperParams())
    no_split = generate_synthetic_corpus(20)
    all_train = Dataset(items=ds.items, split={report_id: Split.TRAIN for report_id in ds.ids})
    for bad in (Dataset(), no_split, all_train):
        try:
            engine.set_data(bad)
            assert False, "expected DataError"
        except DataError:
            pass
    try:
        engine.run('rad', 1, None)
        assert False, "expected DataError"
    except DataError:
        pass


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith('test_') and callable(fn):
            fn()
            print(f"{name}: ok")
