#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import logging
import os
import tempfile
import threading
from typing import List

import torch

from core.augmentation import AUGMENTED_SUFFIX, augment_dataset, augmented_id, backtranslate
from core.corpus import Dataset, Provenance, Split, load_reports_csv, split_random, write_reports_csv
from core.errors import ConfigError, TranslationError
from core.model import EncoderAdapter, HeadInputMode, HyperParams, MultiHeadClassifier
from core.tools.synthetic_corpus import generate_synthetic_corpus
from core.tools.translation import (
    BatchFileTranslationClient,
    DictionaryTranslationClient,
    HttpTranslationClient,
    IdentityTranslationClient,
    TranslationClient,
    create_client,
    write_batch_input,
)
from core.training import StrategyKind, TrainStrategy, train


class FlakyTranslationClient(TranslationClient):
    """Fails on every text containing a marker word"""
    implementation = 'flaky_stub'

    def __init__(self, marker: str):
        super().__init__()
        self.marker = marker

    def backtranslate_batch(self, texts: List[str]) -> List[str]:
        if any(self.marker in text for text in texts):
            raise TranslationError("service unavailable")
        return [text.upper() for text in texts]


class RecordingHandler(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())


def test_identity_doubles_train_pool():
    ds = split_random(generate_synthetic_corpus(40, seed=1), 0.75, seed=1)
    result = augment_dataset(ds, IdentityTranslationClient(), batch_size=7)
    train_ids = ds.subset(Split.TRAIN).ids
    assert len(result.augmented) == len(train_ids) == 30
    assert result.augmented.ids == [augmented_id(report_id) for report_id in train_ids]
    assert result.failed == ()

    base = {item.report_id: item for item in ds.items}
    for item in result.augmented.items:
        source = base[result.pairing[item.report_id]]
        assert item.report.text == source.report.text
        assert item.labels == source.labels
        assert item.provenance is Provenance.BACKTRANSLATED

    combined = result.combined()
    assert len(combined) == 70
    assert len(combined.subset(Split.TRAIN)) == 60
    assert combined.subset(Split.DEV).ids == ds.subset(Split.DEV).ids
    # base untouched
    assert result.base == ds


def test_augment_without_split_and_dev():
    ds = generate_synthetic_corpus(12, seed=2)
    assert len(augment_dataset(ds, IdentityTranslationClient()).combined()) == 24

    split = split_random(ds, 0.75, seed=2)
    assert len(augment_dataset(split, IdentityTranslationClient(), augment_dev=True).augmented) == 12

    empty = augment_dataset(Dataset(), IdentityTranslationClient())
    assert len(empty.combined()) == 0 and empty.pairing == {}


def test_reaugmenting_augmented_csv():
    ds = split_random(generate_synthetic_corpus(20, seed=5), 0.75, seed=5)
    once = augment_dataset(ds, IdentityTranslationClient()).combined()
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'augmented.csv')
        write_reports_csv(once, path)
        reloaded = load_reports_csv(path)
    assert reloaded.ids == once.ids

    again = augment_dataset(reloaded, IdentityTranslationClient())
    assert len(again.augmented) == 0
    assert again.combined().ids == once.ids

    # a base report added later still gets its copy
    extra = generate_synthetic_corpus(1, seed=6).items[0]
    extra = extra.model_copy(update={'report': extra.report.model_copy(update={'report_id': 'late-1'})})
    grown = Dataset(items=reloaded.items + (extra,), seed=reloaded.seed)
    result = augment_dataset(grown, IdentityTranslationClient())
    assert result.augmented.ids == [augmented_id('late-1')]
    assert len(result.combined()) == len(once) + 2


def test_dictionary_stub():
    client = DictionaryTranslationClient({'pleural effusion': 'fluid in the pleural space', 'mild': 'slight'})
    outputs = client.backtranslate_batch(['Mild pleural effusion.', 'no mildness here'])
    assert outputs == ['slight fluid in the pleural space.', 'no mildness here']

    ds = Dataset(items=generate_synthetic_corpus(3, seed=0).items)
    result = augment_dataset(ds, DictionaryTranslationClient({'chest': 'thorax'}))
    for base, copy in zip(ds.items, result.augmented.items):
        assert copy.report.text == base.report.text.replace('chest', 'thorax')


def test_translation_failure_keeps_pool_size():
    ds = generate_synthetic_corpus(20, seed=3)
    marker = ds.items[4].report.text.split()[0]
    result = augment_dataset(ds, FlakyTranslationClient(marker), batch_size=4, parallelism=2)
    assert len(result.combined()) == 40
    failed_bases = {result.pairing[report_id] for report_id in result.failed}
    assert ds.items[4].report_id in failed_bases
    assert set(result.combined().flagged) >= set(result.failed)
    for item in result.augmented.items:
        source = next(base for base in ds.items if base.report_id == result.pairing[item.report_id])
        if item.report_id in result.failed:
            assert item.report.text == source.report.text
        else:
            assert item.report.text == source.report.text.upper()


def test_backtranslate_single():
    assert backtranslate(IdentityTranslationClient(), 'no  edema') == 'no edema'
    try:
        backtranslate(DictionaryTranslationClient({'edema': ' '}), 'edema')
        assert False, "expected TranslationError"
    except TranslationError:
        pass


def test_unreliable_pivot_warns():
    handler = RecordingHandler()
    logger = logging.getLogger('core.tools.translation')
    logger.addHandler(handler)
    try:
        IdentityTranslationClient(pivot_language='ru')
        IdentityTranslationClient(pivot_language='de')
    finally:
        logger.removeHandler(handler)
    assert len(handler.messages) == 1 and "'ru'" in handler.messages[0]


def test_batch_file_client():
    with tempfile.TemporaryDirectory() as tmp:
        inputs, outputs = os.path.join(tmp, 'in.txt'), os.path.join(tmp, 'out.txt')
        write_batch_input(['no edema', 'small effusion'], inputs)
        with open(outputs, 'w', encoding='utf-8') as f:
            f.write('no oedema\nminor effusion\n')
        client = create_client('batch_file', input_path=inputs, output_path=outputs)
        assert isinstance(client, BatchFileTranslationClient)
        assert client.backtranslate_batch(['small effusion', 'no edema']) == ['minor effusion', 'no oedema']
        try:
            client.backtranslate_batch(['unknown text'])
            assert False, "expected TranslationError"
        except TranslationError:
            pass


def test_http_client_session_per_thread():
    client = HttpTranslationClient(endpoint='http://localhost:9/backtranslate')
    assert client.session is client.session
    sessions = []
    workers = [threading.Thread(target=lambda: sessions.append(client.session)) for _ in range(3)]
    for worker in workers:
        worker.start()
    for worker in workers:
        worker.join()
    assert len({id(session) for session in sessions + [client.session]}) == 4


def test_create_client_errors():
    for kwargs in ({'implementation': 'nope'}, {'implementation': 'batch_file'},
                   {'implementation': 'identity_stub', 'beam_size': 0}):
        try:
            create_client(**kwargs)
            assert False, "expected ConfigError"
        except ConfigError:
            pass


def test_training_on_augmented_equals_duplicated_pool():
    ds = split_random(generate_synthetic_corpus(40, seed=4), 0.75, seed=4)
    augmented = augment_dataset(ds, IdentityTranslationClient()).combined()

    copies = [item.model_copy(update={'report': item.report.model_copy(
        update={'report_id': item.report_id + AUGMENTED_SUFFIX})})
        for item in ds.items if ds.split[item.report_id] == Split.TRAIN]
    split = dict(ds.split)
    split.update({item.report_id: Split.TRAIN for item in copies})
    duplicated = Dataset(items=ds.items + tuple(copies), split=split, seed=ds.seed)

    hp = HyperParams(learning_rate=3e-3, batch_size=8, max_epochs=2, eval_every=500, seed=0, patience=None)
    weights = []
    for pool in (augmented, duplicated):
        model = MultiHeadClassifier(EncoderAdapter.tiny(ds.texts, seed=0, max_tokens=64), HeadInputMode.CLS)
        run = train(model, TrainStrategy(kind=StrategyKind.RAD, rad_data=pool), hp)
        weights.append((run, model.state_dict()))
    (run_a, state_a), (run_b, state_b) = weights
    assert [r.loss for r in run_a.history] == [r.loss for r in run_b.history]
    assert all(torch.equal(state_a[name], state_b[name]) for name in state_a)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith('test_') and callable(fn):
            fn()
            print(f"{name}: ok")
