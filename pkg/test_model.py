#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import json
import math
import os
import tempfile

import torch

from core.errors import ManifestError, ShapeError
from core.label_schema import CONDITIONS, Condition, LabelClass, LabelVector
from core.model import (
    EncoderAdapter,
    FreezeMode,
    HeadInputMode,
    MultiHeadClassifier,
    collate,
    compute_loss,
    decode_logits,
    encode_texts,
    forward,
    load_checkpoint,
    loss,
    predict,
    restore_checkpoint,
    save_checkpoint,
    tokenize_and_truncate,
)

TEXTS = [
    'no pleural effusion or pneumothorax',
    'mild cardiomegaly with possible edema',
    'support devices in place . no acute process',
    'left rib fracture cannot be excluded',
]


def tiny_model(head_input_mode: HeadInputMode = HeadInputMode.CLS, max_tokens: int = 512, **overrides) -> MultiHeadClassifier:
    encoder = EncoderAdapter.tiny(TEXTS, seed=0, max_tokens=max_tokens, **overrides)
    return MultiHeadClassifier(encoder, head_input_mode)


def test_tokenize_and_truncate():
    model = tiny_model()
    encoder = model.encoder
    ten_words = 'one two three four five six seven eight nine ten'
    tokens = tokenize_and_truncate(encoder, ten_words)
    assert len(tokens) == 12
    assert tokens[0] == encoder.tokenizer.cls_token_id and tokens[-1] == encoder.tokenizer.sep_token_id

    long_text = ' '.join(['effusion'] * 1000 + ['edema'] * 1000)
    truncated = tokenize_and_truncate(encoder, long_text)
    assert len(truncated) == encoder.max_tokens
    assert truncated[0] == encoder.tokenizer.cls_token_id
    full = encoder.tokenizer(long_text)['input_ids']
    assert len(full) == 2002
    assert truncated[:encoder.max_tokens - 1] == full[:encoder.max_tokens - 1]


def test_forward_shapes():
    model = tiny_model()
    logits = forward(model, encode_texts(model, TEXTS[:1]))
    assert len(logits) == 14
    assert [block.shape[1] for block in logits] == [condition.num_classes for condition in CONDITIONS]
    assert logits[Condition.NO_FINDING.index].shape == (1, 2)
    assert sum(1 for block in logits if block.shape == (1, 4)) == 13


def test_duplicated_inputs_identical_rows():
    model = tiny_model()
    model.eval()
    # Padded batch: CPU matmul may round duplicate rows differently in the last bit
    padded = encode_texts(model, [TEXTS[1], TEXTS[1], TEXTS[0]])
    with torch.no_grad():
        logits = forward(model, padded)
    for block in logits:
        assert torch.allclose(block[0], block[1], atol=1e-6)
    labels = predict(model, padded)
    assert labels[0] == labels[1]

    with torch.no_grad():
        logits = forward(model, encode_texts(model, [TEXTS[1], TEXTS[1]]))
    for block in logits:
        assert torch.equal(block[0], block[1])


def test_token_average_without_padding():
    model = tiny_model(HeadInputMode.TOKEN_AVERAGE)
    model.eval()
    batch = encode_texts(model, [TEXTS[0], TEXTS[0]])
    assert bool(batch['attention_mask'].all())
    with torch.no_grad():
        hidden = model.encoder(batch['input_ids'], batch['attention_mask'])
        pooled = model.pool(hidden, batch['attention_mask'])
    assert torch.allclose(pooled, hidden.mean(dim=1), atol=1e-6)


def test_malformed_batch():
    model = tiny_model(max_tokens=16)
    bad_batches = [
        {'input_ids': torch.zeros((2, 5), dtype=torch.long)},
        {'input_ids': torch.zeros((2, 5), dtype=torch.long), 'attention_mask': torch.ones((2, 4), dtype=torch.long)},
        {'input_ids': torch.zeros((5,), dtype=torch.long), 'attention_mask': torch.ones((5,), dtype=torch.long)},
        {'input_ids': torch.zeros((1, 17), dtype=torch.long), 'attention_mask': torch.ones((1, 17), dtype=torch.long)},
    ]
    for batch in bad_batches:
        try:
            forward(model, batch)
            assert False, "expected ShapeError"
        except ShapeError:
            pass


def _logits(rows):
    """rows: 14 lists of per-head logits for a single item"""
    return [torch.tensor([row], dtype=torch.float32) for row in rows]


def test_decode_logits():
    rows = [[9.0, 0.0, 0.0, 0.0]] * 14
    rows[Condition.NO_FINDING.index] = [9.0, 0.0]
    assert decode_logits(_logits(rows)) == [LabelVector.blank()]

    rows[Condition.NO_FINDING.index] = [0.0, 5.0]
    assert decode_logits(_logits(rows))[0][Condition.NO_FINDING] is LabelClass.POSITIVE

    tied = [[1.0, 1.0, 0.0, 0.0]] * 14
    tied[Condition.NO_FINDING.index] = [1.0, 1.0]
    assert decode_logits(_logits(tied)) == [LabelVector.blank()]


def test_predict_shift_invariance():
    generator = torch.Generator().manual_seed(0)
    logits = [torch.randn((6, condition.num_classes), generator=generator) for condition in CONDITIONS]
    shifted = [block + float(idx * 3 - 7) for idx, block in enumerate(logits)]
    assert decode_logits(logits) == decode_logits(shifted)


def test_predict_outputs_valid_vectors():
    model = tiny_model()
    preds = predict(model, encode_texts(model, TEXTS))
    assert len(preds) == len(TEXTS)
    assert all(pred[Condition.NO_FINDING] in (LabelClass.BLANK, LabelClass.POSITIVE) for pred in preds)


def test_loss_closed_forms():
    targets = torch.tensor([[1] * 8 + [0] + [2] * 5, [0] * 14], dtype=torch.long)
    uniform = [torch.zeros((2, condition.num_classes)) for condition in CONDITIONS]
    expected = 13 * math.log(4) + math.log(2)
    assert abs(compute_loss(uniform, targets).item() - expected) < 1e-5

    shifted = [block + (5.0 if idx == 3 else 0.0) for idx, block in enumerate(uniform)]
    assert abs(compute_loss(shifted, targets).item() - expected) < 1e-5

    confident = []
    for idx, condition in enumerate(CONDITIONS):
        block = torch.zeros((2, condition.num_classes))
        block[torch.arange(2), targets[:, idx]] = 50.0
        confident.append(block)
    value = compute_loss(confident, targets).item()
    assert 0.0 <= value < 1e-6


def test_loss_on_model():
    model = tiny_model()
    gold = [LabelVector.blank().replace(Condition.EDEMA, LabelClass.UNCERTAIN), LabelVector.blank()]
    value = loss(model, encode_texts(model, TEXTS[:2]), gold)
    assert value.dim() == 0 and math.isfinite(value.item()) and value.item() >= 0
    try:
        loss(model, encode_texts(model, TEXTS[:3]), gold)
        assert False, "expected ShapeError"
    except ShapeError:
        pass


def test_head_parameter_count():
    model = tiny_model(hidden_size=768, num_attention_heads=2)
    assert model.head_parameter_count() == 13 * (4 * 768 + 4) + (2 * 768 + 2)
    assert model.head_parameter_count() == 41526


def test_head_gradient_finite_differences():
    model = tiny_model().double()
    model.set_freeze_mode(FreezeMode.ENCODER_FROZEN)
    model.eval()
    batch = encode_texts(model, TEXTS[:2])
    gold = [LabelVector.blank().replace(Condition.EDEMA, LabelClass.POSITIVE),
            LabelVector.blank().replace(Condition.NO_FINDING, LabelClass.POSITIVE)]

    value = loss(model, batch, gold)
    value.backward()
    eps = 1e-6
    analytic, numeric = [], []
    for head_idx in (0, Condition.EDEMA.index, Condition.NO_FINDING.index):
        weight = model.heads[head_idx].weight
        for row in range(weight.shape[0]):
            for col in (0, 7, 31):
                analytic.append(weight.grad[row, col].item())
                with torch.no_grad():
                    original = weight[row, col].item()
                    weight[row, col] = original + eps
                    plus = loss(model, batch, gold).item()
                    weight[row, col] = original - eps
                    minus = loss(model, batch, gold).item()
                    weight[row, col] = original
                numeric.append((plus - minus) / (2 * eps))
    analytic, numeric = torch.tensor(analytic), torch.tensor(numeric)
    relative = (analytic - numeric).norm() / analytic.norm()
    assert relative.item() < 1e-4, relative.item()


def test_frozen_encoder_step():
    model = tiny_model()
    model.set_freeze_mode(FreezeMode.ENCODER_FROZEN)
    encoder_before = {name: p.detach().clone() for name, p in model.encoder.named_parameters()}
    heads_before = {name: p.detach().clone() for name, p in model.heads.named_parameters()}

    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-2)
    gold = [LabelVector.blank().replace(Condition.EDEMA, LabelClass.NEGATIVE)] * 2
    optimizer.zero_grad()
    loss(model, encode_texts(model, TEXTS[:2]), gold).backward()
    optimizer.step()

    for name, param in model.encoder.named_parameters():
        assert torch.equal(param, encoder_before[name]), name
    assert any(not torch.equal(param, heads_before[name]) for name, param in model.heads.named_parameters())


def test_checkpoint_round_trip():
    model = tiny_model(HeadInputMode.TOKEN_AVERAGE, max_tokens=64)
    model.eval()
    batch = encode_texts(model, TEXTS)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(model, os.path.join(tmp, 'ckpt'))
        restored = load_checkpoint(path)
        restored.eval()
        assert restored.head_input_mode is HeadInputMode.TOKEN_AVERAGE
        assert restored.encoder.max_tokens == 64
        assert tokenize_and_truncate(restored.encoder, TEXTS[2]) == tokenize_and_truncate(model.encoder, TEXTS[2])
        with torch.no_grad():
            before = forward(model, batch)
            after = forward(restored, encode_texts(restored, TEXTS))
        for a, b in zip(before, after):
            assert torch.allclose(a, b, atol=1e-6)

        manifest_path = os.path.join(path, 'manifest.json')
        with open(manifest_path, encoding='utf-8') as f:
            manifest = json.load(f)
        manifest['conditions'] = list(reversed(manifest['conditions']))
        with open(manifest_path, 'w', encoding='utf-8') as f:
            json.dump(manifest, f)
        try:
            load_checkpoint(path)
            assert False, "expected ManifestError"
        except ManifestError:
            pass


def test_restore_checkpoint_requires_matching_encoder():
    source = tiny_model(max_tokens=64)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(source, os.path.join(tmp, 'ckpt'))

        target = MultiHeadClassifier(EncoderAdapter.tiny(TEXTS, seed=3, max_tokens=64))
        restore_checkpoint(target, path)
        restored = target.state_dict()
        for name, tensor in source.state_dict().items():
            assert torch.equal(tensor, restored[name]), name

        deeper = tiny_model(max_tokens=64, num_hidden_layers=3)
        renamed = tiny_model(max_tokens=64)
        renamed.encoder.name = 'bert-base'
        for model in (deeper, renamed):
            try:
                restore_checkpoint(model, path)
                assert False, "expected ManifestError"
            except ManifestError:
                pass


def test_collate_pads_right():
    batch = collate([[2, 5, 3], [2, 3]], pad_token_id=0)
    assert batch['input_ids'].tolist() == [[2, 5, 3], [2, 3, 0]]
    assert batch['attention_mask'].tolist() == [[1, 1, 1], [1, 1, 0]]


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith('test_') and callable(fn):
            fn()
            print(f"{name}: ok")
