"""
Multi-head report classifier

A sequence encoder (any BERT-family model, or a tiny randomly initialised one
for tests) produces per-token hidden states; the CLS state, or the mean of the
non-padding states, is fed to 14 linear heads: 4 logits for each of 13
conditions, 2 for No Finding.
"""

import json
import os
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, processors
from transformers import AutoModel, AutoTokenizer, BertConfig, BertModel, PreTrainedTokenizerFast

from config.settings import (
    BATCH_SIZE,
    CHECKPOINT_SCHEMA_VERSION,
    DEFAULT_SEED,
    ENCODER_CACHE_DIR,
    ENCODER_PRESETS,
    EVAL_EVERY,
    LEARNING_RATE,
    MAX_TOKENS,
    PATIENCE,
    RAD_MAX_EPOCHS,
    TINY_ENCODER,
)
from core.errors import ManifestError, ShapeError
from core.label_schema import CONDITIONS, CONDITION_NAMES, LabelVector, validate
from utils.logger import setup_logger

logger = setup_logger(__name__)

Batch = Dict[str, torch.Tensor]

_SPECIAL_TOKENS = ['[PAD]', '[UNK]', '[CLS]', '[SEP]', '[MASK]']


class HeadInputMode(str, Enum):
    CLS = 'cls'
    TOKEN_AVERAGE = 'token_average'


class FreezeMode(str, Enum):
    NONE = 'none'
    ENCODER_FROZEN = 'encoder_frozen'


class HyperParams(BaseModel):
    model_config = ConfigDict(extra='forbid')

    learning_rate: float = Field(LEARNING_RATE, gt=0)
    batch_size: int = Field(BATCH_SIZE, ge=1)
    max_epochs: int = Field(RAD_MAX_EPOCHS, ge=1)
    eval_every: int = Field(EVAL_EVERY, ge=1)
    seed: int = DEFAULT_SEED
    # Dev evaluations without improvement before stopping; None disables early stopping
    patience: Optional[int] = Field(PATIENCE, ge=1)


def build_word_level_tokenizer(texts: Iterable[str], max_tokens: int = MAX_TOKENS) -> PreTrainedTokenizerFast:
    """
    Lowercasing word-level tokenizer over the words of texts, with BERT-style
    [CLS] ... [SEP] framing
    """
    pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    words = set()
    for text in texts:
        words.update(word for word, _ in pre_tokenizer.pre_tokenize_str(text.lower()))
    vocab = {token: idx for idx, token in enumerate(_SPECIAL_TOKENS)}
    for word in sorted(words):
        if word not in vocab:
            vocab[word] = len(vocab)

    backend = Tokenizer(models.WordLevel(vocab=vocab, unk_token='[UNK]'))
    backend.normalizer = normalizers.Lowercase()
    backend.pre_tokenizer = pre_tokenizer
    backend.post_processor = processors.TemplateProcessing(
        single='[CLS] $A [SEP]',
        pair='[CLS] $A [SEP] $B:1 [SEP]:1',
        special_tokens=[('[CLS]', vocab['[CLS]']), ('[SEP]', vocab['[SEP]'])],
    )
    return PreTrainedTokenizerFast(
        tokenizer_object=backend,
        unk_token='[UNK]',
        pad_token='[PAD]',
        cls_token='[CLS]',
        sep_token='[SEP]',
        mask_token='[MASK]',
        model_max_length=max_tokens,
    )


class EncoderAdapter(nn.Module):
    """Wraps a transformers encoder and its tokenizer behind one contract"""

    def __init__(self, name: str, encoder: nn.Module, tokenizer, max_tokens: int = MAX_TOKENS):
        super().__init__()
        if max_tokens < 2:
            raise ShapeError(f"max_tokens must leave room for start and end markers, got {max_tokens}")
        self.name = name
        self.encoder = encoder
        self.tokenizer = tokenizer
        self.max_tokens = max_tokens

    @property
    def hidden_size(self) -> int:
        return self.encoder.config.hidden_size

    @property
    def pad_token_id(self) -> int:
        return self.tokenizer.pad_token_id

    @classmethod
    def from_pretrained(cls, name: str, max_tokens: int = MAX_TOKENS) -> 'EncoderAdapter':
        """
        Load pretrained weights

        Args:
            name: A key of ENCODER_PRESETS, a hub id or a local directory
            max_tokens: Token cap including start/end markers
        """
        source = ENCODER_PRESETS.get(name, name)
        logger.info(f"Loading encoder '{name}' from {source}")
        tokenizer = AutoTokenizer.from_pretrained(source, cache_dir=ENCODER_CACHE_DIR)
        encoder = AutoModel.from_pretrained(source, cache_dir=ENCODER_CACHE_DIR)
        return cls(name, encoder, tokenizer, max_tokens)

    @classmethod
    def tiny(cls, texts: Iterable[str], seed: int = DEFAULT_SEED, max_tokens: int = MAX_TOKENS,
             **overrides) -> 'EncoderAdapter':
        """
        Randomly initialised small BERT with a word-level vocabulary built from texts.
        Dropout is off so training steps are deterministic.
        """
        tokenizer = build_word_level_tokenizer(texts, max_tokens)
        params = {**TINY_ENCODER, **overrides}
        config = BertConfig(
            vocab_size=len(tokenizer),
            max_position_embeddings=max_tokens,
            hidden_dropout_prob=0.0,
            attention_probs_dropout_prob=0.0,
            pad_token_id=tokenizer.pad_token_id,
            **params,
        )
        torch.manual_seed(seed)
        encoder = BertModel(config, add_pooling_layer=False)
        logger.info(f"Built tiny encoder: vocab {len(tokenizer)}, hidden {config.hidden_size}, "
                    f"layers {config.num_hidden_layers}")
        return cls('tiny', encoder, tokenizer, max_tokens)

    def tokenize(self, text: str) -> List[int]:
        return self.tokenizer(text, truncation=True, max_length=self.max_tokens)['input_ids']

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        """Final-layer hidden states, shape (batch, tokens, hidden_size)"""
        return self.encoder(input_ids=input_ids, attention_mask=attention_mask).last_hidden_state

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        self.encoder.save_pretrained(directory)
        self.tokenizer.save_pretrained(directory)

    @classmethod
    def load(cls, directory: str, name: str, max_tokens: int) -> 'EncoderAdapter':
        tokenizer = AutoTokenizer.from_pretrained(directory)
        encoder = AutoModel.from_pretrained(directory)
        return cls(name, encoder, tokenizer, max_tokens)


class MultiHeadClassifier(nn.Module):
    """Encoder + one linear head per condition"""

    def __init__(self,
                 encoder: EncoderAdapter,
                 head_input_mode: HeadInputMode = HeadInputMode.CLS,
                 freeze_mode: FreezeMode = FreezeMode.NONE):
        super().__init__()
        self.encoder = encoder
        self.heads = nn.ModuleList([
            nn.Linear(encoder.hidden_size, condition.num_classes) for condition in CONDITIONS
        ])
        self.head_input_mode = HeadInputMode(head_input_mode)
        self.freeze_mode = FreezeMode.NONE
        self.set_freeze_mode(freeze_mode)

    def set_freeze_mode(self, freeze_mode: FreezeMode) -> None:
        self.freeze_mode = FreezeMode(freeze_mode)
        trainable = self.freeze_mode is FreezeMode.NONE
        for param in self.encoder.parameters():
            param.requires_grad = trainable

    def head_parameter_count(self) -> int:
        return sum(param.numel() for param in self.heads.parameters())

    def pool(self, hidden: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        if self.head_input_mode is HeadInputMode.CLS:
            return hidden[:, 0, :]
        # Start/end markers count as non-padding
        mask = attention_mask.unsqueeze(-1).to(hidden.dtype)
        return (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> List[torch.Tensor]:
        hidden = self.encoder(input_ids, attention_mask)
        pooled = self.pool(hidden, attention_mask)
        return [head(pooled) for head in self.heads]


def tokenize_and_truncate(encoder: EncoderAdapter, text: str) -> List[int]:
    """
    Token ids of a normalized text, capped at encoder.max_tokens including the
    start/end markers. The start marker is kept; trailing content is dropped.
    """
    return encoder.tokenize(text)


def collate(sequences: Sequence[Sequence[int]], pad_token_id: int) -> Batch:
    """Right-pad token sequences into input_ids / attention_mask tensors"""
    if not sequences:
        raise ShapeError("Empty batch")
    width = max(len(seq) for seq in sequences)
    input_ids = torch.full((len(sequences), width), pad_token_id, dtype=torch.long)
    attention_mask = torch.zeros((len(sequences), width), dtype=torch.long)
    for row, seq in enumerate(sequences):
        input_ids[row, :len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
        attention_mask[row, :len(seq)] = 1
    return {'input_ids': input_ids, 'attention_mask': attention_mask}


def encode_texts(model: MultiHeadClassifier, texts: Sequence[str]) -> Batch:
    encoder = model.encoder
    return collate([tokenize_and_truncate(encoder, text) for text in texts], encoder.pad_token_id)


def _check_batch(model: MultiHeadClassifier, batch: Batch) -> None:
    input_ids = batch.get('input_ids')
    attention_mask = batch.get('attention_mask')
    if input_ids is None or attention_mask is None:
        raise ShapeError("Batch needs input_ids and attention_mask")
    if input_ids.dim() != 2 or input_ids.shape != attention_mask.shape:
        raise ShapeError(f"Malformed batch: input_ids {tuple(input_ids.shape)}, "
                         f"attention_mask {tuple(attention_mask.shape)}")
    if input_ids.shape[0] == 0:
        raise ShapeError("Empty batch")
    if input_ids.shape[1] > model.encoder.max_tokens:
        raise ShapeError(f"Sequence length {input_ids.shape[1]} exceeds max_tokens {model.encoder.max_tokens}")


def forward(model: MultiHeadClassifier, batch: Batch) -> List[torch.Tensor]:
    """14 logit blocks, each (batch, num_classes of the condition)"""
    _check_batch(model, batch)
    device = next(model.parameters()).device
    return model(batch['input_ids'].to(device), batch['attention_mask'].to(device))


def decode_logits(logits: List[torch.Tensor]) -> List[LabelVector]:
    """Argmax per head; ties go to the lowest class index"""
    # numpy argmax returns the first maximum
    columns = [np.argmax(block.detach().cpu().numpy(), axis=1) for block in logits]
    indices = np.stack(columns, axis=1)
    return [LabelVector.from_indices(row) for row in indices.tolist()]


def predict(model: MultiHeadClassifier, batch: Batch) -> List[LabelVector]:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = forward(model, batch)
    finally:
        model.train(was_training)
    return decode_logits(logits)


def predict_texts(model: MultiHeadClassifier, texts: Sequence[str], batch_size: int = BATCH_SIZE) -> List[LabelVector]:
    predictions = []
    for start in range(0, len(texts), batch_size):
        predictions.extend(predict(model, encode_texts(model, texts[start:start + batch_size])))
    return predictions


def gold_targets(gold: Sequence[LabelVector]) -> torch.Tensor:
    """Class indices, shape (batch, 14)"""
    for vec in gold:
        validate(vec)
    return torch.tensor([vec.to_indices() for vec in gold], dtype=torch.long)


def compute_loss(logits: List[torch.Tensor], targets: torch.Tensor) -> torch.Tensor:
    """Sum over heads of the batch-mean cross-entropy"""
    if targets.dim() != 2 or targets.shape[1] != len(logits):
        raise ShapeError(f"Targets shape {tuple(targets.shape)} does not match {len(logits)} heads")
    if any(block.shape[0] != targets.shape[0] for block in logits):
        raise ShapeError("Logits and targets disagree on batch size")
    targets = targets.to(logits[0].device)
    return sum(F.cross_entropy(block, targets[:, idx]) for idx, block in enumerate(logits))


def loss(model: MultiHeadClassifier, batch: Batch, gold: Sequence[LabelVector]) -> torch.Tensor:
    if len(gold) != batch['input_ids'].shape[0]:
        raise ShapeError(f"Batch has {batch['input_ids'].shape[0]} items but gold has {len(gold)}")
    return compute_loss(forward(model, batch), gold_targets(gold))


def save_checkpoint(model: MultiHeadClassifier, directory: str) -> str:
    """
    Write encoder/ (weights + tokenizer), heads.pt and manifest.json
    """
    os.makedirs(directory, exist_ok=True)
    model.encoder.save(os.path.join(directory, 'encoder'))
    torch.save(model.heads.state_dict(), os.path.join(directory, 'heads.pt'))
    manifest = {
        'schema_version': CHECKPOINT_SCHEMA_VERSION,
        'encoder_name': model.encoder.name,
        'head_input_mode': model.head_input_mode.value,
        'freeze_mode': model.freeze_mode.value,
        'hidden_size': model.encoder.hidden_size,
        'max_tokens': model.encoder.max_tokens,
        'conditions': CONDITION_NAMES,
    }
    with open(os.path.join(directory, 'manifest.json'), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Checkpoint written to {directory}")
    return directory


def read_manifest(directory: str) -> Dict:
    path = os.path.join(directory, 'manifest.json')
    if not os.path.exists(path):
        raise ManifestError(f"No manifest.json in {directory}")
    with open(path, encoding='utf-8') as f:
        manifest = json.load(f)
    if manifest.get('schema_version') != CHECKPOINT_SCHEMA_VERSION:
        raise ManifestError(f"Unsupported checkpoint schema version {manifest.get('schema_version')}")
    if manifest.get('conditions') != CONDITION_NAMES:
        raise ManifestError("Checkpoint condition order does not match the label schema")
    return manifest


def load_checkpoint(directory: str) -> MultiHeadClassifier:
    manifest = read_manifest(directory)
    encoder = EncoderAdapter.load(os.path.join(directory, 'encoder'), manifest['encoder_name'],
                                  manifest['max_tokens'])
    if encoder.hidden_size != manifest['hidden_size']:
        raise ManifestError(f"Encoder hidden size {encoder.hidden_size} != manifest {manifest['hidden_size']}")
    model = MultiHeadClassifier(encoder, HeadInputMode(manifest['head_input_mode']),
                                FreezeMode(manifest.get('freeze_mode', FreezeMode.NONE.value)))
    model.heads.load_state_dict(torch.load(os.path.join(directory, 'heads.pt'), map_location='cpu'))
    logger.info(f"Loaded checkpoint from {directory} (encoder '{manifest['encoder_name']}')")
    return model


def _is_pooler_key(key: str) -> bool:
    # AutoModel always builds a pooler; the tiny encoder has none
    return key.startswith('pooler.')


def restore_checkpoint(model: MultiHeadClassifier, source: Union[str, Dict[str, torch.Tensor]]) -> None:
    """
    Load weights into an existing model from a checkpoint directory or a state dict

    Raises:
        ManifestError if the checkpoint was written by a different encoder or
        its weights do not cover the model exactly
    """
    if isinstance(source, str):
        manifest = read_manifest(source)
        if manifest['encoder_name'] != model.encoder.name:
            raise ManifestError(f"Checkpoint encoder '{manifest['encoder_name']}' does not match "
                                f"the model encoder '{model.encoder.name}'")
        if manifest['hidden_size'] != model.encoder.hidden_size:
            raise ManifestError(f"Checkpoint hidden size {manifest['hidden_size']} does not match the model")
        saved = AutoModel.from_pretrained(os.path.join(source, 'encoder'))
        try:
            result = model.encoder.encoder.load_state_dict(saved.state_dict(), strict=False)
        except RuntimeError as e:
            raise ManifestError(f"Checkpoint encoder weights do not fit the model: {str(e)}") from e
        missing = [key for key in result.missing_keys if not _is_pooler_key(key)]
        unexpected = [key for key in result.unexpected_keys if not _is_pooler_key(key)]
        if missing or unexpected:
            logger.error(f"Checkpoint {source}: {len(missing)} missing and {len(unexpected)} unexpected encoder keys")
            raise ManifestError(f"Checkpoint encoder does not match the model "
                                f"(missing {missing[:3]}, unexpected {unexpected[:3]})")
        model.heads.load_state_dict(torch.load(os.path.join(source, 'heads.pt'), map_location='cpu'))
        return
    model.load_state_dict(source)
