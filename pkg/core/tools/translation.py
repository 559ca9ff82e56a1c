"""
Translation clients for backtranslation

Every client turns a batch of English texts into their pivot-and-back
round trips, same length and order as the input. The stubs need no model
and are what the tests use.
"""

import re
import threading
from abc import ABC, abstractmethod
from typing import Dict, List, Optional

import requests
import torch
from transformers import MarianMTModel, MarianTokenizer

from config.settings import (
    BEAM_SIZE,
    ENCODER_CACHE_DIR,
    MARIAN_MODELS,
    MAX_TOKENS,
    PIVOT_LANGUAGE,
    TRANSLATION_BATCH_SIZE,
    TRANSLATION_ENDPOINT,
    TRANSLATION_TIMEOUT,
    UNRELIABLE_PIVOTS,
)
from core.errors import ConfigError, TranslationError
from utils.logger import setup_logger

logger = setup_logger(__name__)


class TranslationClient(ABC):
    implementation = 'abstract'

    def __init__(self, pivot_language: str = PIVOT_LANGUAGE, beam_size: int = BEAM_SIZE):
        if beam_size < 1:
            raise ConfigError(f"beam_size must be positive, got {beam_size}")
        self.pivot_language = pivot_language
        self.beam_size = beam_size
        if pivot_language in UNRELIABLE_PIVOTS:
            logger.warning(f"Pivot language '{pivot_language}' is known to produce semantically wrong round trips")

    @abstractmethod
    def backtranslate_batch(self, texts: List[str]) -> List[str]:
        """English -> pivot -> English for every text"""

    def _check_output(self, texts: List[str], outputs: List[str]) -> List[str]:
        if len(outputs) != len(texts):
            raise TranslationError(f"{self.implementation} returned {len(outputs)} outputs for {len(texts)} inputs")
        return outputs


class IdentityTranslationClient(TranslationClient):
    """Returns every text unchanged"""
    implementation = 'identity_stub'

    def backtranslate_batch(self, texts: List[str]) -> List[str]:
        return list(texts)


class DictionaryTranslationClient(TranslationClient):
    """Whole-word, case-insensitive phrase substitution; longer keys win"""
    implementation = 'dictionary_stub'

    def __init__(self, mapping: Dict[str, str], pivot_language: str = PIVOT_LANGUAGE, beam_size: int = BEAM_SIZE):
        super().__init__(pivot_language, beam_size)
        self.mapping = {key.lower(): value for key, value in mapping.items()}
        keys = sorted(self.mapping, key=lambda key: (-len(key), key))
        self._pattern = re.compile(r'\b(' + '|'.join(re.escape(key) for key in keys) + r')\b',
                                   re.IGNORECASE) if keys else None

    def backtranslate_batch(self, texts: List[str]) -> List[str]:
        if self._pattern is None:
            return list(texts)
        return [self._pattern.sub(lambda m: self.mapping[m.group(0).lower()], text) for text in texts]


class MarianTranslationClient(TranslationClient):
    """Local MarianMT models, en -> pivot -> en, deterministic beam search"""
    implementation = 'marian'

    def __init__(self, pivot_language: str = PIVOT_LANGUAGE, beam_size: int = BEAM_SIZE,
                 batch_size: int = TRANSLATION_BATCH_SIZE):
        super().__init__(pivot_language, beam_size)
        if pivot_language not in MARIAN_MODELS:
            raise ConfigError(f"No MarianMT models configured for pivot '{pivot_language}'; "
                              f"available: {sorted(MARIAN_MODELS)}")
        self.batch_size = batch_size
        self._models = None
        # generate() is not safe to call concurrently on one model
        self._lock = threading.Lock()

    def _load(self):
        if self._models is None:
            forward_name, backward_name = MARIAN_MODELS[self.pivot_language]
            logger.info(f"Loading translation models {forward_name} and {backward_name}")
            self._models = [
                (MarianTokenizer.from_pretrained(name, cache_dir=ENCODER_CACHE_DIR),
                 MarianMTModel.from_pretrained(name, cache_dir=ENCODER_CACHE_DIR).eval())
                for name in (forward_name, backward_name)
            ]
        return self._models

    def _translate(self, tokenizer, model, texts: List[str]) -> List[str]:
        outputs = []
        for start in range(0, len(texts), self.batch_size):
            chunk = texts[start:start + self.batch_size]
            batch = tokenizer(chunk, return_tensors='pt', padding=True, truncation=True, max_length=MAX_TOKENS)
            with torch.no_grad():
                generated = model.generate(**batch, num_beams=self.beam_size, do_sample=False,
                                           max_length=MAX_TOKENS)
            outputs.extend(tokenizer.batch_decode(generated, skip_special_tokens=True))
        return outputs

    def backtranslate_batch(self, texts: List[str]) -> List[str]:
        try:
            with self._lock:
                (fwd_tok, fwd_model), (bwd_tok, bwd_model) = self._load()
                pivot = self._translate(fwd_tok, fwd_model, texts)
                return self._check_output(texts, self._translate(bwd_tok, bwd_model, pivot))
        except TranslationError:
            raise
        except Exception as e:
            logger.error(f"MarianMT backtranslation failed: {str(e)}")
            raise TranslationError(f"MarianMT backtranslation failed: {e}") from e


class HttpTranslationClient(TranslationClient):
    """
    Remote translation service

    Request body: {"texts": [...], "pivot": "de", "beam_size": 1}
    Response body: {"translations": [...]} with the same length and order
    """
    implementation = 'http'

    def __init__(self, endpoint: Optional[str] = None, pivot_language: str = PIVOT_LANGUAGE,
                 beam_size: int = BEAM_SIZE, timeout: float = TRANSLATION_TIMEOUT):
        super().__init__(pivot_language, beam_size)
        self.endpoint = endpoint or TRANSLATION_ENDPOINT
        if not self.endpoint:
            raise ConfigError("http translation client needs an endpoint (augmentation.endpoint or "
                              "TRANSLATION_ENDPOINT)")
        self.timeout = timeout
        # augment_dataset calls from several threads; one session each
        self._local = threading.local()

    @property
    def session(self) -> requests.Session:
        if getattr(self._local, 'session', None) is None:
            self._local.session = requests.Session()
        return self._local.session

    def backtranslate_batch(self, texts: List[str]) -> List[str]:
        payload = {'texts': list(texts), 'pivot': self.pivot_language, 'beam_size': self.beam_size}
        try:
            response = self.session.post(self.endpoint, json=payload, timeout=self.timeout)
            response.raise_for_status()
            translations = response.json()['translations']
        except (requests.RequestException, ValueError, KeyError) as e:
            logger.error(f"Translation request to {self.endpoint} failed: {str(e)}")
            raise TranslationError(f"Translation request failed: {e}") from e
        return self._check_output(texts, [str(text) for text in translations])


class BatchFileTranslationClient(TranslationClient):
    """
    Offline mode: precomputed round trips in two newline-delimited files,
    line i of output_path being the round trip of line i of input_path
    """
    implementation = 'batch_file'

    def __init__(self, input_path: str, output_path: str, pivot_language: str = PIVOT_LANGUAGE,
                 beam_size: int = BEAM_SIZE):
        super().__init__(pivot_language, beam_size)
        sources = _read_lines(input_path)
        targets = _read_lines(output_path)
        if len(sources) != len(targets):
            raise TranslationError(f"{input_path} has {len(sources)} lines but {output_path} has {len(targets)}")
        self.lookup = dict(zip(sources, targets))
        logger.info(f"Loaded {len(self.lookup)} precomputed backtranslations from {output_path}")

    def backtranslate_batch(self, texts: List[str]) -> List[str]:
        missing = [text for text in texts if text not in self.lookup]
        if missing:
            raise TranslationError(f"{len(missing)} texts have no precomputed backtranslation")
        return [self.lookup[text] for text in texts]


def _read_lines(path: str) -> List[str]:
    with open(path, encoding='utf-8') as f:
        return f.read().splitlines()


def write_batch_input(texts: List[str], path: str) -> None:
    """Input file for an offline translation run; texts are normalized, so one per line"""
    with open(path, 'w', encoding='utf-8') as f:
        for text in texts:
            f.write(text + '\n')
    logger.info(f"Wrote {len(texts)} texts for offline translation to {path}")


def create_client(implementation: str, pivot_language: str = PIVOT_LANGUAGE, beam_size: int = BEAM_SIZE,
                  **options) -> TranslationClient:
    """
    Build a translation client by name

    Args:
        implementation: identity_stub, dictionary_stub, marian, http or batch_file
        pivot_language: Pivot language code
        beam_size: Beam width for model decoding
        options: Client-specific options (mapping, endpoint, input_path, output_path, batch_size)
    """
    if implementation == 'identity_stub':
        return IdentityTranslationClient(pivot_language, beam_size)
    if implementation == 'dictionary_stub':
        return DictionaryTranslationClient(options.get('mapping') or {}, pivot_language, beam_size)
    if implementation == 'marian':
        return MarianTranslationClient(pivot_language, beam_size, options.get('batch_size') or TRANSLATION_BATCH_SIZE)
    if implementation == 'http':
        return HttpTranslationClient(options.get('endpoint'), pivot_language, beam_size)
    if implementation == 'batch_file':
        if not options.get('input_path') or not options.get('output_path'):
            raise ConfigError("batch_file translation client needs input_path and output_path")
        return BatchFileTranslationClient(options['input_path'], options['output_path'], pivot_language, beam_size)
    raise ConfigError(f"Unknown translation client '{implementation}'")
