import os
from dotenv import load_dotenv

# Loading environment variables
load_dotenv()

# Log settings
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_DIR = os.getenv('LOG_DIR', 'logs')
LOG_TO_FILE = os.getenv('LOG_TO_FILE', '1') != '0'

# Translation service
TRANSLATION_ENDPOINT = os.getenv('TRANSLATION_ENDPOINT')
TRANSLATION_TIMEOUT = 60  # seconds per request

# Where pretrained encoder weights are cached (None = transformers default)
ENCODER_CACHE_DIR = os.getenv('ENCODER_CACHE_DIR')

# Model settings
MAX_TOKENS = 512
CHECKPOINT_SCHEMA_VERSION = 1

# Training settings
LEARNING_RATE = 2e-5
BATCH_SIZE = 18
AUTO_MAX_EPOCHS = 8
RAD_MAX_EPOCHS = 20
EVAL_EVERY = 500  # steps, on top of the end-of-epoch evaluation
PATIENCE = 5  # dev evaluations without improvement before stopping
RAD_TRAIN_FRACTION = 0.75
AUTO_TRAIN_FRACTION = 0.85
DEFAULT_SEED = 42

# Evaluation settings
N_BOOTSTRAP = 1000
ALPHA = 0.05

# Augmentation settings
PIVOT_LANGUAGE = 'de'
BEAM_SIZE = 1
TRANSLATION_PARALLELISM = 4
TRANSLATION_BATCH_SIZE = 16
UNRELIABLE_PIVOTS = ['ru']  # produced semantically wrong round trips

# MarianMT model pairs for the local translation client
MARIAN_MODELS = {
    'de': ('Helsinki-NLP/opus-mt-en-de', 'Helsinki-NLP/opus-mt-de-en'),
    'fr': ('Helsinki-NLP/opus-mt-en-fr', 'Helsinki-NLP/opus-mt-fr-en'),
    'es': ('Helsinki-NLP/opus-mt-en-es', 'Helsinki-NLP/opus-mt-es-en'),
    'ru': ('Helsinki-NLP/opus-mt-en-ru', 'Helsinki-NLP/opus-mt-ru-en'),
}

# Encoder weight sources
ENCODER_PRESETS = {
    'bert-base': 'bert-base-uncased',
    'biobert': 'dmis-lab/biobert-v1.1',
    'clinical-biobert': 'emilyalsentzer/Bio_ClinicalBERT',
    'bluebert': 'bionlp/bluebert_pubmed_mimic_uncased_L-12_H-768_A-12',
    'tiny': 'tiny',  # randomly initialised, built in memory
}

# Tiny encoder used by tests and the synthetic demo
TINY_ENCODER = {
    'hidden_size': 64,
    'num_hidden_layers': 2,
    'num_attention_heads': 2,
    'intermediate_size': 128,
}

# Named experiments: config overrides applied on top of a run config
EXPERIMENT_PRESETS = {
    'bert-rad': {
        'strategy.kind': 'rad',
        'encoder.name': 'bert-base',
    },
    'bert-frozen-cls-rad': {
        'strategy.kind': 'rad',
        'encoder.name': 'bert-base',
        'model.baseline': 't_cls',
    },
    'bert-frozen-token-rad': {
        'strategy.kind': 'rad',
        'encoder.name': 'bert-base',
        'model.baseline': 't_token',
    },
    'bert-auto': {
        'strategy.kind': 'auto',
        'encoder.name': 'bert-base',
    },
    'bert-hybrid': {
        'strategy.kind': 'hybrid',
        'encoder.name': 'bert-base',
    },
    'biobert-rad': {
        'strategy.kind': 'rad',
        'encoder.name': 'biobert',
    },
    'clinical-biobert-rad': {
        'strategy.kind': 'rad',
        'encoder.name': 'clinical-biobert',
    },
    'bluebert-rad': {
        'strategy.kind': 'rad',
        'encoder.name': 'bluebert',
    },
    'bert-rad-bt': {
        'strategy.kind': 'rad',
        'encoder.name': 'bert-base',
        'augmentation.enabled': True,
    },
    'bert-hybrid-bt': {
        'strategy.kind': 'hybrid',
        'encoder.name': 'bert-base',
        'augmentation.enabled': True,
    },
    'bluebert-rad-bt': {
        'strategy.kind': 'rad',
        'encoder.name': 'bluebert',
        'augmentation.enabled': True,
    },
    'bluebert-hybrid-bt': {
        'strategy.kind': 'hybrid',
        'encoder.name': 'bluebert',
        'augmentation.enabled': True,
    },
}
