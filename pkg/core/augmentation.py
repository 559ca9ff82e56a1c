"""
Backtranslation augmentation

Every train-split report gets one round-trip copy with the same labels. A copy
whose translation fails keeps the original text and is flagged, so the pool
always doubles.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict

from config.settings import TRANSLATION_BATCH_SIZE, TRANSLATION_PARALLELISM
from core.corpus import Dataset, LabeledReport, Provenance, Report, Split, normalize_text
from core.errors import TranslationError
from core.tools.translation import TranslationClient, create_client
from utils.logger import setup_logger

logger = setup_logger(__name__)

AUGMENTED_SUFFIX = '#bt'


class AugmentedDataset(BaseModel):
    model_config = ConfigDict(frozen=True)

    base: Dataset
    augmented: Dataset
    # augmented report_id -> base report_id
    pairing: Dict[str, str]
    # augmented report_ids whose translation failed (original text kept)
    failed: Tuple[str, ...] = ()

    def combined(self) -> Dataset:
        """
        Base items followed by the augmented copies; a copy lands on the same
        side of the split as its base report
        """
        split = None
        if self.base.split is not None:
            split = dict(self.base.split)
            for aug_id, base_id in self.pairing.items():
                split[aug_id] = self.base.split[base_id]
        return Dataset(
            items=self.base.items + self.augmented.items,
            split=split,
            seed=self.base.seed,
            labeled=self.base.labeled,
            flagged=self.base.flagged + self.failed,
        )


def augmented_id(base_id: str) -> str:
    return f"{base_id}{AUGMENTED_SUFFIX}"


def backtranslate(client: TranslationClient, text: str) -> str:
    """
    Round trip of one text through the client's pivot language

    Raises:
        TranslationError if the client fails or returns an empty text
    """
    output = normalize_text(client.backtranslate_batch([text])[0])
    if not output:
        raise TranslationError("Backtranslation returned an empty text")
    return output


def _translate_chunk(client: TranslationClient, texts: List[str]) -> List[Optional[str]]:
    """Outputs for a chunk; None marks an item that failed"""
    try:
        outputs = client.backtranslate_batch(texts)
        if len(outputs) != len(texts):
            raise TranslationError(f"Client returned {len(outputs)} outputs for {len(texts)} inputs")
        return [normalize_text(output) or None for output in outputs]
    except TranslationError as e:
        if len(texts) == 1:
            logger.warning(f"Backtranslation failed: {str(e)}")
            return [None]
        # Retry item by item so one bad text does not sink the chunk
        logger.warning(f"Batch backtranslation failed ({str(e)}); retrying {len(texts)} items one by one")
        return [result for text in texts for result in _translate_chunk(client, [text])]


def augment_dataset(ds: Dataset,
                    client: TranslationClient,
                    augment_dev: bool = False,
                    parallelism: int = TRANSLATION_PARALLELISM,
                    batch_size: int = TRANSLATION_BATCH_SIZE) -> AugmentedDataset:
    """
    Backtranslate every train-split item (every item if ds has no split)

    Args:
        ds: Expert-labeled dataset, left untouched
        client: Translation client
        augment_dev: Also augment dev-split items
        parallelism: Concurrent translation requests
        batch_size: Texts per request

    Returns:
        AugmentedDataset pairing each copy with its base report
    """
    if ds.split is None or augment_dev:
        sources = list(ds.items)
    else:
        sources = [item for item in ds.items if ds.split[item.report_id] == Split.TRAIN]
    # Copies are never augmented again, and a base report keeps its single copy
    taken = set(ds.ids)
    already = [item for item in sources
               if item.provenance is Provenance.BACKTRANSLATED or augmented_id(item.report_id) in taken]
    if already:
        logger.warning(f"Skipping {len(already)} items that are backtranslated copies or already have one")
        sources = [item for item in sources
                   if item.provenance is not Provenance.BACKTRANSLATED and augmented_id(item.report_id) not in taken]
    non_expert = sum(1 for item in sources if item.provenance is not Provenance.EXPERT)
    if non_expert:
        logger.warning(f"{non_expert} items selected for augmentation are not expert-labeled")

    texts = [item.report.text for item in sources]
    chunks = [texts[start:start + batch_size] for start in range(0, len(texts), batch_size)]
    logger.info(f"Backtranslating {len(texts)} reports via {client.implementation} "
                f"(pivot {client.pivot_language}, beam {client.beam_size}, {len(chunks)} requests)")
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as executor:
        # map keeps input order
        results = [output for chunk in executor.map(lambda c: _translate_chunk(client, c), chunks)
                   for output in chunk]

    items = []
    pairing = {}
    failed = []
    for item, output in zip(sources, results):
        new_id = augmented_id(item.report_id)
        if output is None:
            failed.append(new_id)
            output = item.report.text
        items.append(LabeledReport(
            report=Report(report_id=new_id, patient_id=item.report.patient_id, text=output),
            labels=item.labels,
            provenance=Provenance.BACKTRANSLATED,
        ))
        pairing[new_id] = item.report_id

    if failed:
        logger.warning(f"{len(failed)} backtranslations failed; original texts kept for {failed[:5]}")
    logger.info(f"Augmentation produced {len(items)} copies")
    augmented = Dataset(items=tuple(items), seed=ds.seed, labeled=ds.labeled, flagged=tuple(failed))
    return AugmentedDataset(base=ds, augmented=augmented, pairing=pairing, failed=tuple(failed))


def client_from_settings(settings) -> TranslationClient:
    """Translation client described by a run config's augmentation section"""
    return create_client(
        settings.client,
        pivot_language=settings.pivot_language,
        beam_size=settings.beam_size,
        mapping=settings.mapping,
        endpoint=settings.endpoint,
        input_path=settings.input_path,
        output_path=settings.output_path,
        batch_size=settings.batch_size,
    )
