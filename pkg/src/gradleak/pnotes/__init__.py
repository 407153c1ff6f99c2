"""Synthetic private corpus: vocabulary, private samples, PNotes, datasets."""

from gradleak.pnotes.dataset import FilterSet, cooccurrence, load_dataset, save_dataset
from gradleak.pnotes.generate import (DatasetSpec, PNoteAppendedSample, PNoteSummarySample,
                                      PrivateSample, Record, SampleFactory, TrainingMix,
                                      build_training_mix, gen_private_sample,
                                      make_pnote_appended, make_summary_sample)
from gradleak.pnotes.vocab import Vocabulary, WordLists

__all__ = [
    "FilterSet", "cooccurrence", "load_dataset", "save_dataset", "DatasetSpec",
    "PNoteAppendedSample", "PNoteSummarySample", "PrivateSample", "Record", "SampleFactory",
    "TrainingMix", "build_training_mix", "gen_private_sample", "make_pnote_appended",
    "make_summary_sample", "Vocabulary", "WordLists",
]
