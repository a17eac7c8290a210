"""Synthetic multilingual lab for measuring cross-language interference in
small masked language models."""

from .corpus import Corpus, EncodedCorpus, LanguageSpec, build_languages, encode_corpus
from .meta import MetaAdapterPretrainer, MetaConfig, meta_train
from .model import CapacityMode, MultilingualMLM, TransformerConfig, build_model
from .pretrain import MLMPretrainer, TrainConfig, perplexity, train
from .probes import GradientProbeConfig, HardConcreteConfig, HardConcreteMasker, learn_masks, probe_pair
from .tasks import FinetuneConfig, TokenTagger, evaluate_f1, finetune
from .tokenizer import BPETokenizer, BpeModel, learn_bpe

__version__ = "0.1.0"

__all__ = [
    "BPETokenizer", "BpeModel", "CapacityMode", "Corpus", "EncodedCorpus", "FinetuneConfig",
    "GradientProbeConfig", "HardConcreteConfig", "HardConcreteMasker", "LanguageSpec", "MLMPretrainer",
    "MetaAdapterPretrainer", "MetaConfig", "MultilingualMLM", "TokenTagger", "TrainConfig", "TransformerConfig",
    "build_languages", "build_model", "encode_corpus", "evaluate_f1", "finetune", "learn_bpe", "learn_masks",
    "meta_train", "perplexity", "probe_pair", "train",
]
