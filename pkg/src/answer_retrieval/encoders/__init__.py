from .layers import EncoderConfig, Module, TransformerEncoder, pool_cls, pool_mean
from .matchers import (
    ARCHITECTURES,
    BiEncoder,
    CdvModel,
    CrossEncoder,
    Matcher,
    PolyEncoder,
    bi_score,
    build_model,
    cdv_score,
    cdv_scores,
    cross_score,
    poly_score,
    poly_scores,
    token_overlap_flags,
)
from .tokenizer import TokenSequence, Vocab, build_query_text, pad_batch, split_words, tokenize, tokenize_pair
from .checkpoint import CHECKPOINT_VERSION, CheckpointError, load_checkpoint, read_checkpoint_meta, save_checkpoint
