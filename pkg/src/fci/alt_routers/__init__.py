"""Non-attention routing mechanisms: symbolic indices, contextual bandits,
segment summaries, and contrastive pretraining."""

from .bloom import BloomSegmentIndex, bloom_build, bloom_route  # noqa: F401
from .bm25 import BM25Index, bm25_build, bm25_retrieve  # noqa: F401
from .bandits import (  # noqa: F401
    BanditState, init_bandit_state, linucb_step, thompson_step, oful_step,
    oful_beta, bandit_scores,
)
from .contrastive import ContrastiveConfig, infonce_loss, infonce_loss_batch, contrastive_pretrain  # noqa: F401
