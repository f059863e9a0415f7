"""FeatER: feature-map transformer blocks, their vanilla baseline, and an
exact MAC cost model."""

from feater.blocks import (
    BlockStackConfig,
    FeatERBlockParams,
    VanillaBlockParams,
    attention_h,
    attention_w,
    feater_block_forward,
    flatten_stack,
    stack_forward,
    unflatten_tokens,
    vanilla_block_forward,
)
from feater.core import RngStream, Tape, Tensor, grad_check
from feater.costmodel import CostReport, macs_feater_block, macs_vanilla_block

__version__ = "0.1.0"
