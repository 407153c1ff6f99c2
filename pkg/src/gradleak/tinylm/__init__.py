"""Toy causal transformer: forward, exact gradients, PEFT modes, decoding."""

from gradleak.tinylm.config import (BOS, NUM_RESERVED, PAD, PN_CLOSE, PN_OPEN, FullFT, Lora,
                                    ModelConfig, PeftMode, Selective, TokenBatch)
from gradleak.tinylm.model import (GradientCapture, LoraFactors, TinyLmParams, apply_delta,
                                   backward, embed, first_layer_query_inputs, forward, generate,
                                   init_lora, init_params, loss, loss_and_grads, merge_lora,
                                   perplexities, perplexity, softmax)
from gradleak.tinylm.train import TrainResult, train

__all__ = [
    "BOS", "NUM_RESERVED", "PAD", "PN_CLOSE", "PN_OPEN", "FullFT", "Lora", "ModelConfig",
    "PeftMode", "Selective", "TokenBatch", "GradientCapture", "LoraFactors", "TinyLmParams",
    "apply_delta", "backward", "embed", "first_layer_query_inputs", "forward", "generate",
    "init_lora", "init_params", "loss", "loss_and_grads", "merge_lora", "perplexities",
    "perplexity", "softmax", "TrainResult", "train",
]
