from quadftc.nn.autodiff import ShapeMismatch, Tape, Var
from quadftc.nn.layers import (
    CnnConfig,
    TransformerConfig,
    conv1d_forward,
    encode,
    encoder_forward,
    init_encoder,
    init_mlp,
    mlp_forward,
    multi_head_attention,
    transformer_encode,
)
from quadftc.nn.optim import AdamState, adam_step, clip_grad_norm

__all__ = [
    "AdamState", "CnnConfig", "ShapeMismatch", "Tape", "TransformerConfig", "Var", "adam_step",
    "clip_grad_norm", "conv1d_forward", "encode", "encoder_forward", "init_encoder", "init_mlp",
    "mlp_forward", "multi_head_attention", "transformer_encode",
]
