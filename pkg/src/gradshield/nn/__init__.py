"""Minimal float64 neural-network engine with explicit backward passes."""

from .checkpoint import checkpoint_bytes, load_checkpoint, read_manifest, save_checkpoint
from .engine import (
    EVAL,
    TRAIN,
    ActivationTrace,
    BatchGradients,
    PerSampleGrads,
    attention_forward,
    backward,
    backward_from_logits,
    cross_entropy,
    evaluate,
    forward,
    has_batchnorm,
    loss_and_grads,
    per_sample_gradients,
    predict,
    sgd_step,
)
from .model import LayerSpec, Model
from .zoo import substitute_norm, toy_cnn, toy_mlp, toy_transformer
