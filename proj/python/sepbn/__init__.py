"""Separable batch normalization kernels, schedules and landmark metrics."""

from ._sepbn import (
    DeskNet,
    SepBN,
    conv2d,
    cosine_lr,
    dataset_summary,
    failure_rate,
    l1_loss,
    linear,
    nme_bbox,
    nme_interocular,
    param_similarity,
    synth_generate,
    tau_schedule,
    temp_softmax,
)

__all__ = [
    "DeskNet",
    "SepBN",
    "conv2d",
    "cosine_lr",
    "dataset_summary",
    "failure_rate",
    "l1_loss",
    "linear",
    "nme_bbox",
    "nme_interocular",
    "param_similarity",
    "synth_generate",
    "tau_schedule",
    "temp_softmax",
]
