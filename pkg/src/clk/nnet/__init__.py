"""Encoder/decoder network predicting the centerline distance and endpoint confidence maps."""

from clk.nnet.layers import channel_attention, spatial_attention
from clk.nnet.model import NetConfig, NetError, NetParams, Network
from clk.nnet.train import Sample, TrainResult, loss, make_patches, predict_volume, train

__all__ = [
    "NetConfig",
    "NetError",
    "NetParams",
    "Network",
    "Sample",
    "TrainResult",
    "channel_attention",
    "loss",
    "make_patches",
    "predict_volume",
    "spatial_attention",
    "train",
]
