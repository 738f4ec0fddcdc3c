"""CBAM-augmented MBConv classifier on a small numpy autodiff core."""
from .backbone import (
    MBConvSpec,
    Model,
    NetworkConfig,
    build_model,
    compound_scale,
    count_macs,
    count_params,
    efficientnet_b0,
    efficientnet_b7,
    efftiny,
    layer_table,
)
from .cbam import CbamParams, cbam_forward, channel_attention_weights, spatial_attention_map
from .gradcheck import grad_check
from .tensor import Parameter, Tensor, no_grad

__version__ = "0.1.0"
