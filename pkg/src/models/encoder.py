"""
Multi-scale image encoder: a four-stage strided conv backbone and a neck
that aligns every scale to 1/16 resolution and concatenates them.
"""

import logging

from ..autograd import nn
from ..autograd.tensor import as_tensor, cat, no_grad
from ..core.config import FEATURE_STRIDE
from ..core.errors import CheckpointError, ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

SCALE_STRIDES = (4, 8, 16, 32)


class Backbone(nn.Module):
    """Feature maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution."""

    def __init__(self, widths, freeze_stats=False):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.stage1 = nn.Sequential(
            nn.conv_bn_relu(3, w1, 4, stride=4, freeze_stats=freeze_stats),
            nn.conv_bn_relu(w1, w1, 3, padding=1, freeze_stats=freeze_stats),
        )
        self.stage2 = nn.conv_bn_relu(w1, w2, 3, stride=2, padding=1, freeze_stats=freeze_stats)
        self.stage3 = nn.conv_bn_relu(w2, w3, 3, stride=2, padding=1, freeze_stats=freeze_stats)
        self.stage4 = nn.conv_bn_relu(w3, w4, 3, stride=2, padding=1, freeze_stats=freeze_stats)

    def forward(self, images):
        height, width = images.shape[-2:]
        if height % 32 or width % 32:
            raise ConfigurationError(f"image size {height}x{width} must be divisible by 32")
        s1 = self.stage1(images)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        s4 = self.stage4(s3)
        return [s1, s2, s3, s4]


class FusingNeck(nn.Module):
    """Conv (k=s=4, 2, 1) and deconv (k=s=2) per scale, each with BN + ReLU, then concat."""

    def __init__(self, in_widths, out_widths, freeze_stats=False):
        super().__init__()
        (i1, i2, i3, i4), (o1, o2, o3, o4) = in_widths, out_widths
        self.down4 = nn.conv_bn_relu(i1, o1, 4, stride=4, freeze_stats=freeze_stats)
        self.down2 = nn.conv_bn_relu(i2, o2, 2, stride=2, freeze_stats=freeze_stats)
        self.keep = nn.conv_bn_relu(i3, o3, 1, freeze_stats=freeze_stats)
        self.up2 = nn.Sequential(nn.ConvTranspose2d(i4, o4, 2, stride=2),
                                 nn.BatchNorm2d(o4, freeze_stats=freeze_stats), nn.ReLU())
        self.out_widths = tuple(out_widths)

    def forward(self, scales):
        aligned = [self.down4(scales[0]), self.down2(scales[1]), self.keep(scales[2]), self.up2(scales[3])]
        return cat(aligned, axis=1)


class ImageEncoder(nn.Module):
    """images [M, 3, H, W] -> F2D [M, C, H/16, W/16] with C = sum(neck widths)."""

    def __init__(self, model_config):
        super().__init__()
        self.backbone = Backbone(model_config.backbone_widths, model_config.bn_freeze_stats)
        self.neck = FusingNeck(model_config.backbone_widths, model_config.neck_widths,
                               model_config.bn_freeze_stats)
        self.out_channels = model_config.feature_channels
        self.loaded_from_checkpoint = False

    def forward(self, images):
        images = as_tensor(images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError("encoder expects [M, 3, H, W] images", images.shape)
        return self.neck(self.backbone(images))

    def fpn_fuse(self, scales):
        return self.neck(scales)

    def encode_frozen(self, images):
        """Gradient-free forward with running BN statistics; needs pretrained weights."""
        if not self.loaded_from_checkpoint:
            raise CheckpointError("frozen encoding needs encoder weights loaded from a pretraining checkpoint")
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                features = self.forward(images)
        finally:
            self.train(was_training)
        return features

    @staticmethod
    def scale_shapes(image_size):
        height, width = image_size
        return [(height // s, width // s) for s in SCALE_STRIDES]

    def output_shape(self, num_cameras, image_size):
        height, width = image_size
        if height % 32 or width % 32:
            raise ConfigurationError(f"image size {height}x{width} must be divisible by 32")
        return (num_cameras, self.out_channels, height // FEATURE_STRIDE, width // FEATURE_STRIDE)
