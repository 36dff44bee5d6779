"""
Naive convolutional forecaster, interface-compatible with ForecastingModule
"""

from ..autograd import nn
from ..autograd.tensor import as_tensor, cat
from ..core.errors import ContractError


class NaiveForecaster(nn.Module):
    """Per-frame 1x1 projections, two 3x3 fusion blocks and a 1x1 deprojection, rolled forward."""

    def __init__(self, model_config, num_frames, num_horizons):
        super().__init__()
        channels = model_config.feature_channels
        self.num_frames, self.num_horizons = num_frames, num_horizons
        width = max(1, channels // num_frames)
        self.projections = nn.ModuleList(nn.Conv2d(channels, width, 1) for _ in range(num_frames))
        freeze = model_config.bn_freeze_stats
        self.fuse = nn.Sequential(
            nn.conv_bn_relu(width * num_frames, channels, 3, padding=1, freeze_stats=freeze),
            nn.conv_bn_relu(channels, channels, 3, padding=1, freeze_stats=freeze),
        )
        self.deproject = nn.Conv2d(2 * channels, channels, 1)

    def step(self, window):
        """One forecast from a window of N maps [M, C, h, w]."""
        projected = [proj(frame) for proj, frame in zip(self.projections, window)]
        fused = self.fuse(cat(projected, axis=1))
        return self.deproject(cat([fused, window[-1]], axis=1))

    def synthesize_future(self, frames):
        if len(frames) != self.num_frames:
            raise ContractError(f"forecasting needs exactly {self.num_frames} frames, got {len(frames)}")
        window = [as_tensor(frame) for frame in frames]
        outputs = []
        for _ in range(self.num_horizons):
            prediction = self.step(window)
            outputs.append(prediction)
            window = window[1:] + [prediction]
        return outputs

    def forward(self, frames):
        return self.synthesize_future(frames)
