"""
Forecasting module: contextual embeddings, future state queries and the
stack of future interaction layers around one shared future state synthesizer.
"""

import logging
import math

import numpy as np

from ..autograd import functional as F
from ..autograd import nn
from ..autograd.tensor import as_tensor
from ..core.config import NUM_SCALES
from ..core.errors import ConfigurationError, ContractError, DimensionError

logger = logging.getLogger(__name__)


def scale_slice_mask(neck_widths):
    """[4, C] indicator of which fused channels each neck scale produced."""
    mask = np.zeros((len(neck_widths), sum(neck_widths)))
    start = 0
    for row, width in enumerate(neck_widths):
        mask[row, start:start + width] = 1.0
        start += width
    return mask


def features_to_queries(features):
    """[M, C, h, w] -> [h*w, M, C]."""
    cameras, channels, height, width = features.shape
    return features.permute(2, 3, 0, 1).reshape(height * width, cameras, channels)


def queries_to_features(queries, height, width):
    """[h*w, M, C] -> [M, C, h, w]."""
    cells, cameras, channels = queries.shape
    if cells != height * width:
        raise DimensionError("query count differs from the feature grid", queries.shape, (height, width))
    return queries.reshape(height, width, cameras, channels).permute(2, 3, 0, 1)


class ContextualEmbeddings(nn.Module):
    """Learnable scale, camera and time rows added to F2D, broadcast over space."""

    def __init__(self, neck_widths, num_cameras, num_frames, use_scale=True, use_camera=True, use_time=True):
        super().__init__()
        channels = sum(neck_widths)
        self.E_scale = nn.Parameter(nn.init_normal((NUM_SCALES, channels)))
        self.E_cam = nn.Parameter(nn.init_normal((num_cameras, channels)))
        self.E_time = nn.Parameter(nn.init_normal((num_frames, channels)))
        self.scale_mask = scale_slice_mask(neck_widths)
        self.use_scale, self.use_camera, self.use_time = use_scale, use_camera, use_time

    def forward(self, features, time_idx, cam_ids=None, scale_idx=None):
        cameras, channels = features.shape[:2]
        cam_ids = np.arange(cameras) if cam_ids is None else np.asarray(cam_ids)
        if channels != self.E_cam.shape[1]:
            raise DimensionError("feature width differs from embedding width", features.shape, self.E_cam.shape)
        if cam_ids.shape != (cameras,) or cam_ids.min() < 0 or cam_ids.max() >= self.E_cam.shape[0]:
            raise ContractError(f"camera ids {cam_ids.tolist()} outside [0, {self.E_cam.shape[0]})")
        if not 0 <= time_idx < self.E_time.shape[0]:
            raise ContractError(f"time index {time_idx} outside [0, {self.E_time.shape[0]})")

        mask = self.scale_mask
        if scale_idx is not None:
            if not 0 <= scale_idx < NUM_SCALES:
                raise ContractError(f"scale index {scale_idx} outside [0, {NUM_SCALES})")
            mask = mask * (np.arange(NUM_SCALES) == scale_idx)[:, None]

        offset = None
        if self.use_scale:
            offset = (self.E_scale * mask).sum(axis=0).reshape(1, channels)
        if self.use_camera:
            term = self.E_cam[cam_ids]
            offset = term if offset is None else offset + term
        if self.use_time:
            term = self.E_time[time_idx].reshape(1, channels)
            offset = term if offset is None else offset + term
        if offset is None:
            return features
        if offset.shape[0] != cameras:
            offset = offset + np.zeros((cameras, 1))
        return features + offset.reshape(cameras, channels, 1, 1)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over token sets [N, C]; returns (output, weights [H, Nq, Nk])."""

    def __init__(self, channels, num_heads):
        super().__init__()
        if channels % num_heads:
            raise ConfigurationError(f"width {channels} not divisible by {num_heads} heads")
        self.channels, self.num_heads = channels, num_heads
        self.head_dim = channels // num_heads
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)

    def _split(self, tokens):
        return tokens.reshape(tokens.shape[0], self.num_heads, self.head_dim).permute(1, 0, 2)

    def forward(self, query, key_value):
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key_value))
        v = self._split(self.v_proj(key_value))
        scores = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(self.head_dim))
        weights = F.softmax(scores, axis=-1)
        heads = (weights @ v).permute(1, 0, 2).reshape(query.shape[0], self.channels)
        return self.out_proj(heads), weights


class FeedForward(nn.Module):
    def __init__(self, channels, hidden):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class FutureStateSynthesizer(nn.Module):
    """Three fully connected layers of width C with ReLU in between."""

    def __init__(self, channels):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, channels)
        self.fc3 = nn.Linear(channels, channels)

    def forward(self, x):
        return self.fc3(F.relu(self.fc2(F.relu(self.fc1(x)))))


class FutureInteractionLayer(nn.Module):
    """Pre-norm cross-attention, self-attention, feed-forward and shared synthesizer, each residual."""

    def __init__(self, channels, num_heads, ffn_hidden, synthesizer):
        super().__init__()
        self.norm_query = nn.LayerNorm(channels)
        self.norm_frame = nn.LayerNorm(channels)
        self.cross_attn = MultiHeadAttention(channels, num_heads)
        self.norm_self = nn.LayerNorm(channels)
        self.self_attn = MultiHeadAttention(channels, num_heads)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = FeedForward(channels, ffn_hidden)
        self.norm_synth = nn.LayerNorm(channels)
        self.synthesizer = synthesizer
        self.last_weights = None

    def own_parameters(self):
        """Parameters of this layer excluding the shared synthesizer."""
        shared = {id(p) for p in self.synthesizer.parameters()}
        return [p for p in self.parameters() if id(p) not in shared]

    def forward(self, tokens, frame_tokens):
        attended, cross_weights = self.cross_attn(self.norm_query(tokens), self.norm_frame(frame_tokens))
        tokens = tokens + attended
        normed = self.norm_self(tokens)
        attended, self_weights = self.self_attn(normed, normed)
        tokens = tokens + attended
        tokens = tokens + self.ffn(self.norm_ffn(tokens))
        tokens = tokens + self.synthesizer(self.norm_synth(tokens))
        self.last_weights = (cross_weights, self_weights)
        return tokens


class ForecastingModule(nn.Module):
    """Synthesises F2D at every horizon from N past/current frames."""

    def __init__(self, model_config, num_cameras, feature_size, num_frames, num_horizons):
        super().__init__()
        channels = model_config.feature_channels
        height, width = feature_size
        self.channels, self.feature_size = channels, (height, width)
        self.num_frames, self.num_horizons = num_frames, num_horizons
        self.query_init = model_config.query_init
        self.embeddings = ContextualEmbeddings(
            model_config.neck_widths, num_cameras, num_frames,
            use_scale=model_config.use_scale_embedding,
            use_camera=model_config.use_camera_embedding,
            use_time=model_config.use_time_embedding)
        self.E_horizon = nn.Parameter(nn.init_normal((num_horizons, channels)))
        if self.query_init == "learned":
            self.learned_queries = nn.Parameter(nn.init_normal((height * width, num_cameras, channels)))
        self.synthesizer = FutureStateSynthesizer(channels)
        self.layers = nn.ModuleList(
            FutureInteractionLayer(channels, model_config.num_heads, model_config.ffn_hidden, self.synthesizer)
            for _ in range(model_config.num_layers))

    def add_contextual_embeddings(self, features, time_idx, cam_ids=None, scale_idx=None):
        return self.embeddings(features, time_idx, cam_ids, scale_idx)

    def init_queries(self, current, horizon_idx, mode=None):
        """Future state queries [h*w, M, C] for one horizon."""
        mode = mode or self.query_init
        if not 0 <= horizon_idx < self.num_horizons:
            raise ContractError(f"horizon index {horizon_idx} outside [0, {self.num_horizons})")
        horizon = self.E_horizon[horizon_idx].reshape(1, 1, self.channels)
        if mode == "current_frame":
            return features_to_queries(as_tensor(current)) + horizon
        if mode == "learned":
            if not hasattr(self, "learned_queries"):
                raise ConfigurationError("learned queries were not built; set model.query_init = learned")
            return self.learned_queries + horizon
        raise ConfigurationError(f"unknown query init mode {mode!r}")

    def interaction_step(self, queries, frame):
        """All L layers of queries [h*w, M, C] against one embedded frame [M, C, h, w]."""
        cells, cameras, channels = queries.shape
        tokens = queries.reshape(cells * cameras, channels)
        frame_tokens = features_to_queries(frame).reshape(cells * cameras, channels)
        for layer in self.layers:
            tokens = layer(tokens, frame_tokens)
        return tokens.reshape(cells, cameras, channels)

    def synthesize_future(self, frames):
        """frames: N feature maps [M, C, h, w], oldest first -> one map per horizon."""
        if len(frames) != self.num_frames:
            raise ContractError(f"forecasting needs exactly {self.num_frames} frames, got {len(frames)}")
        embedded = [self.add_contextual_embeddings(as_tensor(frame), index) for index, frame in enumerate(frames)]
        height, width = embedded[-1].shape[2:]
        outputs = []
        for horizon_idx in range(self.num_horizons):
            queries = self.init_queries(embedded[-1], horizon_idx)
            for frame in embedded:
                queries = self.interaction_step(queries, frame)
            outputs.append(queries_to_features(queries, height, width))
        return outputs

    def forward(self, frames):
        return self.synthesize_future(frames)

    def query_shape(self, num_cameras):
        height, width = self.feature_size
        return (height * width, num_cameras, self.channels)
