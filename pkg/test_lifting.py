"""
View transformer (frustum lifting, voxel pooling) and the 3D occupancy decoder
"""

import numpy as np
import pytest

from src.autograd.tensor import Tensor
from src.core.config import make_preset
from src.core.errors import ConfigurationError, DimensionError
from src.graphics.camera import build_rig, translation, unproject
from src.models.occupancy import Bottleneck3D, OccupancyBackbone, OccupancyDecoder, TemporalFusion
from src.models.view_transformer import ViewTransformer, depth_loss, frustum_points, voxel_indices, voxel_pool


@pytest.fixture
def micro():
    return make_preset("micro")


def rig_arrays(scene):
    cameras = build_rig(scene)
    return np.stack([c.intrinsics for c in cameras]), np.stack([c.ego_from_camera for c in cameras])


class TestFrustum:
    def test_matches_pixel_unprojection(self, micro):
        intrinsics, extrinsics = rig_arrays(micro.scene)
        centers = np.array([2.0, 5.0, 9.5])
        points = frustum_points(intrinsics, extrinsics, centers, (2, 2), stride=16)
        assert points.shape == (2, 3, 2, 2, 3)
        worst = 0.0
        for m in range(2):
            for d, depth in enumerate(centers):
                for i in range(2):
                    for j in range(2):
                        expected = unproject(intrinsics[m], extrinsics[m], (j + 0.5) * 16, (i + 0.5) * 16, depth)
                        worst = max(worst, np.max(np.abs(points[m, d, i, j] - expected)))
        assert worst < 1e-9

    def test_reference_transform(self, micro):
        intrinsics, extrinsics = rig_arrays(micro.scene)
        plain = frustum_points(intrinsics, extrinsics, [3.0], (2, 2))
        shifted = frustum_points(intrinsics, extrinsics, [3.0], (2, 2), ref_from_ego=translation([1.0, -2.0, 0.0]))
        np.testing.assert_allclose(shifted - plain, np.broadcast_to([1.0, -2.0, 0.0], plain.shape), atol=1e-12)

    def test_singular_intrinsics(self, micro):
        _, extrinsics = rig_arrays(micro.scene)
        with pytest.raises(ConfigurationError):
            frustum_points(np.zeros((2, 3, 3)), extrinsics, [3.0], (2, 2))


class TestVoxelPool:
    def test_indices(self, micro):
        scene = micro.scene  # 8 x 8 x 4 voxels of 1 m from (0, -4, -1)
        points = np.array([[0.5, -3.5, -0.5], [7.9, 3.9, 2.9], [1.5, -2.5, 0.5], [8.0, 0.0, 0.0],
                           [-0.1, 0.0, 0.0], [3.0, 0.0, 3.0]])
        np.testing.assert_array_equal(voxel_indices(points, scene), [0, 255, (1 * 8 + 1) * 8 + 1, -1, -1, -1])

    def test_matches_brute_force(self, micro, rng):
        scene = micro.scene
        positions = rng.uniform([-1.0, -5.0, -2.0], [9.0, 5.0, 4.0], size=(300, 3))
        features = rng.normal(size=(300, 3))
        pooled = voxel_pool(positions, Tensor(features), scene).data
        expected = np.zeros((3, 4, 8, 8))
        for point, feature in zip(positions, features):
            cell = np.floor((point - np.array(scene.grid_origin)) / scene.voxel_size).astype(int)
            if np.all(cell >= 0) and np.all(cell < np.array(scene.grid_size)):
                expected[:, cell[2], cell[1], cell[0]] += feature
        assert np.max(np.abs(pooled - expected)) < 1e-12

    def test_gradient_routes_back_to_points(self, micro):
        positions = np.array([[0.5, -3.5, -0.5], [20.0, 0.0, 0.0]])
        features = Tensor(np.ones((2, 2)), requires_grad=True)
        pooled = voxel_pool(positions, features, micro.scene)
        (pooled * 3.0).sum().backward()
        np.testing.assert_array_equal(features.grad, [[3.0, 3.0], [0.0, 0.0]])


class TestViewTransformer:
    def test_stage_shapes(self, micro, rng):
        vt = ViewTransformer(micro)
        intrinsics, extrinsics = rig_arrays(micro.scene)
        context, depth, volume = vt(Tensor(rng.normal(size=(2, 8, 2, 2))), intrinsics, extrinsics)
        assert context.shape == (2, 4, 2, 2)
        assert depth.shape == (2, 4, 2, 2)
        assert volume.shape == (4, 4, 8, 8)
        assert vt.output_shapes(2, (2, 2), 4) == {"context": (2, 4, 2, 2), "depth": (2, 4, 2, 2),
                                                 "volume": (4, 4, 8, 8)}
        np.testing.assert_allclose(depth.data.sum(axis=1), 1.0, atol=1e-12)

    def test_lift_weights_context_by_depth(self, micro, rng):
        vt = ViewTransformer(micro)
        intrinsics, extrinsics = rig_arrays(micro.scene)
        context = rng.normal(size=(2, 4, 2, 2))
        depth = rng.dirichlet(np.ones(4), size=(2, 2, 2)).transpose(0, 3, 1, 2)
        positions, points = vt.lift(Tensor(context), Tensor(depth), intrinsics, extrinsics)
        assert positions.shape == (2 * 4 * 2 * 2, 3) and points.shape == (2 * 4 * 2 * 2, 4)
        # Point order is camera, bin, row, column
        index = ((1 * 4 + 2) * 2 + 0) * 2 + 1
        np.testing.assert_allclose(points.data[index], context[1, :, 0, 1] * depth[1, 2, 0, 1], atol=1e-12)

    def test_lift_shape_mismatch(self, micro):
        vt = ViewTransformer(micro)
        intrinsics, extrinsics = rig_arrays(micro.scene)
        with pytest.raises(DimensionError):
            vt.lift(Tensor(np.zeros((2, 4, 2, 2))), Tensor(np.zeros((2, 3, 2, 2))), intrinsics, extrinsics)

    def test_depth_loss_of_uniform_prediction(self):
        probs = Tensor(np.full((1, 4, 1, 1), 0.25))
        target = np.zeros((1, 4, 1, 1))
        target[0, 1, 0, 0] = 1.0
        expected = -(np.log(0.25) + 3 * np.log(0.75)) / 4
        assert depth_loss(probs, target).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.562, abs=1e-3)

    def test_depth_loss_masks_empty_targets(self):
        probs = Tensor(np.full((1, 2, 1, 2), 0.5))
        target = np.zeros((1, 2, 1, 2))
        target[0, 0, 0, 0] = 1.0
        assert depth_loss(probs, target).item() == pytest.approx(np.log(2.0), abs=1e-12)


class TestOccupancyDecoder:
    def test_zero_initialised_bottleneck_passes_input(self, rng):
        block = Bottleneck3D(4, 4, zero_init_last=True)
        x = rng.normal(size=(1, 4, 4, 4, 4))
        np.testing.assert_allclose(block(Tensor(x)).data, np.maximum(x, 0.0), atol=1e-12)

    def test_fusion_doubles_channels(self, rng):
        fusion = TemporalFusion(4, 4)
        fused = fusion(Tensor(rng.normal(size=(4, 4, 8, 8))), Tensor(rng.normal(size=(4, 4, 8, 8))))
        assert fused.shape == (1, 8, 4, 8, 8)
        with pytest.raises(DimensionError):
            fusion(Tensor(np.zeros((4, 4, 8, 8))), Tensor(np.zeros((4, 4, 4, 8))))

    def test_backbone_stages(self, rng):
        backbone = OccupancyBackbone(8, 4)
        stages = backbone(Tensor(rng.normal(size=(8, 4, 8, 8))))
        assert [s.shape[1:] for s in stages] == backbone.output_shapes((4, 8, 8))
        assert backbone.output_shapes((4, 8, 8)) == [(4, 4, 8, 8), (8, 2, 4, 4), (16, 1, 2, 2)]
        with pytest.raises(ConfigurationError):
            backbone.output_shapes((6, 8, 8))

    def test_logits_cover_the_grid(self, micro, rng):
        decoder = OccupancyDecoder(micro)
        logits = decoder(Tensor(rng.normal(size=(4, 4, 8, 8))), Tensor(rng.normal(size=(4, 4, 8, 8))))
        assert logits.shape == (5, 4, 8, 8)
        shapes = decoder.output_shapes((4, 8, 8), 5)
        assert shapes["logits"] == logits.shape and shapes["fused"] == (8, 4, 8, 8)

    def test_head_is_per_voxel(self, micro, rng):
        decoder = OccupancyDecoder(micro)
        volume = Tensor(rng.normal(size=(4, 4, 8, 8)))
        logits = decoder.head(volume).data
        features = decoder.head.conv(volume.reshape(1, 4, 4, 8, 8)).data[0]
        expected = decoder.head.mlp(Tensor(features[:, 2, 3, 5].reshape(1, -1))).data[0]
        np.testing.assert_allclose(logits[:, 2, 3, 5], expected, atol=1e-12)
