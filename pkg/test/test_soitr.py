import numpy as np

from ean.layers import Linear
from ean.modules.soitr import SOITR, SoiTrConfig, TransformerBlock, pool_objects, saliency_records
from ean.ops import cross_entropy
from ean.tensor import Graph, ShapeError, Tensor, backward, no_grad, precision
from . import NumericTest
from .fixtures import all_position_maps, fixed_region_maps, interactions_with_maps


class TestSoiTrConfig(NumericTest):
    def test_full_scale(self):
        cfg = SoiTrConfig(2048, 8, 7, 7)
        self.assertEqual(512, cfg.bottleneck_channels)
        self.assertEqual(64, cfg.saliency_channels)
        self.assertEqual(960, cfg.ff_hidden)
        self.assertEqual(32, cfg.num_tokens)

    def test_invalid(self):
        with self.assertRaises(ValueError):
            SoiTrConfig(36, 2, 3, 3)
        with self.assertRaises(ValueError):
            SoiTrConfig(32, 2, 3, 3, heads=3)


class TestSoiTr(NumericTest):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(4)

    def build(self, channels: int = 32, frames: int = 2, size: int = 3, **kwargs) -> SOITR:
        return SOITR('soitr@5', SoiTrConfig(channels, frames, size, size, **kwargs), np.random.default_rng(0))

    def randomize(self, soitr: SOITR, names, scale: float = 0.1) -> None:
        params = dict(soitr.named_parameters())
        for name in names:
            params[name].assign(self.rng.normal(0, scale, size=params[name].shape))

    def test_saliency_maps_are_distributions(self):
        soitr = self.build(channels=64, frames=4, size=5)
        for _ in range(4):
            trace = {}
            with no_grad():
                soitr.interactions(Tensor(self.rng.normal(size=(25, 64, 4, 5, 5))), trace)
            maps = trace['soitr@5']
            self.assertEqual((25, 4, 4, 5, 5), maps.shape)
            self.assertTrue(np.all(maps >= 0))
            self.assertAllClose(maps.sum(axis=(3, 4)), np.ones((25, 4, 4)), atol=1e-6)

    def test_constant_input_gives_uniform_maps(self):
        with precision('float64'):
            soitr = self.build()
            trace = {}
            with no_grad():
                soitr.interactions(Tensor(np.full((2, 32, 2, 3, 3), 0.7)), trace)
        self.assertAllClose(trace['soitr@5'], np.full((2, 4, 2, 3, 3), 1 / 9), rtol=1e-6)

    def test_pool_objects(self):
        x = self.rng.normal(size=(1, 8, 2, 3, 3))
        maps = np.zeros((1, 4, 2, 3, 3))
        sites = {}
        for n in range(4):
            for t in range(2):
                h, w = int(self.rng.integers(3)), int(self.rng.integers(3))
                maps[0, n, t, h, w] = 1.0
                sites[t * 4 + n] = (t, h, w)
        embedding = self.rng.normal(size=(2, 8, 3, 3))
        with no_grad():
            tokens = pool_objects(Tensor(x), Tensor(maps), Tensor(embedding)).data
        self.assertEqual((1, 8, 8), tokens.shape)
        for token, (t, h, w) in sites.items():
            self.assertAllClose(tokens[0, token], x[0, :, t, h, w] + embedding[t, :, h, w], rtol=1e-5, atol=1e-6)

    def test_shape_errors(self):
        x = Tensor(np.ones((1, 8, 2, 3, 3)))
        with self.assertRaises(ShapeError):
            pool_objects(x, Tensor(np.ones((1, 4, 2, 3, 4))), Tensor(np.ones((2, 8, 3, 3))))
        with self.assertRaises(ShapeError):
            pool_objects(x, Tensor(np.ones((1, 4, 2, 3, 3))), Tensor(np.ones((2, 4, 3, 3))))
        with self.assertRaises(ShapeError):
            self.build()(Tensor(np.ones((1, 32, 3, 3, 3))))

    def test_transparent_at_init(self):
        soitr = self.build()
        x = Tensor(self.rng.normal(size=(2, 32, 2, 3, 3)))
        with no_grad():
            self.assertTrue(np.array_equal(soitr.global_features(x).data, x.data.mean(axis=(2, 3, 4))))
            self.assertTrue(np.array_equal(soitr(x).data, x.data))

    def test_intermediate_output_averages_to_global_features(self):
        soitr = self.build().eval()
        self.randomize(soitr, ['up.weight', 'blocks.0.output.weight', 'blocks.1.ff2.weight'])
        x = Tensor(self.rng.normal(size=(2, 32, 2, 3, 3)))
        with no_grad():
            expected = soitr.global_features(x).data
            actual = soitr(x).data.mean(axis=(2, 3, 4))
        self.assertAllClose(actual, expected, rtol=1e-5, atol=1e-6)
        self.assertFalse(np.allclose(expected, x.data.mean(axis=(2, 3, 4))))

    def test_transformer_block_is_permutation_equivariant(self):
        with precision('float64'):
            block = TransformerBlock('block', 8, 4, 15, np.random.default_rng(2))
            for name in ('output', 'ff2'):
                getattr(block, name).weight.assign(self.rng.normal(0, 0.3, size=getattr(block, name).weight.shape))
            tokens = self.rng.normal(size=(2, 6, 8))
            perm = self.rng.permutation(6)
            with no_grad():
                out = block(Tensor(tokens)).data
                permuted = block(Tensor(tokens[:, perm])).data
            self.assertAllClose(permuted, out[:, perm], rtol=1e-10, atol=1e-12)

    def test_without_feed_forward(self):
        soitr = self.build(feed_forward=False)
        self.assertIsNone(soitr.blocks[0].ff1)
        self.assertLess(soitr.num_params(), self.build().num_params())
        with no_grad():
            self.assertEqual((1, 32), soitr.global_features(Tensor(np.ones((1, 32, 2, 3, 3)))).shape)

    def reduced_features(self, soitr: SOITR, x: Tensor) -> np.ndarray:
        """ Down-projected features plus positional embedding as [B, T, H, W, C'']. """
        with no_grad():
            reduced = soitr.down(x).data
        return (reduced + soitr.embedding.data.transpose(1, 0, 2, 3)).transpose(0, 2, 3, 4, 1)

    def test_fixed_regions(self):
        with precision('float64'):
            soitr = self.build(size=4)
            x = Tensor(self.rng.normal(size=(2, 32, 2, 4, 4)))
            maps = fixed_region_maps(2, 2, 4, 4)
            self.assertAllClose(maps.sum(axis=(3, 4)), np.ones((2, 4, 2)))
            with no_grad():
                pooled = pool_objects(soitr.down(x), Tensor(maps), soitr.embedding).data
            features = self.reduced_features(soitr, x)
            regions = [features[:, :, r:r + 2, c:c + 2].mean(axis=(2, 3)) for r in (0, 2) for c in (0, 2)]
            self.assertAllClose(pooled.reshape(2, 2, 4, 8), np.stack(regions, axis=2), rtol=1e-10)
            self.assertEqual((2, 8, 8), interactions_with_maps(soitr, x, maps).shape)

    def test_all_positions(self):
        with precision('float64'):
            soitr = self.build()
            x = Tensor(self.rng.normal(size=(2, 32, 2, 3, 3)))
            maps = all_position_maps(2, 2, 3, 3)
            with no_grad():
                pooled = pool_objects(soitr.down(x), Tensor(maps), soitr.embedding).data
            self.assertAllClose(pooled, self.reduced_features(soitr, x).reshape(2, 18, 8), rtol=1e-10)
            tokens = interactions_with_maps(soitr, x, maps)
            self.assertEqual((2, 18, 8), tokens.shape)
            self.assertEqual(soitr.cfg.num_tokens, soitr.interactions(x).shape[1])

    def test_classification_gradient_reaches_saliency(self):
        soitr = self.build()
        self.randomize(soitr, ['up.weight'])
        classifier = Linear('classifier', 32, 4, np.random.default_rng(1))
        x = Tensor(self.rng.normal(size=(4, 32, 2, 3, 3)))
        with Graph():
            backward(cross_entropy(classifier(soitr.global_features(x)), [0, 1, 2, 3]))
        for name in ('saliency.conv1.conv.weight', 'saliency.conv3.conv.weight', 'saliency.conv4.weight'):
            grad = dict(soitr.named_parameters())[name].grad
            self.assertIsNotNone(grad, name)
            self.assertGreater(float(np.linalg.norm(grad)), 0.0, name)

    def test_gradients(self):
        with precision('float64'):
            soitr = self.build()
            self.randomize(soitr, ['up.weight', 'blocks.0.output.weight', 'blocks.0.ff2.weight',
                                   'blocks.1.output.weight', 'blocks.1.ff2.weight'], scale=0.3)
            x = Tensor(self.rng.normal(size=(2, 32, 2, 3, 3)))
            target = Tensor(self.rng.normal(size=(2, 32)))
            params = dict(soitr.named_parameters())
            names = ['down.conv.weight', 'saliency.conv3.conv.weight', 'saliency.conv4.weight', 'embedding',
                     'blocks.0.query.weight', 'blocks.1.ff1.weight', 'up.weight']
            self.check_gradients(lambda: (soitr.global_features(x) * target).sum(), {n: params[n] for n in names},
                                 eps=1e-6, tolerance=1e-4)

    def test_saliency_records(self):
        maps = np.full((2, 4, 2, 3, 3), 1 / 9)
        records = saliency_records(maps, sample_ids=[5, 6], block='soitr@5')
        self.assertEqual(2 * 4 * 2, len(records))
        self.assertEqual({'sample_id', 'object_n', 'frame_t', 'map', 'block'}, set(records[0]))
        self.assertEqual(9, len(records[0]['map']))
        self.assertEqual((6, 3, 1), (records[-1]['sample_id'], records[-1]['object_n'], records[-1]['frame_t']))
