"""
Tests for the frozen transformer encoder
"""

import os
import pickle
import shutil
import tempfile
import unittest

import numpy as np

from feddpg.encoder import FrozenEncoder, init_encoder_params, pretrain_backbone
from feddpg.errors import ContractError, InputError, LengthError, VocabularyError
from feddpg.generator import init_generator
from feddpg.tensor import Tensor, backward

from test_utils import make_dataset, make_encoder, make_tiny_model, tiny_encoder_config


class TestEmbedding(unittest.TestCase):
    """Token and positional embeddings"""

    def setUp(self):
        self.encoder = make_encoder()

    def test_zero_table_leaves_positional_row(self):
        cfg = tiny_encoder_config()
        encoder = make_encoder(arrays={"tok_emb": np.zeros((cfg.vocab_size, cfg.d_e))})
        pos = encoder.params["pos_emb"].data
        np.testing.assert_array_equal(encoder.embed([5]).data, pos[[0]])
        np.testing.assert_array_equal(encoder.embed([5], offset=2).data, pos[[2]])

    def test_identical_tokens_differ_by_positional_rows(self):
        rows = self.encoder.embed([3, 3]).data
        pos = self.encoder.params["pos_emb"].data
        np.testing.assert_allclose(rows[1] - rows[0], pos[1] - pos[0], atol=1e-12)

    def test_invalid_inputs(self):
        with self.assertRaises(VocabularyError):
            self.encoder.embed([self.encoder.config.vocab_size])
        with self.assertRaises(InputError):
            self.encoder.embed([])
        with self.assertRaises(LengthError):
            self.encoder.embed([1] * 10, offset=self.encoder.config.max_len - 5)


class TestEncodeClassify(unittest.TestCase):
    """Encoding an embedding sequence into class logits"""

    def setUp(self):
        self.encoder = make_encoder(seed=1)
        self.d_e = self.encoder.config.d_e

    def test_single_position_attends_to_itself(self):
        h = Tensor(np.random.default_rng(0).normal(size=(1, 1, self.d_e)))
        out, weights = self.encoder.self_attention(h, 0, np.ones((1, 1), dtype=bool))
        np.testing.assert_array_equal(weights.data, np.ones((1, 2, 1, 1)))
        p = self.encoder.params
        value = h.data @ p["layers.0.attn.wv"].data + p["layers.0.attn.bv"].data
        expected = value @ p["layers.0.attn.wo"].data + p["layers.0.attn.bo"].data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_logits_shape_and_finiteness(self):
        z = self.encoder.embed([1, 2, 3])
        logits = self.encoder.encode_classify(z)
        self.assertEqual(logits.shape, (self.encoder.config.num_classes,))
        self.assertTrue(np.all(np.isfinite(logits.data)))

    def test_position_sensitivity(self):
        a = self.encoder.encode_classify(self.encoder.embed([4, 9])).data
        b = self.encoder.encode_classify(self.encoder.embed([9, 4])).data
        self.assertGreater(np.abs(a - b).max(), 1e-9)

    def test_too_long(self):
        z = Tensor(np.zeros((self.encoder.config.max_len + 1, self.d_e)))
        with self.assertRaises(LengthError):
            self.encoder.encode_classify(z)


class TestFrozenContract(unittest.TestCase):
    """Frozen parameters never change and take no gradient"""

    def test_frozen_tensors(self):
        encoder = make_encoder()
        self.assertTrue(encoder.frozen)
        for t in encoder.parameters():
            self.assertFalse(t.requires_grad)
            with self.assertRaises(ValueError):
                t.data[...] = 0.0

    def test_gradients_reach_prompts_not_encoder(self):
        model = make_tiny_model()
        params = init_generator(model.cfg, 0)
        data = make_dataset(6)
        ids, mask = data.arrays()
        digest = model.encoder.digest()
        loss, _ = model.forward_loss(params, ids, mask, data.label_array)
        backward(loss)
        self.assertTrue(any(np.any(t.grad != 0) for t in params))
        self.assertTrue(all(t.grad is None for t in model.encoder.parameters()))
        self.assertEqual(model.encoder.digest(), digest)

    def test_pickle_keeps_frozen_state(self):
        encoder = make_encoder()
        clone = pickle.loads(pickle.dumps(encoder))
        self.assertTrue(clone.frozen)
        self.assertEqual(clone.digest(), encoder.digest())


class TestPretraining(unittest.TestCase):
    """Pretext training of the backbone"""

    def setUp(self):
        self.config = tiny_encoder_config(backbone="pretrained")
        self.task = make_dataset(200, seed=5, signal_rate=1.0)

    def test_zero_steps_keeps_initialization(self):
        encoder, history = pretrain_backbone(self.config, self.task, steps=0, lr=0.1, seed=3)
        self.assertEqual(history, [])
        reference = init_encoder_params(self.config, 3)
        reference.freeze()
        self.assertEqual(encoder.digest(), reference.digest())
        self.assertTrue(encoder.frozen)

    def test_same_seed_is_bit_identical(self):
        a, _ = pretrain_backbone(self.config, self.task, steps=5, lr=0.1, seed=3)
        b, _ = pretrain_backbone(self.config, self.task, steps=5, lr=0.1, seed=3)
        self.assertEqual(a.digest(), b.digest())

    def test_loss_decreases_on_separable_task(self):
        _, history = pretrain_backbone(self.config, self.task, steps=60, lr=0.1, seed=3)
        self.assertLess(np.mean(history[-10:]), np.mean(history[:10]))

    def test_class_count_must_match(self):
        task = make_dataset(20, num_classes=4)
        with self.assertRaises(ContractError):
            pretrain_backbone(self.config, task, steps=1, lr=0.1, seed=0)


class TestEncoderFiles(unittest.TestCase):
    """Saving and loading the frozen backbone"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_save_and_load(self):
        encoder = make_encoder(seed=2)
        path = os.path.join(self.test_dir, "encoder.fdpg")
        encoder.save(path)
        loaded = FrozenEncoder.load(path, encoder.config)
        self.assertTrue(loaded.frozen)
        self.assertEqual(loaded.digest(), encoder.digest())

    def test_generator_file_rejected(self):
        model = make_tiny_model()
        path = os.path.join(self.test_dir, "generator.fdpg")
        init_generator(model.cfg, 0).save(path)
        with self.assertRaises(ContractError):
            FrozenEncoder.load(path, model.encoder.config)


if __name__ == "__main__":
    unittest.main()
