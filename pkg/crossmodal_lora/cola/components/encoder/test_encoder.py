import math
import unittest
from dataclasses import replace

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import erf

from ...utils.definitions import AdapterConfig, AdapterMode, EncoderConfig, Pooling
from ..adapters import AdaptedLinear
from ..custom_exceptions import ShapeError
from ..numcore import Tensor
from .encoder import (
    EncoderLayer,
    attention_weights,
    attn_stage,
    ffn_stage,
    frozen_forward,
    init_encoder,
    init_encoder_layer,
    layer_forward,
    out_proj_stage,
    pool,
)

ENCODER_CONFIG = EncoderConfig(d_model=8, d_ffn=16, n_layers=2, vocab_size=10, max_tokens=5)
ADAPTER_CONFIG = AdapterConfig(rank=2, gamma=2)


def random_tokens(rng: np.random.Generator, *shape: int) -> Tensor:
    """Hidden states of the encoder width filled with standard normal draws"""
    return Tensor(rng.standard_normal(shape + (ENCODER_CONFIG.d_model,)))


def randomize_layer(layer: EncoderLayer, rng: np.random.Generator, lam: float = 0.7) -> None:
    """Random B matrices, gates and norm affines, so every term of the layer is live"""
    for al in layer.components().values():
        al.lora.B.data[...] = 0.3 * rng.standard_normal(al.lora.B.shape)
        al.cola.B.data[...] = 0.3 * rng.standard_normal(al.cola.B.shape)
        al.set_lambda(lam)
    for tensor in layer.norms().values():
        tensor.data[...] += 0.2 * rng.standard_normal(tensor.shape)


def dense_norm(z: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = z.mean(axis=-1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=-1, keepdims=True)
    return (z - mu) / np.sqrt(var + eps) * gain + bias


def dense_gelu(z: np.ndarray) -> np.ndarray:
    return z * 0.5 * (1.0 + erf(z / np.sqrt(2.0)))


def dense_linear(al: AdaptedLinear, x: np.ndarray, xbar: np.ndarray) -> np.ndarray:
    """x·(W0 + dW)^T + b0 with both low-rank updates materialised, for one pooled vector"""
    hn = al.cola.hypernet
    z = dense_gelu(hn.W_down.data @ xbar + hn.b_down.data)
    z = dense_norm(z, hn.ln_inner_gain.data, hn.ln_inner_bias.data, hn.ln_eps)
    z = hn.W_up.data @ z + hn.b_up.data
    phi = dense_norm(z, hn.ln_outer_gain.data, hn.ln_outer_bias.data, hn.ln_eps)
    phi = phi.reshape(hn.rank, hn.rank)

    weight = al.W0.data + al.config.scaling * al.lora.B.data @ al.lora.A.data
    weight = weight + al.cola.lam.data * al.cola.B.data @ phi @ al.cola.A.data
    return x @ weight.T + al.b0.data


def dense_attention(layer: EncoderLayer, x: np.ndarray, xbar: np.ndarray) -> np.ndarray:
    """Pre-norm single-head attention over materialised weights"""
    h = dense_norm(x, layer.ln1_gain.data, layer.ln1_bias.data, layer.config.ln_eps)
    q, k, v = (dense_linear(al, h, xbar) for al in (layer.wq, layer.wk, layer.wv))
    scores = q @ k.T / np.sqrt(q.shape[-1])
    weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return (weights / weights.sum(axis=-1, keepdims=True)) @ v


def dense_ffn(layer: EncoderLayer, o: np.ndarray, xbar: np.ndarray) -> np.ndarray:
    """Pre-norm FFN plus residual over materialised weights"""
    h = dense_norm(o, layer.ln2_gain.data, layer.ln2_bias.data, layer.config.ln_eps)
    return dense_linear(layer.w_down, dense_gelu(dense_linear(layer.w_up, h, xbar)), xbar) + o


class TestEncoderLayer(unittest.TestCase):
    """One encoder layer and its stages"""

    def setUp(self) -> None:
        self.rng = np.random.default_rng(5)
        self.layer = init_encoder_layer(ENCODER_CONFIG, ADAPTER_CONFIG, d_c=8, seed=0)
        self.xbar = Tensor(self.rng.standard_normal(8))

    def test_attention_rows_sum_to_one(self) -> None:
        """Every attention row is a distribution over the keys"""
        q = Tensor(self.rng.standard_normal((6, 4)))
        k = Tensor(self.rng.standard_normal((6, 4)))
        weights = attention_weights(q, k).data

        assert_allclose(weights.sum(axis=-1), np.ones(6), atol=1e-12)
        self.assertTrue(np.all(weights >= 0.0))

    def test_single_token(self) -> None:
        """A one-token sequence attends to itself with weight one"""
        x = random_tokens(self.rng, 1)
        q = Tensor(self.rng.standard_normal((1, 4)))

        assert_array_equal(attention_weights(q, q).data, np.ones((1, 1)))
        self.assertEqual(layer_forward(self.layer, x, self.xbar).shape, (1, 8))

    def test_zero_init_matches_frozen_layer(self) -> None:
        """Fresh adapters leave the frozen layer's output untouched, pre- and post-norm"""
        for pre_norm in (True, False):
            config = replace(ENCODER_CONFIG, pre_norm=pre_norm)
            layer = init_encoder_layer(config, ADAPTER_CONFIG, d_c=8, seed=1)
            x = random_tokens(self.rng, 4)
            with self.subTest(pre_norm=pre_norm):
                assert_array_equal(
                    layer_forward(layer, x, self.xbar).data, frozen_forward(layer, x).data
                )

    def test_permutation_equivariance(self) -> None:
        """Without position rows the layer commutes with a token permutation"""
        x = random_tokens(self.rng, 5)
        order = np.array([3, 0, 4, 1, 2])

        permuted = layer_forward(self.layer, Tensor(x.data[order]), self.xbar).data
        assert_allclose(permuted, layer_forward(self.layer, x, self.xbar).data[order], atol=1e-12)

    def test_lora_only_needs_no_cross_features(self) -> None:
        """A layer without inter-modal pathways runs without pooled features"""
        layer = init_encoder_layer(
            ENCODER_CONFIG, AdapterMode.LORA_ONLY.apply(ADAPTER_CONFIG), d_c=8, seed=0
        )
        self.assertEqual(layer_forward(layer, random_tokens(self.rng, 3), None).shape, (3, 8))

    def test_width_mismatch(self) -> None:
        """Inputs of the wrong width are rejected"""
        with self.assertRaises(ShapeError):
            attn_stage(self.layer, Tensor(np.ones((3, 7))), self.xbar)

    def test_six_injection_points(self) -> None:
        """Components are listed in forward order with their shapes"""
        shapes = {name: al.W0.shape for name, al in self.layer.components().items()}
        self.assertEqual(
            shapes,
            {"q": (8, 8), "k": (8, 8), "v": (8, 8), "o": (8, 8), "up": (16, 8), "down": (8, 16)},
        )


class TestStageValues(unittest.TestCase):
    """Stage outputs against hand and dense numpy computations"""

    def setUp(self) -> None:
        self.rng = np.random.default_rng(17)
        self.layer = init_encoder_layer(ENCODER_CONFIG, ADAPTER_CONFIG, d_c=8, seed=3)
        randomize_layer(self.layer, self.rng)
        self.xbar = self.rng.standard_normal(8)

    def test_two_token_attention_by_hand(self) -> None:
        """Identity tokens through hand-set q, k and v give closed-form attention rows"""
        config = EncoderConfig(d_model=2, d_ffn=2, n_layers=1, pre_norm=False)
        layer = init_encoder_layer(config, AdapterMode.FROZEN.apply(ADAPTER_CONFIG), d_c=2, seed=0)
        weights = {
            "q": [[1.0, 0.0], [0.0, 2.0]],
            "k": [[1.0, 0.0], [0.0, 1.0]],
            "v": [[1.0, 2.0], [3.0, 4.0]],
        }
        for name, values in weights.items():
            al = layer.components()[name]
            al.W0.data[...] = values
            al.b0.data[...] = 0.0

        # q = diag(1, 2), k = I, v rows (1, 3) and (2, 4); scores are scaled by 1/sqrt(2)
        w0 = math.exp(1.0 / math.sqrt(2.0)) / (math.exp(1.0 / math.sqrt(2.0)) + 1.0)
        w1 = 1.0 / (1.0 + math.exp(2.0 / math.sqrt(2.0)))
        expected = np.array([
            [w0 * 1.0 + (1.0 - w0) * 2.0, w0 * 3.0 + (1.0 - w0) * 4.0],
            [w1 * 1.0 + (1.0 - w1) * 2.0, w1 * 3.0 + (1.0 - w1) * 4.0],
        ])

        a = attn_stage(layer, Tensor(np.eye(2)), None)
        assert_allclose(a.data, expected, rtol=1e-12, atol=0)

    def test_attention_matches_dense(self) -> None:
        """attn_stage equals the materialised pre-norm attention"""
        x = self.rng.standard_normal((5, 8))
        a = attn_stage(self.layer, Tensor(x), Tensor(self.xbar))

        assert_allclose(a.data, dense_attention(self.layer, x, self.xbar), rtol=1e-10, atol=1e-10)

    def test_out_proj_matches_dense(self) -> None:
        """out_proj_stage equals wo(a) + x with the adapters materialised"""
        a = self.rng.standard_normal((5, 8))
        residual = self.rng.standard_normal((5, 8))
        o = out_proj_stage(self.layer, Tensor(a), Tensor(self.xbar), Tensor(residual))

        expected = dense_linear(self.layer.wo, a, self.xbar) + residual
        assert_allclose(o.data, expected, rtol=1e-10, atol=1e-10)

    def test_ffn_matches_dense(self) -> None:
        """ffn_stage equals w_down(gelu(w_up(LN(o)))) + o with the adapters materialised"""
        o = self.rng.standard_normal((5, 8))
        x_next = ffn_stage(self.layer, Tensor(o), Tensor(self.xbar))

        assert_allclose(x_next.data, dense_ffn(self.layer, o, self.xbar), rtol=1e-10, atol=1e-10)

    def test_out_proj_passes_residual(self) -> None:
        """Zero attention output through a zero-init wo returns the residual plus the frozen bias"""
        layer = init_encoder_layer(ENCODER_CONFIG, ADAPTER_CONFIG, d_c=8, seed=4)
        residual = self.rng.standard_normal((3, 8))
        o = out_proj_stage(layer, Tensor(np.zeros((3, 8))), Tensor(self.xbar), Tensor(residual))

        assert_array_equal(o.data, layer.wo.b0.data + residual)


class TestPooling(unittest.TestCase):
    """Token pooling"""

    def test_mean_and_cls(self) -> None:
        """Mean pooling averages tokens, class pooling returns row 0"""
        x = Tensor(np.arange(12.0).reshape(2, 3, 2))

        assert_array_equal(pool(x, Pooling.MEAN).data, np.array([[2.0, 3.0], [8.0, 9.0]]))
        assert_array_equal(pool(x, "cls").data, np.array([[0.0, 1.0], [6.0, 7.0]]))

    def test_requires_tokens(self) -> None:
        """Pooling zero tokens is a ShapeError"""
        with self.assertRaises(ShapeError):
            pool(Tensor(np.zeros((0, 4))))


class TestEncoder(unittest.TestCase):
    """Embedding and the full stack"""

    def setUp(self) -> None:
        self.encoder = init_encoder(ENCODER_CONFIG, ADAPTER_CONFIG, d_c=8, seed=2)

    def test_embed_shape(self) -> None:
        """Token ids [B, N] embed to [B, N, d_model]"""
        tokens = np.array([[1, 2, 3], [4, 5, 9]])
        self.assertEqual(self.encoder.embed(tokens).shape, (2, 3, 8))

    def test_embed_length_bounds(self) -> None:
        """Empty and over-long sequences are rejected, as are unknown ids"""
        with self.assertRaises(ShapeError):
            self.encoder.embed(np.zeros((2, 0), dtype=int))
        with self.assertRaises(ShapeError):
            self.encoder.embed(np.zeros((2, 6), dtype=int))
        with self.assertRaises(ShapeError):
            self.encoder.embed(np.array([[10]]))

    def test_adapted_linears(self) -> None:
        """Two layers give twelve adapted linears with their layer index"""
        linears = self.encoder.adapted_linears()

        self.assertEqual(len(linears), 12)
        self.assertEqual([(i, name) for i, name, _ in linears[:2]], [(0, "q"), (0, "k")])
        self.assertEqual(linears[-1][:2], (1, "down"))

    def test_same_seed_same_encoder(self) -> None:
        """Initialisation is a function of the seed"""
        other = init_encoder(ENCODER_CONFIG, ADAPTER_CONFIG, d_c=8, seed=2)
        assert_array_equal(other.token_table.data, self.encoder.token_table.data)
        assert_array_equal(other.layers[1].w_down.W0.data, self.encoder.layers[1].w_down.W0.data)
