"""
Frozen transformer encoder classifier

A small pre-norm transformer stands in for the pre-trained language model.
It embeds token ids, encodes a (prompt-prepended) embedding sequence and
returns class logits. Once frozen its parameters are read-only: they take no
gradient and their numpy buffers reject writes.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from feddpg.config import EncoderConfig
from feddpg.data import TokenizedDataset
from feddpg.errors import ContractError, DimensionError, InputError, LengthError, VocabularyError
from feddpg.serialization import load_params, params_digest, save_params
from feddpg.tensor import (
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    gather_rows,
    gelu,
    layer_norm,
    masked_mean,
    matmul,
    mul,
    reshape,
    softmax_rows,
    transpose,
    zero_grad,
)

logger = logging.getLogger(__name__)

ENCODER_KIND = "encoder"


@dataclass
class EncoderParams:
    """Named encoder tensors in a fixed order"""

    tensors: Dict[str, Tensor]
    frozen: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def digest(self) -> str:
        return params_digest(self.tensors, ENCODER_KIND)

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        self.frozen = True

    def __getstate__(self):
        return {"arrays": {k: t.data for k, t in self.tensors.items()}, "frozen": self.frozen}

    def __setstate__(self, state):
        self.tensors = {k: Tensor(v) for k, v in state["arrays"].items()}
        self.frozen = False
        if state["frozen"]:
            self.freeze()


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Seeded initialization; returns trainable (unfrozen) parameters"""
    rng = np.random.default_rng([seed, 0xE4C0])
    d, f = config.d_e, config.d_ff
    arrays: Dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, 1.0, size=(config.vocab_size, d)),
        "pos_emb": rng.normal(0.0, 0.1, size=(config.max_len, d)),
    }
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        arrays[p + "ln1.gain"] = np.ones(d)
        arrays[p + "ln1.bias"] = np.zeros(d)
        for proj in ("wq", "wk", "wv", "wo"):
            arrays[p + f"attn.{proj}"] = _uniform(rng, d, (d, d))
            arrays[p + f"attn.b{proj[1]}"] = np.zeros(d)
        arrays[p + "ln2.gain"] = np.ones(d)
        arrays[p + "ln2.bias"] = np.zeros(d)
        arrays[p + "ffn.w1"] = _uniform(rng, d, (d, f))
        arrays[p + "ffn.b1"] = np.zeros(f)
        arrays[p + "ffn.w2"] = _uniform(rng, f, (f, d))
        arrays[p + "ffn.b2"] = np.zeros(d)
    arrays["ln_f.gain"] = np.ones(d)
    arrays["ln_f.bias"] = np.zeros(d)
    arrays["head.w"] = _uniform(rng, d, (d, config.num_classes))
    arrays["head.b"] = np.zeros(config.num_classes)
    return EncoderParams({k: Tensor(v, requires_grad=True) for k, v in arrays.items()})


class FrozenEncoder:
    """
    Transformer classifier: embed → L pre-norm layers → final norm → masked mean-pool → head

    Pooling averages every non-pad position, prompts included.
    """

    def __init__(self, config: EncoderConfig, params: EncoderParams):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int, freeze: bool = True) -> "FrozenEncoder":
        encoder = cls(config, init_encoder_params(config, seed))
        if freeze:
            encoder.freeze()
        return encoder

    @property
    def frozen(self) -> bool:
        return self.params.frozen

    def freeze(self) -> None:
        self.params.freeze()

    def digest(self) -> str:
        return self.params.digest()

    def parameters(self) -> List[Tensor]:
        return list(self.params)

    # Embedding

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            bad = int(ids.max()) if ids.max() >= self.config.vocab_size else int(ids.min())
            raise VocabularyError(f"token id {bad} outside vocabulary {self.config.vocab_size}")

    def embed(self, tokens: Sequence[int], offset: int = 0) -> Tensor:
        """
        Token + positional embeddings for one sequence, shape [n, d_e]

        ``offset`` is the number of prompt rows that will precede the tokens;
        token i uses positional row ``offset + i``.
        """
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise InputError("cannot embed an empty sequence")
        return reshape(self.embed_batch(ids[None, :], offset), (ids.size, self.config.d_e))

    def embed_batch(self, ids: np.ndarray, offset: int = 0) -> Tensor:
        """
        Embeddings for an id matrix [B, n] → [B, n, d_e]

        Prompt rows occupy positions 0..offset-1 but receive no positional
        embedding: the generator emits them in embedding space directly and can
        absorb any fixed positional term into its output bias. Adding
        ``pos_emb[0:offset]`` would only shift that bias. Tokens start at row
        ``offset`` so their positions match the layout of [P; x].
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise InputError(f"expected a non-empty [batch, length] id matrix, got {ids.shape}")
        self._check_ids(ids)
        if offset + ids.shape[1] > self.config.max_len:
            raise LengthError(
                f"{offset} prompts + {ids.shape[1]} tokens exceed max_len {self.config.max_len}"
            )
        positions = np.arange(offset, offset + ids.shape[1])
        return add(
            gather_rows(self.params["tok_emb"], ids),
            gather_rows(self.params["pos_emb"], positions),
        )

    # Encoding

    def self_attention(
        self, h: Tensor, layer: int, key_mask: np.ndarray
    ) -> Tuple[Tensor, Tensor]:
        """Multi-head self-attention on [B, m, d]; returns (output, weights [B, H, m, m])"""
        p = f"layers.{layer}.attn."
        batch, m, d = h.shape
        heads = self.config.num_heads
        dh = d // heads

        def split(t: Tensor) -> Tensor:
            return transpose(reshape(t, (batch, m, heads, dh)), (0, 2, 1, 3))

        q = split(add(matmul(h, self.params[p + "wq"]), self.params[p + "bq"]))
        k = split(add(matmul(h, self.params[p + "wk"]), self.params[p + "bk"]))
        v = split(add(matmul(h, self.params[p + "wv"]), self.params[p + "bv"]))
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), Tensor(1.0 / math.sqrt(dh)))
        weights = softmax_rows(scores, mask=key_mask[:, None, None, :])
        context = transpose(matmul(weights, v), (0, 2, 1, 3))
        merged = reshape(context, (batch, m, d))
        out = add(matmul(merged, self.params[p + "wo"]), self.params[p + "bo"])
        return out, weights

    def _layer(self, h: Tensor, layer: int, mask: np.ndarray) -> Tensor:
        p = f"layers.{layer}."
        normed = layer_norm(h, self.params[p + "ln1.gain"], self.params[p + "ln1.bias"])
        attn, _ = self.self_attention(normed, layer, mask)
        h = add(h, attn)
        normed = layer_norm(h, self.params[p + "ln2.gain"], self.params[p + "ln2.bias"])
        ff = gelu(add(matmul(normed, self.params[p + "ffn.w1"]), self.params[p + "ffn.b1"]))
        ff = add(matmul(ff, self.params[p + "ffn.w2"]), self.params[p + "ffn.b2"])
        return add(h, ff)

    def encode_batch(self, z: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """Logits [B, K] for embedding sequences z [B, m, d_e]; ``mask`` marks real positions"""
        if z.ndim != 3 or z.shape[2] != self.config.d_e:
            raise DimensionError(
                f"expected z of shape [B, m, {self.config.d_e}], got {list(z.shape)}"
            )
        batch, m, _ = z.shape
        if m > self.config.max_len:
            raise LengthError(f"sequence of {m} rows exceeds max_len {self.config.max_len}")
        if m == 0:
            raise InputError("cannot encode an empty sequence")
        mask = np.ones((batch, m), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        h = z
        for layer in range(self.config.num_layers):
            h = self._layer(h, layer, mask)
        h = layer_norm(h, self.params["ln_f.gain"], self.params["ln_f.bias"])
        pooled = masked_mean(h, mask)
        return add(matmul(pooled, self.params["head.w"]), self.params["head.b"])

    def encode_classify(self, z: Tensor) -> Tensor:
        """Logits [K] for a single embedding sequence z [m, d_e]"""
        if z.ndim != 2:
            raise DimensionError(f"expected z of shape [m, d_e], got {list(z.shape)}")
        logits = self.encode_batch(reshape(z, (1,) + z.shape))
        return reshape(logits, (self.config.num_classes,))

    # Persistence

    def save(self, path: Union[str, Path]) -> int:
        return save_params(path, self.params.tensors, ENCODER_KIND)

    @classmethod
    def load(cls, path: Union[str, Path], config: EncoderConfig) -> "FrozenEncoder":
        kind, arrays = load_params(path)
        if kind != ENCODER_KIND:
            raise ContractError(f"{path} holds {kind} parameters, not an encoder")
        expected = init_encoder_params(config, seed=0).tensors
        for name, tensor in expected.items():
            if name not in arrays or arrays[name].shape != tensor.shape:
                raise DimensionError(f"{path}: tensor {name} does not match the encoder config")
        encoder = cls(config, EncoderParams({k: Tensor(arrays[k]) for k in expected}))
        encoder.freeze()
        return encoder


def pretrain_backbone(
    config: EncoderConfig,
    task: TokenizedDataset,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 16,
    show_progress: bool = False,
) -> Tuple[FrozenEncoder, List[float]]:
    """
    Train the encoder on a pretext task with plain gradient descent, then freeze it

    Minimizes the batch-mean cross-entropy on random minibatches. Returns the
    frozen encoder and the per-step loss history.
    """
    if task.num_classes != config.num_classes:
        raise ContractError(
            f"pretext task has {task.num_classes} classes, encoder head has {config.num_classes}"
        )
    if len(task) == 0 and steps > 0:
        raise InputError("pretext task is empty")
    encoder = FrozenEncoder.initialize(config, seed, freeze=False)
    params = encoder.parameters()
    ids, mask = task.arrays()
    if ids.shape[1] > config.max_len:
        ids, mask = ids[:, : config.max_len], mask[:, : config.max_len]
    labels = task.label_array
    rng = np.random.default_rng([seed, 0xB00])

    history: List[float] = []
    for _ in tqdm(range(steps), desc="pretrain", disable=not show_progress):
        batch = rng.choice(len(task), size=min(batch_size, len(task)), replace=False)
        logits = encoder.encode_batch(encoder.embed_batch(ids[batch]), mask[batch])
        loss = mul(cross_entropy(logits, labels[batch]), Tensor(1.0 / len(batch)))
        record = backward(loss)
        for p in params:
            if p.grad is not None:
                p.data -= lr * p.grad
        record.clear()
        zero_grad(params)
        history.append(loss.item())

    encoder.freeze()
    if history:
        logger.info(
            f"Pretrained backbone for {steps} steps: loss {history[0]:.4f} -> {history[-1]:.4f}"
        )
    return encoder, history
