"""
Dynamic prompt generator

The generator G is a two-layer MLP mapping the mean embedding ē of an input
to a flat vector of d_e·|P| values, reshaped row-major into |P| prompt rows
that are prepended to the input embeddings before the frozen encoder. The
static-prompt baseline replaces G with one trainable [|P|, d_e] matrix shared
by every input.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np

from feddpg.config import GeneratorConfig
from feddpg.encoder import FrozenEncoder
from feddpg.errors import ConfigError, ContractError, DimensionError, InputError
from feddpg.serialization import (
    load_params,
    params_digest,
    save_params,
    serialize_params,
    serialized_size,
)
from feddpg.tensor import (
    ACTIVATIONS,
    Tensor,
    add,
    concat,
    cross_entropy,
    masked_mean,
    matmul,
    no_grad,
    reshape,
    slice_axis,
)

logger = logging.getLogger(__name__)

GENERATOR_KIND = "generator"

MLP_PARAM_NAMES = ("w1", "b1", "w2", "b2")
STATIC_PARAM_NAMES = ("prompts",)


def param_count(cfg: GeneratorConfig) -> int:
    """
    Number of trainable values in θ_P

    MLP: d_e·h + h + h·d_e·|P| + d_e·|P|; static prompts: |P|·d_e.
    """
    if cfg.d_e is None:
        raise ContractError("generator d_e is not set")
    if cfg.hidden < 1:
        raise ConfigError("generator hidden width must be at least 1")
    if cfg.input_mode == "static_prompt":
        return cfg.prompt_len * cfg.d_e
    d_out = cfg.d_e * cfg.prompt_len
    return cfg.d_e * cfg.hidden + cfg.hidden + cfg.hidden * d_out + d_out


@dataclass
class GeneratorParams:
    """θ_P: the only tensors that are ever trained or transmitted"""

    tensors: Dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    @property
    def is_static(self) -> bool:
        return "prompts" in self.tensors

    def structure(self) -> Tuple[Tuple[str, Tuple[int, ...]], ...]:
        return tuple((name, t.shape) for name, t in self.tensors.items())

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "GeneratorParams":
        return cls({name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()})

    def copy(self) -> "GeneratorParams":
        """Independent value copy (no shared buffers, no gradients)"""
        return GeneratorParams.from_arrays(self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()])

    def num_values(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def serialize(self) -> bytes:
        return serialize_params(self.tensors, GENERATOR_KIND)

    def serialized_size(self) -> int:
        return serialized_size(self.tensors, GENERATOR_KIND)

    def digest(self) -> str:
        return params_digest(self.tensors, GENERATOR_KIND)

    def save(self, path: Union[str, Path]) -> int:
        return save_params(path, self.tensors, GENERATOR_KIND)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GeneratorParams":
        kind, arrays = load_params(path)
        if kind != GENERATOR_KIND:
            raise ContractError(f"{path} holds {kind} parameters, not a generator")
        names = set(arrays)
        if names != set(MLP_PARAM_NAMES) and names != set(STATIC_PARAM_NAMES):
            raise DimensionError(f"{path}: unexpected generator tensors {sorted(names)}")
        logger.debug(f"Loaded generator from {path}")
        return cls.from_arrays(arrays)

    def infer_config(self, base: GeneratorConfig) -> GeneratorConfig:
        """Generator settings implied by the tensor shapes, other fields from ``base``"""
        if self.is_static:
            prompt_len, d_e = self["prompts"].shape
            return replace(base, prompt_len=prompt_len, d_e=d_e, input_mode="static_prompt")
        d_e, hidden = self["w1"].shape
        if self["w2"].shape[1] % d_e:
            raise DimensionError(f"generator output width is not a multiple of d_e={d_e}")
        mode = "prompt_and_text" if base.input_mode == "static_prompt" else base.input_mode
        return replace(
            base,
            hidden=hidden,
            prompt_len=self["w2"].shape[1] // d_e,
            d_e=d_e,
            input_mode=mode,
        )

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def bit_equal(self, other: "GeneratorParams") -> bool:
        if self.structure() != other.structure():
            return False
        return all(
            np.array_equal(a.data, other.tensors[name].data)
            for name, a in self.tensors.items()
        )

    def __getstate__(self):
        return {"arrays": {k: t.data for k, t in self.tensors.items()}}

    def __setstate__(self, state):
        self.tensors = {k: Tensor(v, requires_grad=True) for k, v in state["arrays"].items()}


def init_generator(cfg: GeneratorConfig, seed: int) -> GeneratorParams:
    """Uniform(±1/√fan_in) initialization, seeded"""
    if cfg.d_e is None:
        raise ContractError("generator d_e is not set")
    rng = np.random.default_rng([seed, 0x6E7])
    d, h, n_out = cfg.d_e, cfg.hidden, cfg.d_e * cfg.prompt_len
    if cfg.input_mode == "static_prompt":
        bound = 1.0 / np.sqrt(d)
        return GeneratorParams.from_arrays(
            {"prompts": rng.uniform(-bound, bound, size=(cfg.prompt_len, d))}
        )
    b1, b2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)
    return GeneratorParams.from_arrays(
        {
            "w1": rng.uniform(-b1, b1, size=(d, h)),
            "b1": rng.uniform(-b1, b1, size=(h,)),
            "w2": rng.uniform(-b2, b2, size=(h, n_out)),
            "b2": rng.uniform(-b2, b2, size=(n_out,)),
        }
    )


@dataclass
class PromptSet:
    """Prompt rows P, shape [|P|, d_e] (or [B, |P|, d_e] for a batch)"""

    prompts: Tensor

    @property
    def length(self) -> int:
        return self.prompts.shape[-2]


def mean_embedding(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    ē: average of the non-pad rows of x

    x: [n, d_e] → [d_e], or [B, n, d_e] → [B, d_e]; ``mask`` flags real rows.
    """
    if x.ndim not in (2, 3):
        raise DimensionError(f"mean_embedding expects [n, d] or [B, n, d], got {list(x.shape)}")
    if x.shape[-2] == 0:
        raise InputError("cannot average an empty sequence")
    keep = np.ones(x.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return masked_mean(x, keep)


def generate(params: GeneratorParams, e_bar: Tensor, cfg: GeneratorConfig) -> PromptSet:
    """
    P = reshape(act(ē·W1 + b1)·W2 + b2) into [|P|, d_e], row-major

    Static-prompt parameters ignore ē and return the shared prompt matrix.
    """
    if params.is_static:
        return PromptSet(params["prompts"])
    if not np.all(np.isfinite(e_bar.data)):
        raise InputError("mean embedding is not finite")
    single = e_bar.ndim == 1
    e = reshape(e_bar, (1, e_bar.shape[0])) if single else e_bar
    hidden = ACTIVATIONS[cfg.activation](add(matmul(e, params["w1"]), params["b1"]))
    flat = add(matmul(hidden, params["w2"]), params["b2"])
    if flat.shape[-1] != cfg.d_out:
        raise DimensionError(f"generator output {flat.shape[-1]} != d_e·|P| = {cfg.d_out}")
    shape = (cfg.prompt_len, cfg.d_e) if single else (e.shape[0], cfg.prompt_len, cfg.d_e)
    return PromptSet(reshape(flat, shape))


def compose(
    prompts: Optional[PromptSet],
    x: Tensor,
    mode: str,
    max_len: Optional[int] = None,
) -> Tensor:
    """
    Build the encoder input z for one sequence

    prompt_and_text / static_prompt: [P; x]; text_only: x; prompt_only: P.
    When |P| + n exceeds ``max_len`` the tail of x is dropped, never a prompt.
    """
    if mode == "text_only":
        if max_len is not None and x.shape[0] > max_len:
            return slice_axis(x, max_len)
        return x
    if prompts is None:
        raise ContractError(f"input mode {mode!r} needs prompts")
    if mode == "prompt_only":
        return prompts.prompts
    if mode not in ("prompt_and_text", "static_prompt"):
        raise ContractError(f"unknown input mode {mode!r}")
    if max_len is not None:
        room = max_len - prompts.length
        if room < 1:
            raise ContractError(f"{prompts.length} prompts leave no room in max_len {max_len}")
        if x.shape[0] > room:
            x = slice_axis(x, room)
    return concat([prompts.prompts, x], axis=0)


class PromptedClassifier:
    """
    The full FedDPG forward path around a frozen encoder

    Only ``GeneratorParams`` passed to its methods can receive gradients.
    """

    def __init__(self, encoder: FrozenEncoder, cfg: GeneratorConfig):
        if cfg.d_e != encoder.config.d_e:
            raise ConfigError(f"generator d_e {cfg.d_e} != encoder d_e {encoder.config.d_e}")
        self.encoder = encoder
        self.cfg = cfg
        self.mode = cfg.input_mode

    @property
    def prompt_offset(self) -> int:
        return 0 if self.mode == "text_only" else self.cfg.prompt_len

    def text_capacity(self) -> int:
        return self.encoder.config.max_len - self.prompt_offset

    def logits_batch(self, params: GeneratorParams, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Class logits [B, K] for an id matrix and its real-position mask"""
        ids = np.asarray(ids)
        mask = np.asarray(mask, dtype=bool)
        capacity = self.text_capacity()
        if ids.shape[1] > capacity:
            ids, mask = ids[:, :capacity], mask[:, :capacity]
        x = self.encoder.embed_batch(ids, offset=self.prompt_offset)
        if self.mode == "text_only":
            return self.encoder.encode_batch(x, mask)

        batch = ids.shape[0]
        if params.is_static:
            zeros = Tensor(np.zeros((batch, self.cfg.prompt_len, self.cfg.d_e)))
            prompts = add(zeros, params["prompts"])
        else:
            prompts = generate(params, mean_embedding(x, mask), self.cfg).prompts

        prompt_mask = np.ones((batch, self.cfg.prompt_len), dtype=bool)
        if self.mode == "prompt_only":
            return self.encoder.encode_batch(prompts, prompt_mask)
        z = concat([prompts, x], axis=1)
        return self.encoder.encode_batch(z, np.concatenate([prompt_mask, mask], axis=1))

    def forward_loss(
        self, params: GeneratorParams, ids: np.ndarray, mask: np.ndarray, labels: np.ndarray
    ) -> Tuple[Tensor, int]:
        """Summed cross-entropy over the batch and the number of correct argmax predictions"""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ContractError("forward_loss needs a non-empty batch")
        logits = self.logits_batch(params, ids, mask)
        correct = int(np.sum(np.argmax(logits.data, axis=1) == labels))
        return cross_entropy(logits, labels), correct

    def predict(
        self, params: GeneratorParams, ids: np.ndarray, mask: np.ndarray, batch_size: int = 256
    ) -> np.ndarray:
        """Argmax class per sample; ties go to the lowest class index"""
        preds = []
        with no_grad():
            for start in range(0, ids.shape[0], batch_size):
                end = start + batch_size
                logits = self.logits_batch(params, ids[start:end], mask[start:end])
                preds.append(np.argmax(logits.data, axis=1))
        if not preds:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(preds)

    def prompts_for(self, params: GeneratorParams, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Generated prompts [B, |P|, d_e] for a batch (no recording)"""
        with no_grad():
            if params.is_static:
                zeros = np.zeros((ids.shape[0], self.cfg.prompt_len, self.cfg.d_e))
                return Tensor(zeros + params["prompts"].data)
            x = self.encoder.embed_batch(ids, offset=self.prompt_offset)
            return generate(params, mean_embedding(x, mask), self.cfg).prompts


def sgd_step(params: GeneratorParams, lr: float) -> GeneratorParams:
    """θ ← θ − lr·grad for every tensor with a gradient, then clear gradients"""
    for t in params:
        if t.grad is not None:
            t.data = t.data - lr * t.grad
    params.zero_grad()
    return params
