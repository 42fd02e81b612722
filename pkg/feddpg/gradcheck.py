"""
Finite-difference verification of generator gradients
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from feddpg.config import Config, DataConfig, EncoderConfig, GeneratorConfig
from feddpg.data import SyntheticTaskSpec, generate_synthetic
from feddpg.encoder import FrozenEncoder
from feddpg.errors import ContractError
from feddpg.generator import GeneratorParams, PromptedClassifier, init_generator
from feddpg.tensor import Tensor, backward, no_grad
from feddpg.unlearning import relabel, unlearning_objective

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    """Worst agreement between analytic and central-difference gradients"""

    max_rel_error: float
    max_abs_error: float
    num_checked: int
    worst_entry: Tuple[str, int] = ("", -1)
    per_tensor: Dict[str, float] = field(default_factory=dict)
    elapsed: float = 0.0

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_rel_error <= tolerance

    def to_dict(self) -> Dict:
        return {
            "max_rel_error": self.max_rel_error,
            "max_abs_error": self.max_abs_error,
            "num_checked": self.num_checked,
            "worst_entry": list(self.worst_entry),
            "per_tensor": dict(self.per_tensor),
            "elapsed": self.elapsed,
        }


def numerical_gradient(
    fn: Callable[[], float], array: np.ndarray, eps: float = DEFAULT_EPS
) -> np.ndarray:
    """
    Central differences (f(x+ε) − f(x−ε)) / 2ε for every entry of ``array``

    ``array`` is perturbed in place and restored exactly after each entry.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = fn()
        flat[i] = original - eps
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """|a − n| / max(|a|, |n|, floor), element-wise"""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(
    loss_fn: Callable[[GeneratorParams], Tensor],
    params: GeneratorParams,
    eps: float = DEFAULT_EPS,
) -> GradCheckResult:
    """
    Compare the recorded reverse-mode gradient of ``loss_fn`` with central
    differences for every entry of every tensor in ``params``

    ``params`` values are unchanged afterwards and hold no gradient.
    """
    start = time.time()
    params.zero_grad()
    loss = loss_fn(params)
    if loss.size != 1:
        raise ContractError("gradient check needs a scalar loss")
    record = backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.tensors.items()
    }
    record.clear()
    params.zero_grad()

    def value() -> float:
        with no_grad():
            return loss_fn(params).item()

    max_rel, max_abs, worst, per_tensor, checked = 0.0, 0.0, ("", -1), {}, 0
    for name, tensor in params.tensors.items():
        numeric = numerical_gradient(value, tensor.data, eps)
        rel = relative_error(analytic[name], numeric)
        per_tensor[name] = float(rel.max()) if rel.size else 0.0
        checked += rel.size
        if rel.size and rel.max() > max_rel:
            max_rel = float(rel.max())
            worst = (name, int(np.argmax(rel)))
        if rel.size:
            max_abs = max(max_abs, float(np.abs(analytic[name] - numeric).max()))

    result = GradCheckResult(max_rel, max_abs, checked, worst, per_tensor, time.time() - start)
    logger.debug(f"Gradient check over {checked} entries: max relative error {max_rel:.3e}")
    return result


def tiny_config() -> Config:
    """The small model used for gradient checks"""
    return Config(
        encoder=EncoderConfig(
            d_e=8,
            num_layers=1,
            num_heads=2,
            d_ff=16,
            vocab_size=32,
            max_len=16,
            num_classes=2,
            backbone="random",
        ),
        generator=GeneratorConfig(hidden=4, prompt_len=2),
        data=DataConfig(
            signal_tokens_per_class=4,
            signal_rate=0.5,
            seq_len_min=3,
            seq_len_max=6,
            num_train=8,
            num_test=0,
        ),
    )


def gradient_check_report(
    seed: int = 0,
    reg_lambda: float = 0.5,
    eps: float = DEFAULT_EPS,
    config: Optional[Config] = None,
) -> Dict[str, GradCheckResult]:
    """
    Check the local training loss and the unlearning objective on a small model

    Returns one result per objective: ``local_loss`` and ``unlearning_loss``.
    """
    config = config or tiny_config()
    spec = SyntheticTaskSpec(
        num_classes=config.encoder.num_classes,
        vocab_size=config.encoder.vocab_size,
        seq_len_min=config.data.seq_len_min,
        seq_len_max=config.data.seq_len_max,
        signal_tokens_per_class=config.data.signal_tokens_per_class,
        signal_rate=config.data.signal_rate,
        seed=seed,
        pad_id=config.data.pad_id,
    )
    data = generate_synthetic(spec, max(config.data.num_train, 2))
    encoder = FrozenEncoder.initialize(config.encoder, seed)
    model = PromptedClassifier(encoder, config.generator)
    params = init_generator(config.generator, seed)

    ids, mask = data.arrays()
    labels = data.label_array
    half = len(data) // 2
    retain = (ids[:half], mask[:half], labels[:half])
    forget_set = data.subset(range(half, len(data)))
    rng = np.random.default_rng([seed, 0x6C])
    new_labels = np.array([s.new_label for s in relabel(forget_set, spec.num_classes, rng)])
    forget = (ids[half:], mask[half:], new_labels)

    results = {
        "local_loss": check_gradients(
            lambda p: model.forward_loss(p, ids, mask, labels)[0], params, eps
        ),
        "unlearning_loss": check_gradients(
            lambda p: unlearning_objective(model, p, retain, forget, reg_lambda), params, eps
        ),
    }
    for name, result in results.items():
        logger.info(
            f"Gradient check {name}: max relative error {result.max_rel_error:.3e} "
            f"over {result.num_checked} entries"
        )
    return results
