"""
Datasets: synthetic tasks with a known generative process, tokenization and JSON-lines I/O
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from feddpg.errors import ContractError, InputError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """
    Generative process for a K-class token classification task

    Token ids other than ``pad_id`` are split by a seeded permutation into K
    disjoint signal sets of ``signal_tokens_per_class`` ids and a shared noise
    set. Every position independently carries a token from the sample's class
    signal set with probability ``signal_rate``, otherwise a noise token.
    """

    num_classes: int
    vocab_size: int
    seq_len_min: int
    seq_len_max: int
    signal_tokens_per_class: int
    signal_rate: float
    seed: int
    pad_id: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ContractError("num_classes must be positive")
        if not 0.0 <= self.signal_rate <= 1.0:
            raise ContractError("signal_rate must be in [0, 1]")
        if not 1 <= self.seq_len_min <= self.seq_len_max:
            raise ContractError("sequence length range must satisfy 1 <= min <= max")
        usable = self.vocab_size - 1
        if usable < self.num_classes * self.signal_tokens_per_class + 1:
            raise ContractError(
                f"vocabulary of {self.vocab_size} cannot hold {self.num_classes} signal sets "
                f"of {self.signal_tokens_per_class} tokens plus noise"
            )

    def _token_layout(self) -> Tuple[List[np.ndarray], np.ndarray]:
        rng = np.random.default_rng([self.seed, 0x5EED])
        ids = np.array([t for t in range(self.vocab_size) if t != self.pad_id], dtype=np.int64)
        ids = rng.permutation(ids)
        s = self.signal_tokens_per_class
        signal = [np.sort(ids[c * s : (c + 1) * s]) for c in range(self.num_classes)]
        noise = np.sort(ids[self.num_classes * s :])
        return signal, noise

    @property
    def signal_sets(self) -> List[np.ndarray]:
        return self._token_layout()[0]

    @property
    def noise_tokens(self) -> np.ndarray:
        return self._token_layout()[1]

    def to_dict(self) -> Dict[str, Union[int, float]]:
        return {
            "num_classes": self.num_classes,
            "vocab_size": self.vocab_size,
            "seq_len_min": self.seq_len_min,
            "seq_len_max": self.seq_len_max,
            "signal_tokens_per_class": self.signal_tokens_per_class,
            "signal_rate": self.signal_rate,
            "seed": self.seed,
            "pad_id": self.pad_id,
        }


@dataclass
class TokenizedDataset:
    """Token-id sequences with class labels"""

    sequences: List[List[int]]
    labels: List[int]
    vocab_size: int
    num_classes: int
    pad_id: Optional[int] = None
    spec: Optional[SyntheticTaskSpec] = None
    _arrays: Optional[Tuple[np.ndarray, np.ndarray]] = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.sequences) != len(self.labels):
            raise ValidationError(
                f"{len(self.sequences)} sequences but {len(self.labels)} labels"
            )
        for i, (seq, label) in enumerate(zip(self.sequences, self.labels)):
            if any(t < 0 or t >= self.vocab_size for t in seq):
                raise ValidationError(f"sample {i}: token id outside vocabulary {self.vocab_size}")
            if not 0 <= label < self.num_classes:
                raise ValidationError(f"sample {i}: label {label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Padded id matrix [N, L] and boolean mask [N, L] of real (non-pad) positions

        L is the longest sequence; pads use ``pad_id`` (0 when unset).
        """
        if self._arrays is None:
            n = len(self.sequences)
            width = max((len(s) for s in self.sequences), default=0)
            fill = 0 if self.pad_id is None else self.pad_id
            ids = np.full((n, width), fill, dtype=np.int64)
            mask = np.zeros((n, width), dtype=bool)
            for i, seq in enumerate(self.sequences):
                ids[i, : len(seq)] = seq
                mask[i, : len(seq)] = True
            if self.pad_id is not None:
                mask &= ids != self.pad_id
            self._arrays = (ids, mask)
        return self._arrays

    @property
    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "TokenizedDataset":
        idx = list(indices)
        return TokenizedDataset(
            sequences=[self.sequences[i] for i in idx],
            labels=[self.labels[i] for i in idx],
            vocab_size=self.vocab_size,
            num_classes=self.num_classes,
            pad_id=self.pad_id,
            spec=self.spec,
        )

    def with_labels(self, labels: Sequence[int]) -> "TokenizedDataset":
        return TokenizedDataset(
            sequences=self.sequences,
            labels=list(labels),
            vocab_size=self.vocab_size,
            num_classes=self.num_classes,
            pad_id=self.pad_id,
            spec=self.spec,
        )

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.label_array, minlength=self.num_classes)

    def digest(self) -> str:
        """SHA-256 over ids, labels, vocabulary size and class count"""
        payload = {
            "sequences": self.sequences,
            "labels": self.labels,
            "vocab_size": self.vocab_size,
            "num_classes": self.num_classes,
        }
        canonical = json.dumps(payload, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def generate_synthetic(
    spec: SyntheticTaskSpec, n_samples: int, stream: int = 0
) -> TokenizedDataset:
    """
    Draw ``n_samples`` from the task; ``stream`` separates train/test draws

    Classes are drawn uniformly. Deterministic for a given (spec, stream).
    """
    rng = np.random.default_rng([spec.seed, stream])
    signal, noise = spec._token_layout()
    sequences: List[List[int]] = []
    labels: List[int] = []
    for _ in range(n_samples):
        label = int(rng.integers(spec.num_classes))
        length = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
        is_signal = rng.random(length) < spec.signal_rate
        signal_draw = rng.choice(signal[label], size=length)
        noise_draw = rng.choice(noise, size=length)
        sequences.append(np.where(is_signal, signal_draw, noise_draw).tolist())
        labels.append(label)
    return TokenizedDataset(
        sequences=sequences,
        labels=labels,
        vocab_size=spec.vocab_size,
        num_classes=spec.num_classes,
        pad_id=spec.pad_id,
        spec=spec,
    )


def class_log_likelihoods(spec: SyntheticTaskSpec, sequence: Sequence[int]) -> np.ndarray:
    """Exact log p(sequence | class) for every class (−inf where impossible)"""
    signal, noise = spec._token_layout()
    noise_set = set(noise.tolist())
    signal_sets = [set(s.tolist()) for s in signal]
    p = spec.signal_rate
    log_signal = np.log(p / spec.signal_tokens_per_class) if p > 0 else -np.inf
    log_noise = np.log((1.0 - p) / len(noise)) if p < 1 else -np.inf

    scores = np.zeros(spec.num_classes)
    for token in sequence:
        if token == spec.pad_id:
            continue
        for c in range(spec.num_classes):
            if token in signal_sets[c]:
                scores[c] += log_signal
            elif token in noise_set:
                scores[c] += log_noise
            else:
                scores[c] = -np.inf
    return scores


def bayes_predict(spec: SyntheticTaskSpec, dataset: TokenizedDataset) -> np.ndarray:
    """Maximum-posterior class per sample (uniform prior, ties to the lowest class)"""
    preds = np.zeros(len(dataset), dtype=np.int64)
    for i, seq in enumerate(dataset.sequences):
        scores = class_log_likelihoods(spec, seq)
        preds[i] = int(np.argmax(scores)) if np.any(np.isfinite(scores)) else 0
    return preds


def bayes_oracle_accuracy(spec: SyntheticTaskSpec, dataset: TokenizedDataset) -> float:
    """Accuracy of the Bayes-optimal classifier on ``dataset``"""
    if len(dataset) == 0:
        raise InputError("cannot compute oracle accuracy on an empty dataset")
    return float(np.mean(bayes_predict(spec, dataset) == dataset.label_array))


def tokenize_and_pad(
    raw_sequences: Sequence[Sequence[int]],
    labels: Sequence[int],
    max_len: int,
    pad_id: int,
    vocab_size: int,
    num_classes: int,
) -> TokenizedDataset:
    """Truncate overlong tails and right-pad every sequence to ``max_len``"""
    if not 0 <= pad_id < vocab_size:
        raise ContractError(f"pad_id {pad_id} is not in the vocabulary")
    padded: List[List[int]] = []
    for i, seq in enumerate(raw_sequences):
        tokens = list(seq)
        if not tokens:
            raise InputError(f"sequence {i} is empty")
        tokens = tokens[:max_len]
        padded.append(tokens + [pad_id] * (max_len - len(tokens)))
    return TokenizedDataset(
        sequences=padded,
        labels=list(labels),
        vocab_size=vocab_size,
        num_classes=num_classes,
        pad_id=pad_id,
    )


def load_jsonl(
    path: Union[str, Path],
    vocab_size: Optional[int] = None,
    num_classes: Optional[int] = None,
    pad_id: Optional[int] = None,
) -> TokenizedDataset:
    """
    Read a dataset with one ``{"tokens": [...], "label": k}`` object per line

    Blank lines are skipped. Unknown vocabulary size / class count are inferred
    from the data. Errors name the offending line (1-based).
    """
    sequences: List[List[int]] = []
    labels: List[int] = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"malformed JSON ({e.msg})", line=lineno) from e
            if not isinstance(record, dict) or "tokens" not in record or "label" not in record:
                raise ValidationError('expected an object with "tokens" and "label"', line=lineno)
            tokens, label = record["tokens"], record["label"]
            if not isinstance(tokens, list) or not all(
                isinstance(t, int) and not isinstance(t, bool) for t in tokens
            ):
                raise ValidationError('"tokens" must be a list of integers', line=lineno)
            if not tokens:
                raise ValidationError("empty token sequence", line=lineno)
            if pad_id is not None and all(t == pad_id for t in tokens):
                raise ValidationError(f"every token is the pad id {pad_id}", line=lineno)
            if not isinstance(label, int) or isinstance(label, bool):
                raise ValidationError('"label" must be an integer', line=lineno)
            if vocab_size is not None and any(t < 0 or t >= vocab_size for t in tokens):
                raise ValidationError(f"token id outside vocabulary {vocab_size}", line=lineno)
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ValidationError(f"label {label} outside [0, {num_classes})", line=lineno)
            sequences.append(tokens)
            labels.append(label)

    if vocab_size is None:
        vocab_size = 1 + max((max(s) for s in sequences if s), default=0)
    if num_classes is None:
        num_classes = max(2, 1 + max(labels, default=0))
    logger.info(f"Loaded {len(labels)} samples from {path}")
    return TokenizedDataset(
        sequences=sequences,
        labels=labels,
        vocab_size=vocab_size,
        num_classes=num_classes,
        pad_id=pad_id,
    )


def save_jsonl(dataset: TokenizedDataset, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for tokens, label in zip(dataset.sequences, dataset.labels):
            json.dump({"tokens": list(tokens), "label": int(label)}, f)
            f.write("\n")
    logger.info(f"Wrote {len(dataset)} samples to {path}")
