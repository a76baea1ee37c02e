import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import CheckpointFormatError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rlvr-policy-v1"
GREEDY_TEMPERATURE = 1e-6

BOS = "<bos>"
EOS = "<eos>"
SEPARATOR = "|"

# Maps a context window (length k) to a vector of V logits
Evaluator = Callable[[Tuple[int, ...]], np.ndarray]
Seed = Union[int, np.random.SeedSequence]


class Vocabulary:

    def __init__(self, tokens: Sequence[str]) -> None:

        tokens = tuple(tokens)
        if len(tokens) < 4:
            raise ValueError(f"Vocabulary needs at least 4 tokens, got {len(tokens)}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("Vocabulary tokens must be distinct")
        if BOS not in tokens or EOS not in tokens:
            raise ValueError(f"Vocabulary must contain {BOS} and {EOS}")
        self._tokens = tokens
        self._index = {token: i for i, token in enumerate(tokens)}

    @classmethod
    def default(cls) -> "Vocabulary":
        """Raw-token vocabulary of the synthetic task suite (V = 16)."""
        return cls([BOS, EOS] + [str(d) for d in range(10)] + ["+", "%", "=", SEPARATOR])

    @classmethod
    def text_mode(cls) -> "Vocabulary":
        """Vocabulary that can spell ``\\boxed{...}`` answers itself."""
        return cls([BOS, EOS] + [str(d) for d in range(10)] + ["+", "%", "=", SEPARATOR, "\\boxed{", "}"])

    @property
    def tokens(self) -> Tuple[str, ...]:

        return self._tokens

    @property
    def size(self) -> int:

        return len(self._tokens)

    @property
    def bos(self) -> int:

        return self._index[BOS]

    @property
    def eos(self) -> int:

        return self._index[EOS]

    @property
    def separator(self) -> Optional[int]:

        return self._index.get(SEPARATOR)

    def encode(self, symbols: Sequence[str]) -> Tuple[int, ...]:
        try:
            return tuple(self._index[s] for s in symbols)
        except KeyError as e:
            raise ValueError(f"Symbol {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> Tuple[str, ...]:
        return tuple(self._tokens[i] for i in ids)

    def __contains__(self, symbol: str) -> bool:

        return symbol in self._index

    def __eq__(self, other: object) -> bool:

        return isinstance(other, Vocabulary) and other._tokens == self._tokens

    def __hash__(self) -> int:

        return hash(self._tokens)

    def __repr__(self) -> str:

        return f"Vocabulary(size={self.size})"


class PolicyParams:
    """Linear softmax policy over one-hot features of the last k tokens.

    ``theta`` is laid out as the row-major weight matrix ``W[V, k*V]``
    followed by the bias ``b[V]``.
    """

    def __init__(self, vocab: Vocabulary, context_size: int = 3,
                 theta: Optional[np.ndarray] = None) -> None:

        if context_size < 1:
            raise ValueError("context_size must be at least 1")
        self._vocab = vocab
        self._k = context_size
        size = vocab.size * context_size * vocab.size + vocab.size
        if theta is None:
            theta = np.zeros(size, dtype=np.float64)
        theta = np.array(theta, dtype=np.float64, copy=True)
        if theta.shape != (size,):
            raise ValueError(f"theta must have shape ({size},), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta entries must be finite")
        theta.setflags(write=False)
        self._theta = theta

    @classmethod
    def zeros(cls, vocab: Vocabulary, context_size: int = 3) -> "PolicyParams":

        return cls(vocab, context_size)

    @property
    def vocab(self) -> Vocabulary:

        return self._vocab

    @property
    def context_size(self) -> int:

        return self._k

    @property
    def theta(self) -> np.ndarray:

        return self._theta

    @property
    def n_features(self) -> int:

        return self._k * self._vocab.size

    @property
    def weights(self) -> np.ndarray:

        v = self._vocab.size
        return self._theta[: v * self.n_features].reshape(v, self.n_features)

    @property
    def bias(self) -> np.ndarray:

        return self._theta[self._vocab.size * self.n_features:]

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":

        return PolicyParams(self._vocab, self._k, theta)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self._theta).tobytes())
        digest.update(repr((self._vocab.tokens, self._k)).encode("utf-8"))
        return digest.hexdigest()[:16]

    def __repr__(self) -> str:

        return f"PolicyParams(V={self._vocab.size}, k={self._k}, checksum='{self.checksum()}')"


@dataclass(frozen=True, eq=False)
class Trajectory:
    prompt_id: str
    prompt: Tuple[int, ...]
    actions: Tuple[int, ...]
    rollout_logprobs: np.ndarray
    trainer_logprobs: np.ndarray
    reward: float = 0.0
    fully_correct: bool = False
    golds: Tuple[str, ...] = ()
    index: int = 0

    def __post_init__(self) -> None:
        n = len(self.actions)
        if n == 0:
            raise ValueError("A trajectory needs at least one action")
        for name in ("rollout_logprobs", "trainer_logprobs"):
            values = np.asarray(getattr(self, name), dtype=np.float64)
            if values.shape != (n,):
                raise ValueError(f"{name} must have length {n}, got {values.shape}")
            if not np.all(np.isfinite(values)) or np.any(values > 0):
                raise ValueError(f"{name} entries must be finite and <= 0")
            object.__setattr__(self, name, values)

    @property
    def length(self) -> int:
        return len(self.actions)

    def with_rollout_logprobs(self, values: np.ndarray) -> "Trajectory":
        return replace(self, rollout_logprobs=np.asarray(values, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class GroupBatch:
    prompt_id: str
    trajectories: Tuple[Trajectory, ...]
    advantages: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if not self.trajectories:
            raise ValueError("A group needs at least one trajectory")
        if self.advantages is not None and len(self.advantages) != len(self.trajectories):
            raise ValueError("advantages must align with trajectories")

    @property
    def size(self) -> int:
        return len(self.trajectories)

    @property
    def rewards(self) -> List[float]:
        return [t.reward for t in self.trajectories]


def context_window(params: PolicyParams, prefix: Sequence[int]) -> Tuple[int, ...]:
    k = params.context_size
    tail = tuple(prefix[-k:]) if prefix else ()
    return (params.vocab.bos,) * (k - len(tail)) + tail


def _feature_indices(params: PolicyParams, context: Tuple[int, ...]) -> np.ndarray:
    v = params.vocab.size
    return np.arange(len(context)) * v + np.asarray(context, dtype=np.int64)


def logits(params: PolicyParams, context: Sequence[int]) -> np.ndarray:
    window = context_window(params, context)
    return params.weights[:, _feature_indices(params, window)].sum(axis=1) + params.bias


def log_softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - np.max(values)
    return shifted - np.log(np.sum(np.exp(shifted)))


def softmax(values: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(values))


def token_logprobs(params: PolicyParams, prompt: Sequence[int], actions: Sequence[int],
                   evaluator: Optional[Evaluator] = None) -> np.ndarray:
    """Per-step ``log pi(a_t | s_t)``; ``evaluator`` defaults to the exact logits."""
    evaluate = evaluator or (lambda window: logits(params, window))
    sequence = list(prompt)
    values = np.empty(len(actions), dtype=np.float64)
    for t, action in enumerate(actions):
        values[t] = log_softmax(evaluate(context_window(params, sequence)))[action]
        sequence.append(action)
    return values


def sequence_logprob(params: PolicyParams, prompt: Sequence[int], actions: Sequence[int]) -> float:
    if not actions:
        raise ValueError("actions must be nonempty")
    return float(np.sum(token_logprobs(params, prompt, actions)))


def grad_sequence_logprob(params: PolicyParams, prompt: Sequence[int], actions: Sequence[int]) -> np.ndarray:
    if not actions:
        raise ValueError("actions must be nonempty")
    v = params.vocab.size
    grad = np.zeros_like(params.theta)
    grad_w = grad[: v * params.n_features].reshape(v, params.n_features)
    grad_b = grad[v * params.n_features:]

    sequence = list(prompt)
    for action in actions:
        window = context_window(params, sequence)
        delta = -softmax(logits(params, window))
        delta[action] += 1.0
        grad_w[:, _feature_indices(params, window)] += delta[:, None]
        grad_b += delta
        sequence.append(action)
    return grad


def sample_with_logprobs(params: PolicyParams, prompt: Sequence[int], window: int, seed: Seed,
                         temperature: float = 1.0,
                         evaluator: Optional[Evaluator] = None) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Ancestral sampling that also records the evaluator's temperature-1 log-probs."""
    if window < 1:
        raise ValueError("window must be at least 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    evaluate = evaluator or (lambda w: logits(params, w))
    rng = np.random.default_rng(seed)
    eos = params.vocab.eos
    sequence = list(prompt)
    actions: List[int] = []
    recorded: List[float] = []
    while len(actions) < window:
        scores = evaluate(context_window(params, sequence))
        if temperature < GREEDY_TEMPERATURE:
            action = int(np.argmax(scores))
        else:
            action = int(rng.choice(len(scores), p=softmax(scores / temperature)))
        recorded.append(float(log_softmax(scores)[action]))
        actions.append(action)
        sequence.append(action)
        if action == eos:
            break
    return tuple(actions), np.asarray(recorded, dtype=np.float64)


def sample(params: PolicyParams, prompt: Sequence[int], window: int, seed: Seed,
           temperature: float = 1.0, evaluator: Optional[Evaluator] = None) -> Tuple[int, ...]:

    actions, _ = sample_with_logprobs(params, prompt, window, seed, temperature, evaluator)
    return actions


def save_checkpoint(path: Union[str, Path], params: PolicyParams,
                    state: Optional[Dict[str, int]] = None) -> Path:

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "format": np.array(CHECKPOINT_FORMAT),
        "tokens": np.array(params.vocab.tokens),
        "context_size": np.array(params.context_size, dtype=np.int64),
        "theta": params.theta,
    }
    for key, value in (state or {}).items():
        arrays[f"state_{key}"] = np.array(value, dtype=np.int64)
    try:
        with open(target, "wb") as handle:
            np.savez(handle, **arrays)
    except Exception as e:
        logger.error(f"Failed to write checkpoint {target}: {e}")
        raise
    logger.info(f"Saved checkpoint {target} (checksum {params.checksum()})")
    return target


def load_checkpoint(path: Union[str, Path]) -> Tuple[PolicyParams, Dict[str, int]]:

    source = Path(path)
    if not source.exists():
        raise CheckpointFormatError(str(source), "file does not exist")
    try:
        with np.load(source, allow_pickle=False) as data:
            contents = {key: data[key] for key in data.files}
    except Exception as e:
        raise CheckpointFormatError(str(source), str(e)) from e

    required = {"format", "tokens", "context_size", "theta"}
    if not required.issubset(contents):
        raise CheckpointFormatError(str(source), f"missing arrays {sorted(required - set(contents))}")
    if str(contents["format"]) != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(str(source), f"unknown format tag {str(contents['format'])!r}")

    vocab = Vocabulary([str(token) for token in contents["tokens"]])
    params = PolicyParams(vocab, int(contents["context_size"]), contents["theta"])
    state = {key[len("state_"):]: int(value) for key, value in contents.items() if key.startswith("state_")}
    logger.info(f"Loaded checkpoint {source} (checksum {params.checksum()})")
    return params, state
