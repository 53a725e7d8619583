"""
Corpus ingestion, byte-level tokenization, batching, dense pretraining and
perplexity evaluation.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from disp import tensor as T
from disp.errors import ContractViolation, NonFiniteLossError, UsageError
from disp.model import BlockGates, DenseModel, ModelSpec, lm_loss, model_forward
from disp.optim import AdamW, clip_grad_norm
from disp.pruner import PrunedModel, pruned_model_forward

logger = logging.getLogger(__name__)

BOS = 256
VOCAB_SIZE = 257

Batch = Tuple[np.ndarray, np.ndarray]


def tokenize(data: bytes) -> np.ndarray:
    """BOS followed by one token per byte."""
    return np.concatenate([[BOS], np.frombuffer(data, dtype=np.uint8)]).astype(np.int64)


def detokenize(tokens: Sequence[int]) -> bytes:
    tokens = np.asarray(tokens, dtype=np.int64)
    return tokens[tokens != BOS].astype(np.uint8).tobytes()


@dataclass
class Corpus:
    """A UTF-8 text file as a byte-token stream with a train/valid split"""

    data: bytes
    valid_fraction: float = 0.1
    source: str = "<memory>"

    def __post_init__(self):
        if not 0.0 <= self.valid_fraction < 1.0:
            raise UsageError("valid_fraction must lie in [0, 1)")
        self.tokens = tokenize(self.data)

    @classmethod
    def from_file(cls, path: Union[str, Path], valid_fraction: float = 0.1) -> "Corpus":
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"Corpus file not found: {path}")
        data = path.read_bytes()
        if not data:
            raise UsageError(f"Corpus file is empty: {path}")
        return cls(data, valid_fraction, str(path))

    @property
    def split_point(self) -> int:
        return int(round(len(self.tokens) * (1.0 - self.valid_fraction)))

    def split(self, name: Literal["train", "valid", "all"]) -> np.ndarray:
        if name == "train":
            return self.tokens[: self.split_point]
        if name == "valid":
            return self.tokens[self.split_point :]
        if name == "all":
            return self.tokens
        raise UsageError(f"Unknown split '{name}'")


class BatchSource:
    """
    Endless deterministic stream of training windows.

    Windows are fixed-length (seq_len + 1 tokens: inputs plus shifted
    targets) at stride seq_len; their order is reshuffled per epoch from
    (seed, epoch) and batches wrap across epoch boundaries.
    """

    def __init__(self, tokens: np.ndarray, seq_len: int, batch_size: int = 1, seed: int = 0):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.seed = seed
        n_windows = (len(self.tokens) - 1) // seq_len
        if n_windows < 1:
            raise UsageError(f"Need at least {seq_len + 1} tokens for one window, got {len(self.tokens)}")
        self.starts = np.arange(n_windows) * seq_len
        self.epoch = 0
        self.cursor = 0
        self.order = self._order(0)

    def _order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.starts))

    @property
    def position(self) -> int:
        """Windows served so far, across epochs."""
        return self.epoch * len(self.starts) + self.cursor

    def seek(self, position: int) -> None:
        """Continue the stream as if `position` windows had already been served."""
        if position < 0:
            raise UsageError(f"Batch position must be non-negative, got {position}")
        self.epoch, self.cursor = divmod(int(position), len(self.starts))
        self.order = self._order(self.epoch)

    def next_batch(self) -> Batch:
        windows = []
        for _ in range(self.batch_size):
            if self.cursor == len(self.order):
                self.epoch += 1
                self.cursor = 0
                self.order = self._order(self.epoch)
            start = self.starts[self.order[self.cursor]]
            self.cursor += 1
            windows.append(self.tokens[start : start + self.seq_len + 1])
        block = np.stack(windows)
        return block[:, :-1], block[:, 1:]

    def __iter__(self) -> Iterator[Batch]:
        while True:
            yield self.next_batch()


class Prefetcher:
    """
    Loads the next batch on a worker thread; at most one batch waits in the queue.

    A failure in the worker is raised again from `next_batch`.
    """

    def __init__(self, source: BatchSource, total: int):
        self.source = source
        self.total = total
        self.queue: "queue.Queue[Batch]" = queue.Queue(maxsize=1)
        self.thread = threading.Thread(target=self._work, daemon=True)
        self.stop = threading.Event()
        self.error: Optional[BaseException] = None

    def _work(self) -> None:
        try:
            self._fill()
        except BaseException as e:
            self.error = e

    def _fill(self) -> None:
        for _ in range(self.total):
            batch = self.source.next_batch()
            while not self.stop.is_set():
                try:
                    self.queue.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if self.stop.is_set():
                return

    def __enter__(self) -> "Prefetcher":
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop.set()
        self.thread.join(timeout=1.0)

    def next_batch(self) -> Batch:
        while True:
            try:
                return self.queue.get(timeout=0.1)
            except queue.Empty:
                if self.error is not None:
                    raise self.error
                if not self.thread.is_alive() and self.queue.empty():
                    raise ContractViolation("Batch prefetch ended before the requested batches were served")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
class PerplexityResult(BaseModel):
    model: str = "dense"
    split: str = "valid"
    ppl: float
    nll: float
    tokens: int
    seq_len: int
    windowing: str = "non-overlapping, stride = seq_len"


def eval_windows(tokens: np.ndarray, seq_len: int) -> List[np.ndarray]:
    """Non-overlapping windows; every token after the first is predicted exactly once."""
    tokens = np.asarray(tokens, dtype=np.int64)
    windows = []
    for start in range(0, len(tokens) - 1, seq_len):
        windows.append(tokens[start : min(start + seq_len + 1, len(tokens))])
    return windows


LogitsFn = Callable[[np.ndarray], T.Tensor]


def logits_fn(model: Union[DenseModel, PrunedModel], gates: Optional[Sequence[BlockGates]] = None) -> LogitsFn:
    if isinstance(model, PrunedModel):
        return lambda tokens: pruned_model_forward(model, tokens)
    return lambda tokens: model_forward(model, tokens, gates)


def mean_nll(forward: LogitsFn, tokens: np.ndarray, seq_len: int, batch_size: int = 8) -> Tuple[float, int]:
    """Sum-weighted mean cross-entropy over all eval windows."""
    windows = eval_windows(tokens, seq_len)
    if not windows:
        raise UsageError("Evaluation split has fewer than two tokens")
    total, count = 0.0, 0
    by_length = {}
    for w in windows:
        by_length.setdefault(len(w), []).append(w)
    with T.no_grad():
        for length in sorted(by_length):
            group = by_length[length]
            for i in range(0, len(group), batch_size):
                block = np.stack(group[i : i + batch_size])
                inputs, targets = block[:, :-1], block[:, 1:]
                loss = lm_loss(forward(inputs), targets).item()
                total += loss * targets.size
                count += targets.size
    return total / count, count


def perplexity(
    model: Union[DenseModel, PrunedModel],
    tokens: np.ndarray,
    seq_len: int,
    gates: Optional[Sequence[BlockGates]] = None,
    batch_size: int = 8,
    split: str = "valid",
) -> PerplexityResult:
    """exp(mean token cross-entropy); the same windows for dense, masked and pruned models."""
    if len(tokens) < 2:
        raise UsageError(f"Split '{split}' is empty")
    nll, count = mean_nll(logits_fn(model, gates), tokens, seq_len, batch_size)
    kind = "pruned" if isinstance(model, PrunedModel) else ("masked" if gates is not None else "dense")
    return PerplexityResult(model=kind, split=split, ppl=math.exp(nll), nll=nll, tokens=count, seq_len=seq_len)


# ---------------------------------------------------------------------------
# Dense pretraining
# ---------------------------------------------------------------------------
class PretrainConfig(BaseModel):
    steps: int = Field(2000, ge=1)
    lr: float = Field(3e-3, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    batch_size: int = Field(8, ge=1)
    seq_len: int = Field(64, ge=1)
    grad_clip: float = Field(1.0, ge=0.0)
    seed: int = 0
    log_every: int = Field(100, ge=1)


def pretrain_dense(
    spec: ModelSpec, corpus: Corpus, cfg: PretrainConfig
) -> Tuple[DenseModel, List[float]]:
    """
    Train every weight of a fresh model on the corpus' train split.

    The only phase in which model weights change; the result comes back frozen.
    """
    if cfg.seq_len > spec.max_seq_len:
        raise UsageError(f"seq_len {cfg.seq_len} exceeds max_seq_len {spec.max_seq_len}")
    model = DenseModel.init(spec, seed=cfg.seed).unfreeze()
    source = BatchSource(corpus.split("train"), cfg.seq_len, cfg.batch_size, seed=cfg.seed)
    optimizer = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for step in range(1, cfg.steps + 1):
        inputs, targets = source.next_batch()
        loss = lm_loss(model_forward(model, inputs), targets)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError("Pretraining diverged", step, {"last_loss": history[-1] if history else None})
        optimizer.zero_grad()
        loss.backward()
        clip_grad_norm(model.parameters(), cfg.grad_clip)
        optimizer.step()
        history.append(value)
        if step % cfg.log_every == 0 or step == cfg.steps:
            logger.info("pretrain step %d/%d loss %.4f", step, cfg.steps, value)
    return model.freeze(), history
