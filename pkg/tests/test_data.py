import numpy as np
import pytest

from disp.data import (
    BOS,
    VOCAB_SIZE,
    BatchSource,
    Corpus,
    PretrainConfig,
    Prefetcher,
    detokenize,
    eval_windows,
    perplexity,
    pretrain_dense,
    tokenize,
)
from disp.errors import ContractViolation, UsageError
from disp.model import ones_gates
from disp.pruner import extract
from disp.verify import random_gates


def test_byte_tokenizer():
    tokens = tokenize("héllo".encode("utf-8"))
    assert tokens[0] == BOS
    assert VOCAB_SIZE == 257
    assert tokens.max() < VOCAB_SIZE
    assert detokenize(tokens).decode("utf-8") == "héllo"


def test_corpus_split(text_bytes):
    corpus = Corpus(text_bytes, valid_fraction=0.1)
    train, valid = corpus.split("train"), corpus.split("valid")
    assert len(train) + len(valid) == len(text_bytes) + 1
    assert len(valid) == pytest.approx(0.1 * (len(text_bytes) + 1), abs=1)
    with pytest.raises(UsageError):
        corpus.split("test")


def test_corpus_file_errors(tmp_path):
    with pytest.raises(UsageError):
        Corpus.from_file(tmp_path / "missing.txt")
    empty = tmp_path / "empty.txt"
    empty.write_bytes(b"")
    with pytest.raises(UsageError):
        Corpus.from_file(empty)


def test_batches_are_shifted_windows():
    tokens = np.arange(101)
    inputs, targets = BatchSource(tokens, seq_len=10, batch_size=3, seed=0).next_batch()
    assert inputs.shape == targets.shape == (3, 10)
    assert np.array_equal(inputs[:, 1:], targets[:, :-1])
    assert np.all(inputs[:, 0] % 10 == 0)


def test_batches_are_deterministic_and_wrap_epochs():
    tokens = np.arange(41)
    a = BatchSource(tokens, seq_len=10, batch_size=3, seed=5)
    b = BatchSource(tokens, seq_len=10, batch_size=3, seed=5)
    for _ in range(4):
        x, _ = a.next_batch()
        y, _ = b.next_batch()
        assert np.array_equal(x, y)
    assert a.epoch >= 2


def test_batch_source_needs_one_window():
    with pytest.raises(UsageError):
        BatchSource(np.arange(5), seq_len=10)


def test_prefetcher_preserves_order():
    tokens = np.arange(201)
    direct = BatchSource(tokens, seq_len=10, batch_size=2, seed=1)
    expected = [direct.next_batch()[0] for _ in range(5)]
    with Prefetcher(BatchSource(tokens, seq_len=10, batch_size=2, seed=1), total=5) as pf:
        got = [pf.next_batch()[0] for _ in range(5)]
    assert all(np.array_equal(a, b) for a, b in zip(expected, got))


def test_seek_continues_the_stream():
    tokens = np.arange(41)
    direct = BatchSource(tokens, seq_len=10, batch_size=3, seed=5)
    for _ in range(3):
        direct.next_batch()
    assert direct.position == 9
    resumed = BatchSource(tokens, seq_len=10, batch_size=3, seed=5)
    resumed.seek(direct.position)
    for _ in range(3):
        assert np.array_equal(direct.next_batch()[0], resumed.next_batch()[0])
    with pytest.raises(UsageError):
        resumed.seek(-1)


class _FailingSource(BatchSource):
    def next_batch(self):
        raise UsageError("corpus went away")


def test_prefetcher_reraises_worker_errors():
    with Prefetcher(_FailingSource(np.arange(41), seq_len=10), total=3) as pf:
        with pytest.raises(UsageError, match="corpus went away"):
            pf.next_batch()


def test_exhausted_prefetcher_does_not_block():
    with Prefetcher(BatchSource(np.arange(41), seq_len=10), total=1) as pf:
        pf.next_batch()
        with pytest.raises(ContractViolation):
            pf.next_batch()


def test_eval_windows_predict_every_token_once():
    tokens = np.arange(53)
    windows = eval_windows(tokens, seq_len=8)
    assert sum(len(w) - 1 for w in windows) == len(tokens) - 1
    assert all(len(w) <= 9 for w in windows)


def test_untrained_perplexity_is_near_vocab_size(tiny_model, text_bytes):
    result = perplexity(tiny_model, tokenize(text_bytes[:600]), seq_len=16)
    assert result.ppl == pytest.approx(VOCAB_SIZE, rel=0.02)
    assert result.model == "dense"
    assert result.tokens == 600


def test_perplexity_ignores_batch_size(tiny_model, text_bytes):
    tokens = tokenize(text_bytes[:500])
    a = perplexity(tiny_model, tokens, seq_len=16, batch_size=1).nll
    b = perplexity(tiny_model, tokens, seq_len=16, batch_size=7).nll
    assert a == pytest.approx(b, rel=1e-9)


def test_perplexity_of_empty_split(tiny_model):
    with pytest.raises(UsageError):
        perplexity(tiny_model, np.array([BOS]), seq_len=16)


def test_masked_and_pruned_perplexity_agree(tiny_model, tiny_spec, text_bytes):
    tokens = tokenize(text_bytes[:400])
    gates = random_gates(tiny_spec, np.random.default_rng(3))
    masked = perplexity(tiny_model, tokens, 16, gates=gates)
    pruned = perplexity(extract(tiny_model, gates), tokens, 16)
    assert masked.model == "masked" and pruned.model == "pruned"
    assert pruned.ppl == pytest.approx(masked.ppl, rel=1e-6)

    ones = perplexity(tiny_model, tokens, 16, gates=ones_gates(tiny_spec))
    assert ones.ppl == perplexity(tiny_model, tokens, 16).ppl


def test_pretraining_reduces_loss_and_is_reproducible(tiny_spec):
    corpus = Corpus(b"abcd" * 300, valid_fraction=0.1)
    cfg = PretrainConfig(steps=60, lr=3e-3, batch_size=4, seq_len=16, log_every=20)
    model, history = pretrain_dense(tiny_spec, corpus, cfg)
    _, again = pretrain_dense(tiny_spec, corpus, cfg)
    assert history == again
    assert history[-1] < history[0] - 0.5
    assert all(not t.requires_grad for t in model.parameters())


def test_pretraining_checks_sequence_length(tiny_spec):
    with pytest.raises(UsageError):
        pretrain_dense(tiny_spec, Corpus(b"abcd" * 50), PretrainConfig(steps=1, seq_len=32))
