"""Metric anchors with hand-built scorers, batched-vs-naive agreement, and
masked-set loading."""

import json
import math

import numpy as np
import pytest

from bertlab import mlmeval as ev
from bertlab import model as md
from bertlab import tokenizer as tk
from bertlab.errors import InputError, NumericFault, ValidationError
from bertlab.seeding import substream

LETTERS = ["a", "b", "c", "d", "e", "f", "g", "h"]


@pytest.fixture
def vocab():
    return tk.Vocabulary.from_tokens(list(tk.SPECIAL_TOKENS) + LETTERS)


def table_scorer(vocab, fn):
    """Scorer built from fn(row_ids, position) -> {token_id: prob}; everything
    else gets a vanishing probability."""
    def scorer(input_ids, attention_mask, positions):
        out = np.full((len(input_ids), len(vocab)), -1e9)
        for i, (row, pos) in enumerate(zip(input_ids, positions)):
            for tok, p in fn(tuple(row), int(pos)).items():
                out[i, tok] = math.log(p)
        return out
    return scorer


# -- pseudo-perplexity ------------------------------------------------------


def test_pppl_certain_model_is_one(vocab):
    # the scorer knows the unmasked sentence and returns p=1 for the answer
    text = "a b c"
    original = [vocab.ids[w] for w in text.split()]

    def fn(row, pos):
        return {original[pos - 1]: 1.0}

    result = ev.pppl(table_scorer(vocab, fn), [text], vocab, max_seq_len=16)
    assert result.value == 1.0
    assert result.n_tokens == 3


def test_pppl_hand_two_maskings(vocab):
    original = [vocab.ids["a"], vocab.ids["b"]]
    probs = {1: 0.5, 2: 0.25}

    def fn(row, pos):
        return {original[pos - 1]: probs[pos]}

    result = ev.pppl(table_scorer(vocab, fn), ["a b"], vocab, max_seq_len=16)
    assert result.value == pytest.approx(2.0 * math.sqrt(2.0), rel=1e-12)


def test_pppl_uniform_vocab_100():
    vocab = tk.Vocabulary.from_tokens(list(tk.SPECIAL_TOKENS) + [f"t{i}" for i in range(95)])
    assert len(vocab) == 100

    def scorer(input_ids, attention_mask, positions):
        return np.full((len(input_ids), 100), math.log(1.0 / 100.0))

    result = ev.pppl(scorer, ["t0 t1 t2 t3"], vocab, max_seq_len=16)
    assert result.value == pytest.approx(100.0, rel=1e-12)


def test_pppl_counts_all_scored_tokens(vocab):
    def scorer(ids, mask, pos):
        return np.full((len(ids), len(vocab)), math.log(1.0 / len(vocab)))

    result = ev.pppl(scorer, ["a b c", "d e"], vocab, max_seq_len=16)
    assert result.n_tokens == 5
    assert [n for n, _ in result.per_sentence] == [3, 2]


def test_pppl_empty_corpus_is_input_error(vocab):
    def scorer(ids, mask, pos):  # pragma: no cover - never called
        raise AssertionError
    with pytest.raises(InputError):
        ev.pppl(scorer, [], vocab, max_seq_len=16)
    with pytest.raises(InputError):
        ev.pppl(scorer, ["", "   "], vocab, max_seq_len=16)


def test_pppl_overlong_sentence_is_input_error(vocab):
    def scorer(ids, mask, pos):  # pragma: no cover
        raise AssertionError
    with pytest.raises(InputError):
        ev.pppl(scorer, ["a b c d e f"], vocab, max_seq_len=6)


def test_pppl_order_invariance(vocab):
    rng = np.random.default_rng(4)
    table = rng.dirichlet(np.ones(len(vocab)), size=16)

    def scorer(ids, mask, positions):
        return np.log(table[positions % 16])

    sents = ["a b c", "d e", "f g h", "a c e g"]
    forward = ev.pppl(scorer, sents, vocab, max_seq_len=16)
    backward = ev.pppl(scorer, sents[::-1], vocab, max_seq_len=16)
    assert forward.value == backward.value


def test_pppl_rejects_positive_log_probs(vocab):
    def scorer(ids, mask, pos):
        return np.full((len(ids), len(vocab)), 0.5)
    with pytest.raises(NumericFault):
        ev.pppl(scorer, ["a b"], vocab, max_seq_len=16)


def test_batched_matches_naive_on_real_model(vocab):
    config = md.ModelConfig(n_layers=2, hidden_dim=32, n_heads=4, ff_dim=16,
                            max_seq_len=16, vocab_size=len(vocab), dropout_rate=0.0)
    params = md.init_params(config, substream(11, "init"))
    scorer = ev.ModelScorer(params, config, chunk_size=3)
    sents = ["a b c d", "e f", "g h a b c"]
    fast = ev.pppl(scorer, sents, vocab, config.max_seq_len)
    slow = ev.pppl_naive(scorer, sents, vocab, config.max_seq_len)
    assert fast.value == pytest.approx(slow.value, rel=1e-6)
    assert fast.value >= 1.0


# -- mean reciprocal rank ---------------------------------------------------


def rank_scorer(vocab, order):
    """Fixed strictly-decreasing distribution over `order` (token names)."""
    ids = [vocab.ids[t] for t in order]

    def scorer(input_ids, attention_mask, positions):
        out = np.full((len(input_ids), len(vocab)), -30.0)
        for r, tid in enumerate(ids):
            out[:, tid] = -float(r + 1)
        return out
    return scorer


def one_word_item(word, sid="s1"):
    return ev.MaskedEvalItem(source_id=sid, text=word, start=0, end=len(word), answer=word)


def test_mrr_rank_anchor_scores(vocab):
    order = ["a", "b", "c", "d", "e", "f"]
    for word, expected in (("a", 1.0), ("c", 1.0 / 3.0), ("e", 0.2), ("f", 0.0)):
        result = ev.mrr_top5(rank_scorer(vocab, order), [one_word_item(word)], vocab, 16)
        assert result.value == pytest.approx(expected, rel=1e-12)
        assert result.rankings[0].rank == (order.index(word) + 1 if expected else 0)


def test_mrr_mean_over_items(vocab):
    order = ["a", "b", "c", "d", "e", "f"]
    items = [one_word_item("a", "s1"), one_word_item("b", "s2"), one_word_item("f", "s3")]
    result = ev.mrr_top5(rank_scorer(vocab, order), items, vocab, 16)
    assert result.value == pytest.approx((1.0 + 0.5 + 0.0) / 3.0, rel=1e-12)


def test_mrr_tie_breaks_toward_lower_token_id(vocab):
    ida, idb = vocab.ids["a"], vocab.ids["b"]
    assert ida < idb

    def scorer(input_ids, attention_mask, positions):
        out = np.full((len(input_ids), len(vocab)), -30.0)
        out[:, [ida, idb]] = -1.0  # exact tie
        return out

    result = ev.mrr_top5(scorer, [one_word_item("b")], vocab, 16)
    assert result.rankings[0].rank == 2
    assert result.rankings[0].top5[0][0] == "a"


def test_mrr_invariant_under_monotone_probability_transform(vocab):
    rng = np.random.default_rng(8)
    base = rng.standard_normal(len(vocab))

    def make(scale_pow):
        def scorer(ids, mask, pos):
            row = base * scale_pow  # p -> p**scale_pow, strictly monotone
            row = row - np.log(np.exp(row - row.max()).sum()) - row.max()
            return np.tile(row, (len(ids), 1))
        return scorer

    items = [one_word_item(w, f"s{w}") for w in LETTERS]
    a = ev.mrr_top5(make(1.0), items, vocab, 16)
    b = ev.mrr_top5(make(3.0), items, vocab, 16)
    assert a.value == b.value
    assert [r.rank for r in a.rankings] == [r.rank for r in b.rankings]


def test_mrr_excludes_multi_piece_targets(vocab):
    items = [one_word_item("a"), one_word_item("axeq", "s2")]
    result = ev.mrr_top5(rank_scorer(vocab, ["a", "b"]), items, vocab, 16)
    assert result.value == 1.0          # excluded items leave the denominator
    assert len(result.excluded) == 1
    assert result.excluded[0][1] == ev.EXCLUDED_NOT_SINGLE_TOKEN


def test_mrr_all_excluded_is_input_error(vocab):
    with pytest.raises(InputError):
        ev.mrr_top5(rank_scorer(vocab, ["a"]), [one_word_item("qqq")], vocab, 16)


def test_mrr_by_sentence_view(vocab):
    order = ["a", "b", "c", "d", "e", "f"]
    items = [one_word_item("a", "s1"), one_word_item("f", "s1"), one_word_item("b", "s2")]
    result = ev.mrr_top5(rank_scorer(vocab, order), items, vocab, 16)
    assert result.by_sentence == {"s1": pytest.approx(0.5), "s2": pytest.approx(0.5)}


def test_mrr_order_invariance(vocab):
    order = ["c", "a", "f", "b", "d", "e"]
    items = [one_word_item(w, f"s{w}") for w in ("a", "b", "c", "d")]
    fwd = ev.mrr_top5(rank_scorer(vocab, order), items, vocab, 16)
    rev = ev.mrr_top5(rank_scorer(vocab, order), items[::-1], vocab, 16)
    assert fwd.value == rev.value


# -- masked-set file --------------------------------------------------------


def write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")


def good_record(rid="r1", text="il gatto nero", start=3, end=8, subdomain="toy"):
    return {"id": rid, "text": text,
            "maskings": [{"start": start, "end": end, "answer": text[start:end]}],
            "subdomain": subdomain}


def test_load_well_formed_fixture(tmp_path):
    path = tmp_path / "set.jsonl"
    write_jsonl(path, [good_record(f"r{i}") for i in range(3)])
    items, report = ev.load_masked_set(path)
    assert len(items) == 3
    assert report == {"sentences": 3, "items": 3}
    assert items[0].answer == "gatto"
    assert items[0].subdomain == "toy"


def test_multi_mask_sentence_expands(tmp_path):
    text = "a bb ccc dddd"
    rec = {"id": "multi", "text": text, "subdomain": "x",
           "maskings": [{"start": s, "end": e, "answer": text[s:e]}
                        for s, e in ((0, 1), (2, 4), (5, 8), (9, 13))]}
    path = tmp_path / "set.jsonl"
    write_jsonl(path, [rec])
    items, report = ev.load_masked_set(path)
    assert len(items) == 4
    assert {i.source_id for i in items} == {"multi"}
    assert report["items"] == 4


def test_span_past_end_is_validation_error(tmp_path):
    rec = good_record()
    rec["maskings"][0] = {"start": 3, "end": 99, "answer": "gatto"}
    path = tmp_path / "set.jsonl"
    write_jsonl(path, [rec])
    with pytest.raises(ValidationError) as exc:
        ev.load_masked_set(path)
    assert "r1" in str(exc.value)


def test_overlapping_spans_listed(tmp_path):
    text = "abcdef"
    rec = {"id": "ov", "text": text,
           "maskings": [{"start": 0, "end": 4, "answer": "abcd"},
                        {"start": 2, "end": 6, "answer": "cdef"}]}
    path = tmp_path / "set.jsonl"
    write_jsonl(path, [rec])
    with pytest.raises(ValidationError) as exc:
        ev.load_masked_set(path)
    assert "overlapping" in str(exc.value)


def test_answer_mismatch_and_duplicate_id_listed(tmp_path):
    bad = good_record("dup")
    bad["maskings"][0]["answer"] = "cane"
    path = tmp_path / "set.jsonl"
    write_jsonl(path, [bad, good_record("dup")])
    with pytest.raises(ValidationError) as exc:
        ev.load_masked_set(path)
    msg = str(exc.value)
    assert "cane" in msg and "duplicate" in msg


def test_missing_file_is_input_error(tmp_path):
    with pytest.raises(InputError):
        ev.load_masked_set(tmp_path / "nope.jsonl")
