import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import all_sequences, edit_scripts, lcs_by_enumeration, skip_bigrams_brute, subsequences
from peftlab.metrics import (
    MetricUsageError,
    TokenizeConfig,
    edit_distance,
    evaluate_corpus,
    lcs_length,
    novel_ngram_percentage,
    read_jsonl,
    rouge_l,
    rouge_n,
    rouge_s,
    skip_bigrams,
    tokenize,
    unigram_intersection,
    unigram_intersection_filter,
    wer,
)

tokens = st.lists(st.sampled_from("abcd"), max_size=7)


def test_tokenize_examples():
    assert tokenize("The cat.") == ["the", "cat"]
    assert tokenize("") == []
    assert tokenize("A  a") == ["a", "a"]
    assert tokenize("Don't stop!", TokenizeConfig(lowercase=False)) == ["Dont", "stop"]
    assert tokenize("a, b", TokenizeConfig(strip_punctuation=False)) == ["a,", "b"]


def test_rouge_examples():
    assert rouge_n(list("abc"), [list("abd")], 2) == 0.5
    assert rouge_n(list("xy"), [list("ab")], 1) == 0.0
    assert rouge_l(list("ace"), list("abcde")) == 3 / 5
    assert rouge_l(list("abcdef"), list("fedcba")) == 1 / 6
    assert rouge_s(list("abc"), [list("acb")]) == 2 / 3
    assert rouge_s(["a"], [["a"]]) == 0.0
    # a reference shorter than n contributes 0 to the average
    assert rouge_n(list("ab"), [list("ab"), ["a"]], 2) == 0.5


def test_rouge_multi_reference_average_and_clipping():
    assert rouge_n(list("aa"), [list("aaaa"), list("ab")], 1) == (2 / 4 + 1 / 2) / 2
    assert rouge_n(list("aaaa"), [list("ab")], 1) == 0.5


def test_metric_usage_errors():
    with pytest.raises(MetricUsageError):
        rouge_n(["a"], [], 1)
    with pytest.raises(MetricUsageError):
        rouge_n(["a"], [["a"]], 0)
    with pytest.raises(MetricUsageError):
        rouge_l(["a"], [])
    with pytest.raises(MetricUsageError):
        rouge_s(["a"], [])
    with pytest.raises(MetricUsageError):
        wer([], ["a"])


def test_wer_examples():
    r = wer(list("abc"), list("abc"))
    assert (r.wer, r.substitutions, r.deletions, r.insertions) == (0.0, 0, 0, 0)
    r = wer(list("abc"), list("axc"))
    assert (r.wer, r.substitutions, r.deletions, r.insertions) == (1 / 3, 1, 0, 0)
    r = wer(["a"], ["x", "y"])
    assert (r.wer, r.substitutions, r.deletions, r.insertions) == (2.0, 1, 0, 1)


def test_lcs_equals_subsequence_enumeration():
    seqs = list(all_sequences("abc", 5))
    subs = [subsequences(s) for s in seqs]
    for a, sa in zip(seqs, subs):
        for b, sb in zip(seqs, subs):
            assert lcs_length(a, b) == lcs_by_enumeration(sa, sb)


def test_wer_counts_form_a_minimal_edit_script():
    seqs = list(all_sequences("abc", 4))
    for ref in seqs[1:]:
        for hyp in seqs:
            scripts = edit_scripts(ref, hyp)
            best = min(sum(t) for t in scripts)
            r = wer(ref, hyp)
            assert (r.substitutions, r.deletions, r.insertions) in scripts
            assert r.errors == best == edit_distance(ref, hyp)
            assert r.wer == best / len(ref)


def test_wer_invariant_under_appending_a_novel_token():
    for ref in list(all_sequences("ab", 5))[1:]:
        for hyp in all_sequences("ab", 5):
            assert wer(ref + ("z",), hyp + ("z",)).errors == wer(ref, hyp).errors


@settings(max_examples=200, deadline=None)
@given(tokens, st.lists(tokens, min_size=1, max_size=3), st.integers(1, 3))
def test_scores_lie_in_unit_interval(cand, refs, n):
    for v in (rouge_n(cand, refs, n), rouge_s(cand, refs)):
        assert 0.0 <= v <= 1.0
    for r in refs:
        if r:
            assert 0.0 <= rouge_l(cand, r) <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=7))
def test_self_scores(x):
    for n in range(1, len(x) + 1):
        assert rouge_n(x, [x], n) == 1.0
    assert rouge_l(x, x) == 1.0
    assert wer(x, x).wer == 0.0
    if len(x) >= 2:
        assert rouge_s(x, [x]) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("ab"), min_size=1, max_size=5), st.lists(st.sampled_from("ab"), max_size=5))
def test_wer_zero_iff_equal(ref, hyp):
    assert (wer(ref, hyp).wer == 0) == (ref == hyp)


@settings(max_examples=200, deadline=None)
@given(tokens, tokens)
def test_rouge1_is_clipped_unigram_recall(cand, ref):
    if not ref:
        return
    c, r = Counter(cand), Counter(ref)
    assert rouge_n(cand, [ref], 1) == sum(min(v, c[w]) for w, v in r.items()) / len(ref)


@settings(max_examples=100, deadline=None)
@given(tokens)
def test_skip_bigrams_match_pair_enumeration(x):
    assert skip_bigrams(x) == Counter(skip_bigrams_brute(x))
    assert skip_bigrams(x, max_gap=0) == Counter(zip(x, x[1:]))


def test_novel_ngrams():
    assert novel_ngram_percentage(list("abcd"), list("abx"), 2) == 50.0
    assert novel_ngram_percentage(list("abcd"), list("bc"), 2) == 0.0
    assert novel_ngram_percentage(list("ab"), list("xyz"), 1) == 100.0
    assert novel_ngram_percentage(list("ab"), ["a"], 2) is None


def test_unigram_filter():
    assert unigram_intersection(list("abcd"), list("abxy")) == 0.5
    assert unigram_intersection_filter(list("abcd"), list("abxy"))
    assert not unigram_intersection_filter(list("abc"), list("abc"))
    assert not unigram_intersection_filter(list("abc"), list("xyz"))
    with pytest.raises(MetricUsageError):
        unigram_intersection_filter([], ["a"])


def _corpus():
    return [
        {"source": "the cat sat on the mat", "candidate": "the cat sat", "references": ["the cat sat down", "a cat"]},
        {"source": "dogs bark loudly", "candidate": "dogs bark", "references": ["dogs bark"]},
        {"candidate": "x", "references": ["y z"]},
    ]


def test_corpus_report(tmp_path):
    rep = evaluate_corpus(_corpus())
    assert len(rep.per_example) == 3
    for k, mean in rep.means.items():
        vals = [r[k] for r in rep.per_example if r.get(k) is not None]
        assert mean == pytest.approx(sum(vals) / len(vals))
    assert rep.per_example[1]["rouge-1"] == 1.0
    assert rep.per_example[2]["wer"] == 1.0
    assert rep.counts["examples"] == 3
    assert rep.counts["substitutions"] + rep.counts["deletions"] + rep.counts["insertions"] == sum(
        r["substitutions"] + r["deletions"] + r["insertions"] for r in rep.per_example
    )
    assert json.loads(rep.to_json())["tokenizer"] == {"lowercase": True, "strip_punctuation": True}
    assert rep.to_csv().splitlines()[0] == "metric,mean"

    path = tmp_path / "c.jsonl"
    path.write_text("\n".join(json.dumps(e) for e in _corpus()) + "\n")
    assert read_jsonl(path) == _corpus()


def test_parallel_corpus_evaluation_keeps_order():
    corpus = _corpus() * 20
    assert evaluate_corpus(corpus, workers=4).to_json() == evaluate_corpus(corpus).to_json()


def test_corpus_rejects_example_without_references():
    with pytest.raises(MetricUsageError):
        evaluate_corpus([{"candidate": "a", "references": []}])
