"""
ROUGE, WER and summary statistics
=================================

All metrics work on token lists. ``tokenize`` lowercases and drops
punctuation before splitting on whitespace.
"""

from peftlab.metrics import (
    evaluate_corpus,
    novel_ngram_percentage,
    rouge_l,
    rouge_n,
    rouge_s,
    tokenize,
    unigram_intersection,
    unigram_intersection_filter,
    wer,
)

reference = tokenize("The police arrested two men near the station on Friday.")
candidate = tokenize("Police arrested two men on Friday.")
print("ROUGE-1", round(rouge_n(candidate, [reference], 1), 3))
print("ROUGE-2", round(rouge_n(candidate, [reference], 2), 3))
print("ROUGE-L", round(rouge_l(candidate, reference), 3))
print("ROUGE-S", round(rouge_s(candidate, [reference]), 3))

# %%
# WER counts substitutions, deletions and insertions against the reference
# length, so a long wrong hypothesis can score above 1.
print(wer(["a"], ["x", "y"]))
print(wer(tokenize("turn the lights off"), tokenize("turn lights of please")))

# %%
# Abstractiveness of a summary and the dataset filter on unigram overlap.
source = tokenize("The council approved the new budget after a long debate on Tuesday.")
summary = tokenize("Council backs budget after debate.")
for n in (1, 2, 3):
    print(f"novel {n}-grams: {novel_ngram_percentage(source, summary, n):.1f}%")
print("unigram overlap", unigram_intersection(source, summary), "kept:", unigram_intersection_filter(source, summary))

# %%
# A corpus report keeps per-example scores and corpus means.
report = evaluate_corpus(
    [
        {"source": "a b c d", "candidate": "a b x", "references": ["a b c"]},
        {"candidate": "hello world", "references": ["hello there world", "hello world"]},
    ]
)
print(report.to_csv())
