"""The caption metrics, on sentences small enough to check by eye.

Covers n-gram precision with the brevity penalty, longest-common-
subsequence F-measure, and the two consensus scores, including how the
idf weighting rewards informative words and how the "d" variant punishes
length mismatch.
"""

import math

from sgcap.metrics import bleu, cider, cider_d, compute_idf, evaluate_captions, rouge_l

refs = [
    "a red cube on a table".split(),
    "a red cube sits on a table".split(),
]
exact = refs[0]
close = "a red ball on a table".split()
short = "a red cube".split()

print("BLEU-1..4, exact match:   ", [round(s, 3) for s in bleu([exact], [refs])])
print("BLEU-1..4, one word wrong:", [round(s, 3) for s in bleu([close], [refs])])
# the short candidate has perfect unigram precision but pays the
# brevity penalty exp(1 - 6/3)
print("BLEU-1, truncated caption:", round(bleu([short], [refs])[0], 3),
      "=", round(math.exp(1.0 - 6.0 / 3.0), 3))

print("\nROUGE-L, exact:  ", round(rouge_l(exact, refs), 3))
print("ROUGE-L, one off:", round(rouge_l(close, refs), 3))

# consensus scoring needs corpus statistics: words every image uses are
# worth little, words that identify this image are worth a lot
corpus = [
    refs,
    ["a blue ball near a box".split()],
    ["a green pyramid under a shelf".split()],
]
idf = compute_idf(corpus)
print("\nidf of 'a' (everywhere): ", round(idf.weight(("a",)), 3))
print("idf of 'cube' (one image):", round(idf.weight(("cube",)), 3))

print("\nCIDEr, exact:  ", round(cider(exact, refs, idf), 3))
print("CIDEr, one off:", round(cider(close, refs, idf), 3))

# the reward variant clips repeated n-grams and damps length mismatch
padded = exact + "on a table on a table".split()
print("\nCIDEr-D, exact: ", round(cider_d(exact, refs, idf), 3))
print("CIDEr-D, padded:", round(cider_d(padded, refs, idf), 3))

print("\nfull report for a two-image batch:")
report = evaluate_captions([exact, "a blue ball near a box".split()],
                           [refs, corpus[1]], idf)
for name, value in sorted(report.items()):
    print(f"  {name}: {value:.4f}")
