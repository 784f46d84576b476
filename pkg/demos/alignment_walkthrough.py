"""Build a large and a small vocabulary from the same text and compare tokenizations.

Prints each sentence under both vocabularies, the positions the match
strategy keeps, and how reduce re-splits every large-vocabulary subword.

    python demos/alignment_walkthrough.py
"""
from vocadistill.alignment import format_alignment, match_align, reduce_split
from vocadistill.data import synthetic_corpus
from vocadistill.tokenizer import build_vocab, tokenize, vocab_intersection

texts = synthetic_corpus(50_000, seed=1)
big = build_vocab(texts, 400)
small = build_vocab(texts, 120)
pairs, coverage = vocab_intersection(big, small)
print(f"vocabularies: {len(big)} and {len(small)} entries, {len(pairs)} subwords shared "
      f"({coverage:.0%} of the small one)")

for text in texts[:3]:
    t_seq, s_seq = tokenize(big, text), tokenize(small, text)
    t_tok, s_tok = t_seq.tokens(big), s_seq.tokens(small)
    print("\ntext:   ", text)
    print("large:  ", " ".join(t_tok))
    print("small:  ", " ".join(s_tok))

    kept = match_align(t_seq, s_seq, pairs).seq_pairs
    print(f"match keeps {len(kept)} of {len(t_tok)} positions:",
          " ".join(t_tok[i] for i, _ in kept))

    r = reduce_split(t_seq, big, small)
    aux = [small.tokens[i] for i in r.student_ids]
    print("reduce groups (position, large subword, small pieces):")
    print(format_alignment(t_tok, aux, r))
