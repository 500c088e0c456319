"""Desk-scale multilingual seq2seq distillation toolkit.

Trains a deep-encoder/shallow-decoder transformer student against a larger
teacher with a combined cross-entropy + word-level distillation objective,
on synthetic toy translation tasks, and evaluates with corpus BLEU bucketed
by language resource category.
"""

__version__ = "0.1.0"
