"""Scene-graph image captioning at desk scale.

A from-scratch stack: tape-based reverse-mode autodiff, gated attention
refinement over spatial and relationship features, a stepwise LSTM
decoder, caption metrics, a visual-semantic embedding reward network, and
a two-phase trainer (cross-entropy, then self-critical sequence training
with a multi-modal reward).
"""

__version__ = "0.1.0"
