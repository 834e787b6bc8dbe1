"""EMA-gated hierarchical attention encoder with BiLSTM-CRF sequence labeling."""

__version__ = "0.1.0"
