"""Multilingual grapheme speech recognition from raw waveforms.

Three training stages: contrastive speech representation learning, masked
reconstruction pretraining of the recognition backbone, and supervised CTC
training of the whole network, plus n-gram LM beam decoding and label
error rate scoring.
"""

__version__ = "0.1.0"
