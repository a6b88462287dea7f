"""Multimodal vehicle event-sequence modeling.

Two event streams (diagnostic trouble codes and environmental condition
triplets) are tokenized, embedded with fused lookups plus continuous
time/mileage sinusoids, encoded by a dual-stream co-attention transformer
with rotary position encodings, pretrained with a weighted masked
reconstruction objective, and evaluated on multi-label error-pattern
classification.
"""

__version__ = "0.1.0"
