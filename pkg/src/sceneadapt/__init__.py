"""Scene-sequential self-supervised adaptation of a small ERB-mask speech
enhancer with low-rank adapters, plus a full-fine-tune remix baseline and
SI-SDR/SNR reporting."""

__version__ = "0.1.0"
