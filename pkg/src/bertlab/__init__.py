"""Small-scale continual-pretraining laboratory: masked-language-model
pretraining, adaptation with forgetting mitigations, intrinsic and
downstream evaluation, dataset re-alignment, and checkpointing."""

__version__ = "0.1.0"
