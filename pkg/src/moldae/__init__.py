"""moldae: denoising sequence-to-sequence pretraining toolkit for SMILES strings.

Subpackages cover the full pipeline: SMILES parsing/canonicalization and
fingerprints (`molgraph`), rule and learned subword tokenization
(`tokenizer`), the span-infilling noiser (`corruptor`), a small
encoder-decoder transformer with training loop (`model`), fine-tuning
recipes and metrics (`finetune`), decoding strategies (`generate`),
attribution / probing / representation-distance analyses (`interpret`),
and the command line shell (`cli`).
"""

__version__ = "0.1.0"
