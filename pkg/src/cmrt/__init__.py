"""Desk-scale lab for cross-modal robustness transfer in speech translation.

Modules: ``diffcore`` (autodiff engine), ``model`` (toy speech/text
translation model), ``objectives`` (training losses), ``morpheus``
(inflectional attack), ``corpus`` (synthetic data), ``analysis`` (BLEU,
CKA, alignment) and ``cli`` (pipeline).
"""

__version__ = "0.1.0"
