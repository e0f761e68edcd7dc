"""Toy generalized referring expression grounding with a numpy autodiff core.

Subpackages are plain modules: ``tensor`` (autodiff), ``boxes`` (box and mask
geometry), ``assignment`` (Hungarian matching), ``alignment`` and ``counter``
(auxiliary losses), ``model``/``train`` (network and training loop), ``data``
(synthetic scenes), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
