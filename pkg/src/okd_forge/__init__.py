"""okd_forge: knowledge distillation with out-of-distribution data, at desk scale.

Modules: ``tensor`` (autograd), ``nets`` (tiny conv nets), ``distill`` (losses),
``oodgen`` (augmentors), ``dosco`` (domain splits and the synthetic benchmark),
``harness`` (training and comparison) and ``cli``.
"""

__version__ = "0.1.0"
