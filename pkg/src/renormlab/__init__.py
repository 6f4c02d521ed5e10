"""Desk-scale laboratory for norm-preserving LoRA encoder distillation.

Subpackages cover the numeric substrate (``tensor``), the norm-preserving
adapter (``lora``), a miniature encoder/decoder reconstruction model
(``model``), uncertainty-weighted training losses (``losses``), the
projection-error analysis under multiplicative scale perturbation
(``scale_uncertainty``), evaluation metrics (``metrics``), synthetic scene
generation (``synthdata``), and the training harness (``train``).
"""

__version__ = "0.1.0"
