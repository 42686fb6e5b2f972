"""Likelihood-free inference for damped oscillators and sine-Gaussians.

Submodules: ``signals`` (waveforms, priors, datasets), ``diffcore`` (reverse-mode
autodiff), ``nets`` and ``embedding`` (encoder, expander, VICReg pretraining),
``flow`` (conditional masked autoregressive flow), ``validation`` (grid oracle,
Cramér-Rao widths, calibration) and ``cli``.
"""

__version__ = "0.1.0"
