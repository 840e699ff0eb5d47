"""Identification and localization of voltage fluctuation sources.

Pipeline: multi-point voltage recordings -> carrier-referenced amplitude
demodulation -> empirical wavelet decomposition of each envelope ->
per-component change amplitudes -> propagation assessment on a radial grid.
"""

__version__ = "0.1.0"
