"""Spectral POD reduced-order modelling with neural compression and forecasting.

Modules
-------
dataset      snapshot containers, SROM files, synthetic flows
spod         Welch-blocked spectral POD
projection   oblique projection and reconstruction
pruning      RIC frequency truncation and similarity pruning
nn           numpy dense / LSTM / conv kernels with Adam
autoencoder  coefficient compression
forecaster   latent LSTM forecasting and diagnostics
scalar_map   CNN velocity-to-concentration map
pipeline     offline / online orchestration and reports
"""

__version__ = "0.1.0"
