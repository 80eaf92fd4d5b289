"""noisebound: noise-resilience measurement and deterministic PAC-Bayes bounds
for small ReLU feedforward networks.

The package trains bias-free ReLU nets, measures how their layer norms,
pre-activations and interlayer Jacobians behave on data, solves for the
largest parameter-noise scale those measurements tolerate, and turns the
result into a deterministic margin-based generalization bound, alongside
spectral-product baselines and Monte Carlo verification of the underlying
perturbation statements.
"""

from .linalg import RngStream

__version__ = "0.1.0"

__all__ = ["RngStream", "__version__"]
