"""Offline lifetime-value evaluation and improvement of recommendation policies.

Interaction logs are factorized into latent user and item vectors, turned
into state trajectories, and fed to linear temporal-difference estimators.
Bootstrap resampling plus a signed-rank test certify whether an improved
policy beats the logged one.
"""

__version__ = "0.1.0"
