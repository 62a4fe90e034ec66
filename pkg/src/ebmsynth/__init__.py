"""Energy-based text-to-feature synthesis at desk scale.

An attention-based energy network scores (token sequence, feature sequence)
pairs; training uses noise contrastive estimation against engineered negative
samples, inference refines hypotheses by descending the feature-space energy
gradient (Langevin MCMC and variants), and an objective metric suite (DTW,
MCD, FFE, log-F0 RMSE) closes the loop.
"""

__version__ = "0.1.0"
