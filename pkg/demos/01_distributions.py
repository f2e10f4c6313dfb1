"""
Generalized hyperbolic and skew-t building blocks
=================================================

A GHD vector is a normal mean-variance mixture X = mu + W beta + sqrt(W) U
with a GIG mixing variable W.  The skew-t arises when W is inverse gamma.
"""

import numpy as np

from hyperclust.distributions import (
    GhdParams,
    GigParams,
    StParams,
    conditional,
    ghd_log_density,
    gig_expect_log,
    gig_moment,
    log_density,
    marginal,
    sample_ghd,
    st_log_density,
)

# GIG moments come straight from Bessel-function ratios
mix = GigParams(lam=-0.5, chi=6.0, psi=6.0)
print("E[W] =", gig_moment(1, mix), " E[1/W] =", gig_moment(-1, mix), " E[log W] =", gig_expect_log(mix))

# a skewed bivariate GHD and a Monte Carlo look at its mean
ghd = GhdParams(mu=[1.0, -3.0], sigma=[[5 / 3, 4 / 3], [4 / 3, 5 / 3]], beta=[1.0, 1.0], lam=-0.5, omega=6.0)
draws = sample_ghd(ghd, 100_000, seed=0)
print("sample mean", draws.mean(axis=0), " analytic", ghd.mu + gig_moment(1, mix) * ghd.beta)

# log densities at a few points
pts = np.array([[1.0, -3.0], [3.0, 0.0], [-2.0, -6.0]])
print("GHD log density", ghd_log_density(pts, ghd))

st = StParams(mu=[1.0, -3.0], sigma=np.diag([3.0, 1 / 3]), beta=[1.0, 1.0], dof=7.0)
print("skew-t log density", st_log_density(pts, st))

# closure: joint = marginal of the first coordinate + conditional of the second
x = pts[1]
joint = log_density(x, ghd)
split = log_density(x[:1], marginal(ghd, [0])) + log_density(x[1:], conditional(ghd, [0], x[:1]))
print(f"joint {joint:.12f}  marginal + conditional {split:.12f}")
