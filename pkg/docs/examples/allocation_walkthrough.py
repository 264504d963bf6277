# coding: utf-8

# # Optimal allocation for a two-phase subsample
#
# A cohort is split into strata from phase-I data. The phase-II budget is
# spread across strata to minimise the variance of an estimated regression
# coefficient, using stratum standard deviations of its influence functions.

import numpy as np

from twophase.allocation import (
    StratumTable,
    influence_dispersions,
    proportional_allocation,
    share_distance,
    variance_objective,
    wright_allocation,
)
from twophase.glm import fit_weighted_glm
from twophase.simulation import PRIORS_OUTCOME, gen_priors_scenario

rng = np.random.default_rng(1)

# ## A small hand-made table

table = StratumTable([1, 2, 3], N=[100, 200, 300], s=[2.0, 1.0, 1.0])
alloc = wright_allocation(table, n=10, n_min=1)
print("integer optimum:", alloc.n, "objective:", variance_objective(table, alloc.n))

# ## Influence-based allocation in a simulated cohort
#
# With the full cohort in hand (a simulation oracle) the influence functions
# of the coefficient of X are available for every unit.

cohort = gen_priors_scenario(1000, rng)
fit = fit_weighted_glm(cohort, PRIORS_OUTCOME)
target = PRIORS_OUTCOME.index("X")
st = influence_dispersions(fit.influence, cohort.stratum, target)

opt = wright_allocation(st, 300)
prop = proportional_allocation(st, 300)
print("strata sizes:      ", st.N)
print("optimal allocation:", opt.n)
print("proportional:      ", prop.n)
print("share L1 distance: ", round(share_distance(opt, prop), 3))
print("objective ratio (optimal / proportional):",
      round(variance_objective(st, opt.n) / variance_objective(st, prop.n), 3))
