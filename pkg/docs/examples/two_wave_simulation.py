# coding: utf-8

# # A small two-wave simulation
#
# Compares a proportional first wave followed by an adaptive second wave
# against designs whose first wave is allocated from a prior. Scaled down
# so that it runs in well under a minute.

import numpy as np

from twophase.simulation import ScenarioConfig, run_replications

cfg = ScenarioConfig("priors_binary", reps=40, wave_plans=((50, 250),),
                     designs=("well.strong", "prop.two"), prior_draws=100)
table = run_replications(cfg)

cols = ["design", "estimator", "bias", "empirical_se", "empirical_se_mcse",
        "mean_estimated_se", "relative_efficiency"]
print(table.summary[table.summary.coefficient == "X"][cols].to_string(index=False))

# ## Raking-oriented designs

cfg = ScenarioConfig("raking_continuous", reps=40)
table = run_replications(cfg)
print(table.summary[table.summary.coefficient == "X"][cols].to_string(index=False))

mean = table.allocations.groupby(["design", "stratum"]).n.mean().unstack()
print("mean allocation shares")
print((mean.T / mean.sum(1)).T.round(3))
