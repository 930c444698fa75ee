"""Smoke test for the pydrobas extension. Run after `maturin develop` or installing the wheel."""
import csv
import io
import json
import math

import pydrobas as d

# Gamma(1, 1) prior, three observations: shape 4, minimum radius ln 4 - digamma(4).
prior = d.Posterior.gamma_exponential(1.0, 1.0)
post = prior.update([10.0, 5.0, 15.0])
assert post.n_obs == 3 and post.family
eps_min = post.eps_min()
assert abs(eps_min - (math.log(4) - (1.5 + 1 / 3 - 0.5772156649015329))) < 1e-12, eps_min
assert d.Posterior.from_json(post.to_json()).to_json() == post.to_json()

# Inner dual: value sits between the mean and the max of the losses.
losses = [1.0, 2.0, 5.0]
inner = d.solve_inner(0.1, losses)
assert sum(losses) / 3 <= inner["value"] <= max(losses)
assert abs(sum(inner["weights"]) - 1.0) < 1e-9
assert d.perspective_lse(0.0, losses) == 5.0

p = d.project_simplex([0.5, 2.0, -1.0])
assert abs(sum(p) - 1.0) < 1e-12 and min(p) >= 0.0

# Single solves on a newsvendor instance.
ng = d.Posterior.default_prior("normal-gamma").update([18.0, 25.0, 22.0, 30.0, 17.0])
for method in ["DRO-BAS-PP", "DRO-BAS-PE", "BDRO"]:
    sol = d.solve(ng, 1.0, method=method, m=100, seed=1)
    assert sol is not None and 0.0 <= sol["x_star"][0] <= 100.0, (method, sol)
assert d.solve(ng, 0.0, method="DRO-BAS-PE") is None

niw = d.Posterior.default_prior("niw", 3).update([[0.01, 0.02, -0.01], [0.0, 0.01, 0.02], [0.02, -0.01, 0.0]])
sol = d.solve(niw, 5.0, method="DRO-BAS-PE", loss="portfolio")
assert abs(sum(sol["x_star"]) - 1.0) < 1e-6

# A tiny newsvendor run through the CSV interface.
cfg = json.loads(d.newsvendor_default_config())
cfg.update(replicates=3, m_values=[25], epsilon=[0.05, 0.5], methods=["DRO-BAS-PP", "BDRO"])
results, summary = d.run_newsvendor(json.dumps(cfg), threads=1)
rows = list(csv.DictReader(io.StringIO(results)))
assert len(rows) == 3 * 2 * 2
srows = list(csv.DictReader(io.StringIO(summary)))
assert len(srows) == 4 and any(r["on_pareto"] == "true" for r in srows)

print("pydrobas smoke test ok", d.__version__)
