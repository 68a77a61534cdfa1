"""Smoke test for the snuts extension module: build, approximate, sample, summarize."""

import math

import snuts


def main():
    model = snuts.build_model("eight_schools_nc")
    assert model.dim == 10, model.dim
    q = model.initial_point()
    lp, grad = model.log_density_grad(q)
    assert math.isfinite(lp) and len(grad) == model.dim

    gm = snuts.build_model("gmrf_poisson_lattice", {"side": 6}, seed=3)
    lap = snuts.laplace(gm)
    assert len(lap.q_hat) == gm.dim
    draws = lap.sample(50, seed=2)
    assert len(draws) == 50 and len(draws[0]) == gm.dim

    run = snuts.sample(model, mode="snuts-auto", chains=2, iter=200, seed=5)
    assert run.precond == "diag", run.precond
    summary = snuts.summarize(run)
    assert summary["min_ess"] > 0
    assert set(summary["params"]) >= set(model.param_names)

    again = snuts.sample(model, mode="snuts-auto", chains=2, iter=200, seed=5)
    assert run.draws() == again.draws(), "same seed must reproduce draws"

    assert snuts.wasserstein1d([0.0, 1.0], [1.0, 2.0]) == 1.0
    try:
        snuts.build_model("no_such_model")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown model should raise")
    print(f"ok: {model!r}, min ESS {summary['min_ess']:.1f}, precond {run.precond}")


if __name__ == "__main__":
    main()
