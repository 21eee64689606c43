"""Smoke test for the `lbv` extension module.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import math
import random
import tempfile
from pathlib import Path

import lbv


def check_primitives():
    assert lbv.halton_sequence(2, 4) == [0.5, 0.25, 0.75, 0.125]
    assert lbv.coefficient_of_variation([0.5, 1.0, 1.5]) == 50.0
    stat, decision = lbv.lm_test([1, 2], [1.0, 2.0])
    assert stat == 0.9 and decision == "poisson_ok"
    assert abs(lbv.mcfadden_rho2(-578.31, -336.72) - 0.4178) < 1e-4
    assert abs(lbv.normal_quantile(0.975) - 1.959963984540054) < 1e-12
    d = lbv.great_circle_distance(42.0, -83.0, 42.0 + math.degrees(45.0 / 6_371_000.0), -83.0)
    assert abs(d - 45.0) < 1e-6


def check_models():
    rng = random.Random(3)
    x = [[rng.uniform(0.0, 2.0)] for _ in range(400)]
    y = [poisson(rng, math.exp(0.5 + 0.4 * row[0])) for row in x]
    fit = lbv.fit_poisson(y, x, ["x"])
    assert fit.family == "poisson"
    b0, b1 = fit.estimates
    assert abs(b0 - 0.5) < 0.3 and abs(b1 - 0.4) < 0.3
    assert 0.0 < fit.mcfadden_rho2 < 1.0
    assert fit.lm_decision in ("poisson_ok", "overdispersed")

    nb = lbv.fit_negative_binomial(y, x, ["x"])
    assert nb.loglik >= fit.loglik - 1e-9

    rp = lbv.fit_random_poisson(y, x, ["x"], ["x"], draws=50, seed=1)
    assert rp.draws == 50
    (name, sd, _, _, _), = rp.standard_deviations
    assert name == "x" and sd >= 0.0
    assert rp.marginal_effects[0][0] == "x"

    try:
        lbv.fit_poisson([0, 0, 0], [[1.0], [2.0], [3.0]], ["x"])
    except ValueError:
        pass
    else:
        raise AssertionError("all-zero response should raise")


def poisson(rng, lam):
    k, p, limit = 0, 1.0, math.exp(-lam)
    while True:
        p *= rng.random()
        if p <= limit:
            return k
        k += 1


def check_volatility():
    speed = [5.0 + (i % 10) for i in range(400)]
    accel = [(0.5 + (i % 7) * 0.1) * (1 if i % 2 else -1) for i in range(400)]
    s = lbv.compute_lbv(speed, accel)
    assert s.n_points == 400 and sum(s.counts) == 400
    assert s.sufficient and s.cv_al is not None


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        sites = ["site_id,name,center_lat,center_lon,control,legs,aadt_major,aadt_minor,"
                 "speed_limit_major,speed_limit_minor,through_lanes_total,left_lanes_total,"
                 "right_lanes_total,crashes_5yr_total,crashes_5yr_rearend"]
        rows = ["device_id,trip_id,timestamp,latitude,longitude,speed,heading,accel_long"]
        rng = random.Random(7)
        for k in range(3):
            lat = 42.0 + 0.01 * k
            sites.append(f"S{k},Site {k},{lat},-83.0,signalized,4,20000,5000,35,25,4,2,1,{3 * k},{k}")
            for i in range(600):
                a = rng.uniform(0.2, 2.0 + k) * (1 if i % 2 else -1)
                rows.append(f"d{k},t{k}-{i},{i},{lat + 1e-5 * (i % 20)},-83.0,{rng.uniform(3, 15)},0,{a}")
        (tmp / "sites.csv").write_text("\n".join(sites) + "\n")
        (tmp / "bsm.csv").write_text("\n".join(rows) + "\n")
        (tmp / "run.toml").write_text(
            'seed = 1\n[ingest]\ninputs = ["bsm.csv"]\n[match]\ninventory = "sites.csv"\n'
        )
        manifest = lbv.run_pipeline(str(tmp / "run.toml"))
        assert manifest.complete
        stages = {name: (rin, rout) for name, rin, rout in manifest.stages}
        assert stages["ingest"] == (1800, 1800) and stages["compute"][1] == 3
        lbv_rows = lbv.read_lbv(str(tmp / "bundle" / "lbv.csv"))
        assert [r.site_id for r in lbv_rows] == ["S0", "S1", "S2"]
        ranked = lbv.rank_sites(str(tmp / "bundle" / "lbv.csv"), str(tmp / "sites.csv"))
        assert {r.site_id for r in ranked} == {"S0", "S1", "S2"}
        assert ranked[0].discrepancy >= ranked[-1].discrepancy


if __name__ == "__main__":
    check_primitives()
    check_models()
    check_volatility()
    check_pipeline()
    print("lbv smoke test passed")
