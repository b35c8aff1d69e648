"""Smoke test for the bdgap extension module.

Build and install first:  pip install --no-build-isolation ./crates/py
"""

import json
import math

import bdgap


def main():
    geo = bdgap.CoefficientModel.geometric()
    assert geo.a(3) == 1.0 and geo.b(3) == 2.0 and geo.b(1) == 0.0

    # a = 1, b = 2 gives Qcal_i = 2 (z/2)^i and mass 2x/(1-x)^2 with x = z/2
    assert abs(bdgap.mass_of_z(geo, 1.0) - 4.0) < 1e-10
    assert abs(bdgap.z_of_mass(geo, 4.0) - 1.0) < 1e-10

    p = bdgap.EquilibriumProfile(geo, 1.0, 200)
    assert p.n == 200 and abs(p.m2 - 12.0) < 1e-9
    assert abs(bdgap.quantity_b(p, geo) - 2.0) < 1e-9
    lo, hi = bdgap.gap_bracket(p, geo)
    assert abs(lo - 0.125) < 1e-12 and math.isinf(hi)
    gap = bdgap.numerical_gap(p, geo)
    assert lo <= gap + 1e-8, (lo, gap)

    again = bdgap.EquilibriumProfile.from_json(p.to_json())
    assert again.log_q == p.log_q

    pt = bdgap.CoefficientModel.power_law(1 / 3, 2 / 3)
    assert json.loads(pt.to_json())["kind"] == "PowerLawPT"
    q = bdgap.EquilibriumProfile(pt, 0.6, 150)
    report = bdgap.spectral_report(q, pt)
    assert report["lambda_lo"] <= report["lambda_numeric"] + 1e-8

    rhs = bdgap.bd_rhs(pt, [0.5, 0.2, 0.1, 0.05])
    assert abs(sum((i + 1) * r for i, r in enumerate(rhs))) < 1e-15

    run = bdgap.simulate(q, pt, t_end=20.0, epsilon=0.1, seed=3)
    assert run["mass_drift"] < 1e-8
    assert all(b <= a + 1e-10 for a, b in zip(run["H"], run["H"][1:]))
    assert run["fit"] is not None and run["fit"]["rate"] > 0.9 * report["lambda_lo"]

    hb = bdgap.hardy_bracket([0.5 ** i for i in range(1, 60)], [1.0] * 59, 58)
    assert hb["witness_ratio"] >= hb["b_hardy"] * (1 - 1e-6)

    try:
        bdgap.z_of_mass(pt, 1e9)
    except ValueError as e:
        assert "critical" in str(e)
    else:
        raise AssertionError("supercritical mass accepted")

    print("bdgap smoke test: ok (gap %.6f, fitted rate %.6f)" % (gap, run["fit"]["rate"]))


if __name__ == "__main__":
    main()
