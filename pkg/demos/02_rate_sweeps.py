"""Small versions of the rate sweeps, printed as tables.

    python3 demos/02_rate_sweeps.py

The full-size sweeps live behind ``consistency-lab rates --sweep ...``.
"""
from consistency_lab.lab import bundled_config, rate_study_eps, rate_study_M, rate_study_T


def show(rep, label):
    fit = rep.fit or {}
    print(f"\n{label}: slope {fit.get('slope', float('nan')):+.3f} (band {fit.get('band')})")
    for c in rep.cells:
        print(f"  x={c['x']:<8g} W1={c['mean']:.4e} +/- {c['stderr']:.1e}")


show(rate_study_T(bundled_config("rates_T").replace(m_eval=100_000, trials=3)), "terminal time T (semi-log)")
show(rate_study_eps(bundled_config("rates_eps").replace(m_eval=32_768, trials=3)), "early stopping eps")
show(rate_study_M(bundled_config("rates_M")), "fine steps per interval M")
