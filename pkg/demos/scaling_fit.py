"""
Success rate against model size
===============================

Fit y = alpha * log10(x) + intercept per component and compare slopes.
The points are synthetic: each component line plus a little noise.
"""

import numpy as np

from plancentric.scaling import ScalePoint, coefficient_table, fit_by_component, predict_success

rng = np.random.default_rng(0)
sizes = [3, 7, 14, 32, 72]
lines = {"planner": (16.0, 12.7), "actor": (12.0, 14.0), "memory": (5.6, 22.0), "all": (15.6, 18.1)}

points = [ScalePoint(x, float(np.clip(a * np.log10(x) + b + rng.normal(0, 1.5), 0, 100)), label)
          for label, (a, b) in lines.items() for x in sizes]
fits = fit_by_component(points)
print(coefficient_table(fits.values()))

# a steeper slope means extra parameters pay off more for that component
for f in sorted(fits.values(), key=lambda f: -f.alpha):
    print(f"{f.component_label:>8}: +{f.alpha:.1f} points per 10x parameters")
for x in (200, 1000):
    y, clamped = predict_success(fits["all"], x)
    print(f"all @ {x}B -> {y:.1f}%" + (" (clamped)" if clamped else ""))
