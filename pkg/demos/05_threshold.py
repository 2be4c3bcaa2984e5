"""
Where the Hessian stops being integrable
========================================

For u = x_n^(1 + a) the integral of |D^2 u|^delta is finite iff delta (1 - a) < 1.
"""

from w2delta.estimates import threshold_table

rows = threshold_table([0.3, 0.5, 0.7], [0.5, 1.25, 1.85])
print(f"{'a':>4} {'delta':>6} {'theory':>8} {'grids':>8} {'extrapolated':>13} {'closed form':>12}")
for r in rows:
    print(f"{r['alpha0']:4.1f} {r['delta']:6.2f} {str(r['predicted_stable']):>8} {str(r['stable']):>8} "
          f"{r['value']:13.5g} {r['closed_form']:12.5g}")
