"""Bars: bound ordering and decoded crosses.

On bar images whose prior allows exactly one bar per side, a model whose
decoder has learned the data should decode every latent state to something
close to a cross. The cross distance measures that over all 2^16 states.

Run: python3 demos/05_bars.py [n_seeds]
"""
import sys

from srvae import experiments as ex

n = int(sys.argv[1]) if len(sys.argv) > 1 else 1
fe = ex.bar_free_energies(ex.BarStudy(omega=4.0), range(n))
print("free energy per image, omega 4:", {k: [round(v, 3) for v in vals] for k, vals in fe.items()})
d = ex.bar_cross_distances(ex.BarStudy(side_dependent=True, variants=("tree", "svae", "vae")), range(n))
print("cross distance, side-dependent data:", {k: [round(v, 3) for v in vals] for k, vals in d.items()})
