"""A Gaussian-mixture latent prior on pinwheel data.

Trains SRVAE-GMM and a Gaussian-latent VAE on a five-armed pinwheel and
reports how much of each model's generated mass lands on the arms. Expect a
few minutes per seed on one CPU.

Run: python3 demos/03_pinwheel.py [n_seeds]
"""
import sys

from srvae import experiments as ex

n = int(sys.argv[1]) if len(sys.argv) > 1 else 1
res = ex.pinwheel_comparison(ex.PinwheelStudy(), range(n))
for kind, r in res.items():
    print(f"{kind:>10}: free energy {r['free_energy']}, coverage {r['coverage']}")
