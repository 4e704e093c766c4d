"""How the two pruning thresholds trade mode count against reconstruction error.

The frequency threshold keeps the bins that carry most of the separated
energy; the similarity threshold then drops modes that nearly repeat a
stronger one.  Watch the mode count, the retained TKE share and the
projection error as the similarity threshold moves.

    python demos/pruning_sensitivity.py
"""

from spodrom.dataset import PlantedComponent, SynthConfig, compute_fluctuations, synthesize_flow
from spodrom.pruning import pruning_sensitivity, select_frequencies, select_modes
from spodrom.spod import SpodParams, compute_spod

comps = [PlantedComponent(0, 4 / 64, 1.0, phase_diffusion=0.05),
         PlantedComponent(1, 9 / 64, 0.6, 0.5, phase_diffusion=0.05),
         PlantedComponent(2, 15 / 64, 0.4, 1.0, phase_diffusion=0.05)]
data = synthesize_flow(SynthConfig(nx=16, nz=12, n_t=2048, components=comps, snr_db=25.0,
                                   with_concentration=False), seed=2)
fluct, _ = compute_fluctuations(data)
basis = compute_spod(fluct, SpodParams(64, 32))

for eps_ric in (0.5, 0.8, 0.95, 1.0):
    print(f"eps_ric={eps_ric:<5} keeps {len(select_frequencies(basis, eps_ric))} of "
          f"{basis.n_fc} frequencies")

print("\neps_gamma   n_m   TKE share   NMSE")
for row in pruning_sensitivity(basis, fluct, [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0], 0.8):
    print(f"  {row['eps_gamma']:<8} {row['n_m']:5d}   {row['tke_fraction']:.4f}    "
          f"{row['nmse']:.4f}")

sel = select_modes(basis, 0.8, 0.3)
print(f"\nchosen: eps_ric=0.8 eps_gamma=0.3 -> N_f={sel.n_f} N_m={sel.n_m}")
