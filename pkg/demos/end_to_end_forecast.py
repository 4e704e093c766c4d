"""Train the whole chain on the desk-scale dataset and forecast the held-out part.

Offline: SPOD, pruning, projection, autoencoders, LSTM forecasters and the
concentration CNN, written into a bundle directory.  Online: ten
snapshots seed a closed-loop forecast over the rest of the test segment,
and the report tables land next to the bundle.

    python demos/end_to_end_forecast.py [output_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from spodrom.dataset import SynthConfig, split_train_test, synthesize_flow
from spodrom.pipeline import default_config, emit_report, run_offline, run_online

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="spodrom-demo-"))
cfg = default_config()
data = synthesize_flow(SynthConfig.from_dict(cfg["synth"]), cfg["seed"])
bundle = run_offline(data, cfg, out / "bundles")
p = bundle.provenance
print(f"bundle {bundle.path}")
print(f"  N_f={p['n_f']} N_m={p['n_m']} N_z={p['n_z']}")
print(f"  field NMSE: projection {p['projection_nmse']:.4f}, through the AE {p['ae_field_nmse']:.4f}")

_, test = split_train_test(data, cfg["split_ratio"])
n = bundle.n_t_in
ref = test.subset(n, test.n_t)
res = run_online(bundle, test.subset(0, n), ref.n_t, ref)
nv = res.metrics["nmse_velocity"]
nc = res.metrics["nmse_concentration"]
print(f"\nforecast of {ref.n_t} steps")
for lead in (1, 10, 50, 100, 400, ref.n_t):
    print(f"  lead {lead:4d}: velocity NMSE {nv[lead - 1]:.3f}  concentration NMSE {nc[lead - 1]:.3f}")
print(f"  mean over horizon: velocity {np.mean(nv):.3f}  concentration {np.mean(nc):.3f}")

summary = emit_report(bundle, res.velocity, out / "report", ref)
print(f"\nreport files in {out / 'report'}: {', '.join(summary['files'])}")
