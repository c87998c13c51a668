"""Visual-area contributions across layers and their Mann-Kendall trends.

Voxels are assigned to V1-V4 and prefer a layer depth that grows with the
area rank (gradient 8). For each layer a decoder is fitted, its 300 most
used voxels are split by area, and each area's share is tested for a
monotone trend across the 8 layers.
"""
import numpy as np

from voxrecon import convnet as cn, decoder as dec, synth
from voxrecon.sparse import SolverConfig

stimuli = synth.generate_stimuli(200, 32, 32, seed=0)
net = cn.build_network((1, 32, 32), synth.trend_specs(), seed=0)
amap, prefs = synth.make_area_map(800, {"V1": 0.3, "V2": 0.3, "V3": 0.25, "V4": 0.15}, 8, gradient=8, seed=0)
X, _ = synth.simulate_voxels(stimuli, net, prefs, synth.TruthConfig(800, None, 3, 0.1, seed=0), areas=amap)

areas = ("V1", "V2", "V3", "V4")
series = {a: [] for a in areas}
for layer in range(len(net)):
    model = dec.train_layer_decoder(X, synth.feature_matrix(net, stimuli, layer),
                                    SolverConfig(sparsity_k=16, residual_tol=1e-6, delta=0.05), layer)
    share = dec.area_contributions([p for p in dec.select_significant_voxels(model, 300) if p[1] > 0], amap)
    for a in areas:
        series[a].append(share.get(a, 0.0))

print("layer " + " ".join(f"{a:>6s}" for a in areas))
for layer in range(len(net)):
    print(f"{layer:5d} " + " ".join(f"{series[a][layer]:6.3f}" for a in areas))
for a in areas:
    mk = dec.mann_kendall_trend(np.array(series[a]))
    print(f"{a}: S = {mk.S:+d}  p = {mk.p_two_sided:.4f}  {mk.direction}")
