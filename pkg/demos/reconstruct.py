"""Decode features from simulated voxels, then invert them to images.

The toy network is conv 3x3 -> rectifier -> 4x4 max pool on 32x32 inputs,
so layer 2 has 256 features. 512 of 768 voxels carry noisy 3-sparse
mixtures of those features. Reconstructions are scored with CW-SSIM
against their own stimulus and against a permutation chance baseline.
Writes PGMs to demos_out/ next to this file.
"""
import os

import numpy as np

from voxrecon import convnet as cn, decoder as dec, metrics as mt, synth
from voxrecon.inversion import InversionConfig, invert
from voxrecon.pgm import write_pgm
from voxrecon.sparse import SolverConfig

out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "demos_out")
os.makedirs(out, exist_ok=True)

stimuli = synth.generate_stimuli(200, 32, 32, seed=0)
net = cn.build_network((1, 32, 32), cn.toy_specs(4, 4), seed=0)
F = synth.feature_matrix(net, stimuli, 2)
X, truth = synth.simulate_voxels(stimuli, net, 2, synth.TruthConfig(768, 512, 3, 0.1, seed=0))

model = dec.train_layer_decoder(X[:180], F[:180], SolverConfig(sparsity_k=32, residual_tol=1e-6, delta=0.05), 2)
acc = dec.evaluate_accuracy(model, X[180:], F[180:])
print(f"held-out feature accuracy: mean r = {acc.mean_r:.3f} over {acc.valid_count} features")

recons, targets = [], []
for i in range(180, 190):
    target = dec.predict_features(model, X[i]).values
    res = invert(net, 2, target, InversionConfig(lambda_alpha=1e-5, lambda_tv=1e-3, max_iterations=1000, seed=1))
    img = np.clip(res.image[0], 0, 1)
    write_pgm(os.path.join(out, f"recon_{i}.pgm"), img)
    write_pgm(os.path.join(out, f"stim_{i}.pgm"), stimuli[i])
    recons.append(img)
    targets.append(stimuli[i])

M = mt.cwssim_matrix(recons, targets)
chance = mt.chance_baseline(recons, targets, 200, seed=0, matrix=M)
t = mt.one_sample_ttest(np.diag(M), chance.mean)
print(f"matched CW-SSIM {np.diag(M).mean():.3f}, chance {chance.mean:.3f}, one-sided p = {t.p_one_sided:.1e}")
